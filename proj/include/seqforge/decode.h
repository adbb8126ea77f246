#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "seqforge/corpus.h"
#include "seqforge/model.h"

namespace seqforge {

  struct BeamConfig {
    int beam = 4;
    double length_penalty = 1.0;
    int max_len = 128;
    void validate() const;
  };

  struct Hypothesis {
    std::vector<int32_t> tokens;  // generated ids; ends with </s> when finished
    double logprob = 0;           // sum of per-step log-softmax values
    double score = 0;             // logprob / len^alpha
    bool finished = false;
  };

  // Source of next-token log-probabilities. Beam search only ever asks for
  // prefixes of equal length in one call.
  class StepScorer {
  public:
    virtual ~StepScorer() = default;
    virtual int32_t vocab_size() const = 0;
    virtual std::vector<std::vector<double>> next_log_probs(const std::vector<std::vector<int32_t>>& prefixes) = 0;
  };

  // Scores prefixes with a model against a fixed source sentence. src is the
  // full encoder input (subwords + </s> + tag), start the decoder's first
  // input token. wait_k > 0 re-encodes the visible source prefix every step.
  class ModelScorer : public StepScorer {
  public:
    ModelScorer(const TransformerModel& model,
                std::vector<int32_t> src,
                int32_t start_token,
                std::vector<int32_t> ctx = {},
                int wait_k = 0);

    int32_t vocab_size() const override { return model_.config().vocab_size; }
    std::vector<std::vector<double>> next_log_probs(const std::vector<std::vector<int32_t>>& prefixes) override;

    // Source positions visible when emitting output token `step` (1-based).
    int64_t visible_source(int64_t step) const;

  private:
    const EncoderOutput& encoded(int64_t visible);

    const TransformerModel& model_;
    std::vector<int32_t> src_;
    std::vector<int32_t> ctx_;
    int32_t start_;
    int wait_k_;
    int64_t cached_visible_ = -1;
    EncoderOutput cache_;
  };

  double length_penalized(double logprob, size_t length, double alpha);

  Hypothesis greedy_decode(StepScorer& scorer, int max_len);
  std::vector<Hypothesis> beam_search(StepScorer& scorer, const BeamConfig& cfg);

  Hypothesis greedy_decode(const TransformerModel& model,
                           std::span<const int32_t> src,
                           int32_t start_token,
                           int max_len,
                           std::span<const int32_t> ctx = {});
  std::vector<Hypothesis> beam_search(const TransformerModel& model,
                                      std::span<const int32_t> src,
                                      int32_t start_token,
                                      const BeamConfig& cfg,
                                      std::span<const int32_t> ctx = {});

  // Greedy decoding where output token t only sees source positions
  // 1..min(k+t-1, S).
  Hypothesis wait_k_decode(const TransformerModel& model,
                           std::span<const int32_t> src,
                           int32_t start_token,
                           int k,
                           int max_len);

  // Teacher-forced log-probability of tgt (ids ending in </s> as produced by
  // the decoders).
  double score_pair(const TransformerModel& model,
                    std::span<const int32_t> src,
                    int32_t start_token,
                    std::span<const int32_t> tgt,
                    bool per_token = false,
                    std::span<const int32_t> ctx = {});
  std::vector<double> score_pairs(const TransformerModel& model,
                                  const std::vector<std::vector<int32_t>>& srcs,
                                  int32_t start_token,
                                  const std::vector<std::vector<int32_t>>& tgts,
                                  bool per_token = false);

  // Replaces [start, start+length) spans of the subword sequence by one mask
  // token each, wraps with </s> and tag, then beam-decodes.
  std::vector<Hypothesis> masked_input_decode(const TransformerModel& model,
                                              std::span<const int32_t> subwords,
                                              const std::vector<Span>& spans,
                                              int32_t tag,
                                              const BeamConfig& cfg);

  // "i:j,k:l" -> half-open spans [i, j), [k, l).
  std::vector<Span> parse_spans(const std::string& text);

  struct ExtractRecord {
    int64_t sentence_index = 0;
    std::string kind;  // enc, dec, enc_self_attn, dec_self_attn, dec_cross_attn
    int layer = 0;     // 1-based
    int head = -1;     // -1 for states
    Shape shape;
    std::vector<Real> values;

    std::string to_json_line() const;
    static ExtractRecord from_json_line(const std::string& line);
    bool operator==(const ExtractRecord&) const = default;
  };

  // Runs one teacher-forced pass on (src, tgt_in) and dumps the requested
  // kinds for the selected layers (1-based; empty = all).
  std::vector<ExtractRecord> extract(const TransformerModel& model,
                                     std::span<const int32_t> src,
                                     std::span<const int32_t> tgt_in,
                                     const std::vector<std::string>& kinds,
                                     const std::vector<int>& layers,
                                     int64_t sentence_index = 0);

}  // namespace seqforge
