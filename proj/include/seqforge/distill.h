#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "seqforge/decode.h"
#include "seqforge/distill_loss.h"
#include "seqforge/model.h"
#include "seqforge/tokenizer.h"
#include "seqforge/train.h"

namespace seqforge {

  class DistillError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
  };

  // (teacher layer, student layer), both 1-based.
  using LayerPair = std::pair<int, int>;

  enum class AttentionKind { EncoderSelf, DecoderSelf, DecoderCross };
  std::string to_string(AttentionKind kind);
  AttentionKind attention_kind_from_string(const std::string& name);

  struct DistillConfig {
    double w_ce = 1.0;
    double w_logit = 1.0;
    double w_hidden = 0.0;
    double w_attn = 0.0;
    double temperature = 1.0;
    // Empty maps fall back to default_layer_map over the stack depths.
    std::vector<LayerPair> encoder_map;
    std::vector<LayerPair> decoder_map;
    std::vector<AttentionKind> attention_kinds = {
        AttentionKind::EncoderSelf, AttentionKind::DecoderSelf, AttentionKind::DecoderCross};

    void validate(const ModelConfig& teacher, const ModelConfig& student) const;
    std::vector<LayerPair> resolved_encoder_map(const ModelConfig& teacher, const ModelConfig& student) const;
    std::vector<LayerPair> resolved_decoder_map(const ModelConfig& teacher, const ModelConfig& student) const;
    nlohmann::json to_json() const;
    static DistillConfig from_json(const nlohmann::json& j);
  };

  // Student layer j takes teacher layer ceil(j * teacher_layers / student_layers).
  std::vector<LayerPair> default_layer_map(int teacher_layers, int student_layers);

  // "t:s,t:s" -> pairs.
  std::vector<LayerPair> parse_layer_map(const std::string& text);

  struct DistillTerms {
    Tensor total;
    // Unweighted components; undefined when their weight is 0.
    Tensor ce, logit, hidden, attn;
  };

  // w_ce * CE + w_logit * L_logit + w_hidden * L_hidden + w_attn * L_attn.
  // The teacher runs without dropout and without recording gradients; terms
  // with weight 0 are not computed, and the teacher is not run at all when
  // only CE is weighted.
  DistillTerms combined_loss(const Batch& batch,
                             const TransformerModel& teacher,
                             const TransformerModel& student,
                             const DistillConfig& cfg,
                             double smoothing,
                             const ForwardOptions& student_opts);

  // Training objective for run_training; the teacher must outlive it and is
  // shared read-only by all workers.
  LossFn distill_objective(const TransformerModel& teacher, DistillConfig cfg, double smoothing);

  struct SequenceDistillResult {
    std::vector<std::string> targets;           // one per input line
    std::vector<std::vector<int32_t>> target_ids;  // best hypothesis without </s>
    int64_t failures = 0;                       // lines emitted empty
  };

  // Beam-decodes every source line with the teacher. A line that cannot be
  // decoded (no subwords, too long for the model, decoder error) yields an
  // empty target and counts as a failure. Hypotheses cut at max_len are kept.
  SequenceDistillResult sequence_distill(const TransformerModel& teacher,
                                         const SubwordModel& tokenizer,
                                         const std::vector<std::string>& sources,
                                         int32_t src_tag,
                                         int32_t tgt_tag,
                                         const BeamConfig& beam);

}  // namespace seqforge
