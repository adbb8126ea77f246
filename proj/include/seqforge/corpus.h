#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "seqforge/rng.h"

namespace seqforge {

  struct NoiseConfig {
    double mask_fraction = 0.35;
    double span_lambda = 3.5;
    bool permute_sentences = false;
    int32_t mask_id = 4;

    void validate() const;
  };

  struct SamplerConfig {
    double temperature = 5.0;
    std::vector<int64_t> sizes;
  };

  // One training pair under the sequence convention (see tokenizer.h).
  // ctx is the optional document context / second source.
  struct Example {
    std::vector<int32_t> src;
    std::vector<int32_t> tgt_in;
    std::vector<int32_t> tgt_out;
    std::vector<int32_t> ctx;
  };

  // Padded, row-major token matrices. tgt_out is tgt_in shifted left by one.
  struct Batch {
    int64_t batch_size = 0;
    int64_t src_len = 0;
    int64_t tgt_len = 0;
    int64_t ctx_len = 0;
    std::vector<int32_t> src;
    std::vector<int32_t> tgt_in;
    std::vector<int32_t> tgt_out;
    std::vector<int32_t> ctx;
    std::vector<int64_t> src_lengths;
    std::vector<int64_t> tgt_lengths;
    std::vector<int64_t> ctx_lengths;
    // Padded cost used against the token budget: max(B*S, B*T).
    int64_t token_count = 0;
    // Index of each row in the originating example list.
    std::vector<int64_t> example_ids;

    bool has_context() const { return ctx_len > 0; }
    int64_t target_tokens() const;
  };

  Batch collate(std::span<const Example> examples, std::span<const int64_t> ids = {});

  std::vector<std::string> read_lines(const std::string& path);
  // Blank-line separated documents, one sentence per line.
  std::vector<std::vector<std::string>> read_documents(const std::string& path);

  // Lines whose index mod num_workers == worker_id.
  std::vector<std::string> shard(const std::vector<std::string>& lines, int num_workers, int worker_id);
  std::vector<std::string> shard_file(const std::string& path, int num_workers, int worker_id);

  struct Span {
    int64_t start = 0;
    int64_t length = 0;
  };

  struct InfillResult {
    std::vector<int32_t> tokens;
    std::vector<Span> spans;
    int64_t consumed = 0;
  };

  // Replaces each span with a single mask token. Spans must be disjoint.
  std::vector<int32_t> apply_spans(std::span<const int32_t> tokens, std::vector<Span> spans, int32_t mask_id);

  // Text infilling: Poisson-length spans at uniform unmasked starts until at
  // least mask_fraction of the tokens are consumed. Special ids are never masked.
  InfillResult infill(std::span<const int32_t> tokens,
                      const NoiseConfig& cfg,
                      Rng& rng,
                      std::span<const int32_t> special_ids = {});

  // Uniform random order (Fisher-Yates).
  template <typename T>
  std::vector<T> permute_sentences(std::vector<T> document, Rng& rng) {
    for (int64_t i = static_cast<int64_t>(document.size()) - 1; i > 0; --i) {
      const int64_t j = rng.uniform_int(i + 1);
      std::swap(document[i], document[j]);
    }
    return document;
  }

  // p_l proportional to (D_l / sum D)^(1/T).
  std::vector<double> language_sample_probs(const SamplerConfig& cfg);
  size_t sample_index(std::span<const double> probs, Rng& rng);

  struct BatchingReport {
    int64_t skipped = 0;
  };

  // Greedy length-sorted packing under a padded token budget. Examples that
  // do not fit alone are skipped and counted.
  std::vector<Batch> make_batches(std::span<const Example> examples,
                                  int64_t token_budget,
                                  BatchingReport* report = nullptr);

  // The source (and context) end with the source tag; the decoder starts
  // from the target tag.
  Example make_translation_example(std::span<const int32_t> src_subwords,
                                   std::span<const int32_t> tgt_subwords,
                                   int32_t src_tag,
                                   int32_t tgt_tag,
                                   std::span<const int32_t> ctx_subwords = {});

  // src = noised + </s> + tag, tgt = tag + clean (in) / clean + </s> (out).
  Example build_denoising_example(std::span<const int32_t> sentence,
                                  int32_t lang_tag,
                                  const NoiseConfig& cfg,
                                  Rng& rng,
                                  std::span<const int32_t> special_ids = {});

  // Document variant: optional sentence permutation, then infilling over the
  // concatenation. The target is the original document order.
  Example build_document_denoising_example(const std::vector<std::vector<int32_t>>& sentences,
                                           int32_t lang_tag,
                                           const NoiseConfig& cfg,
                                           Rng& rng,
                                           std::span<const int32_t> special_ids = {});

}  // namespace seqforge
