#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace seqforge {

  // Sufficient statistics for BLEU-4. Additive across sentences.
  struct BleuStats {
    std::array<int64_t, 4> matches{};
    std::array<int64_t, 4> totals{};
    int64_t hyp_length = 0;
    int64_t ref_length = 0;

    BleuStats& operator+=(const BleuStats& other);
  };

  // 13a-style tokenization: punctuation split off, whitespace-joined tokens.
  std::vector<std::string> tokenize_13a(const std::string& line);

  BleuStats bleu_stats(const std::vector<std::string>& hyp_tokens,
                       const std::vector<std::string>& ref_tokens);

  // Score in [0, 100] from accumulated statistics; 0 when any order has no matches.
  double bleu_from_stats(const BleuStats& stats);

  double corpus_bleu(const std::vector<std::string>& hypotheses,
                     const std::vector<std::string>& references);

  // Add-one smoothing on orders 2..4.
  double sentence_bleu(const std::string& hypothesis, const std::string& reference);

}  // namespace seqforge
