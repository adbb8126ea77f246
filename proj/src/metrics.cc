#include "seqforge/metrics.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <regex>
#include <stdexcept>

#include "seqforge/tokenizer.h"

namespace seqforge {

  BleuStats& BleuStats::operator+=(const BleuStats& other) {
    for (int n = 0; n < 4; ++n) {
      matches[n] += other.matches[n];
      totals[n] += other.totals[n];
    }
    hyp_length += other.hyp_length;
    ref_length += other.ref_length;
    return *this;
  }

  namespace {

    void replace_all(std::string& text, const std::string& from, const std::string& to) {
      size_t pos = 0;
      while ((pos = text.find(from, pos)) != std::string::npos) {
        text.replace(pos, from.size(), to);
        pos += to.size();
      }
    }

    using NgramCounts = std::map<std::vector<std::string>, int64_t>;

    NgramCounts count_ngrams(const std::vector<std::string>& tokens, size_t order) {
      NgramCounts counts;
      for (size_t i = 0; i + order <= tokens.size(); ++i)
        ++counts[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + order)];
      return counts;
    }

  }  // namespace

  std::vector<std::string> tokenize_13a(const std::string& input) {
    static const std::regex symbols(R"(([{-~\[-` -&(-+:-@/]))");
    static const std::regex period_comma_before(R"(([^0-9])([\.,]))");
    static const std::regex period_comma_after(R"(([\.,])([^0-9]))");
    static const std::regex dash_after_digit(R"(([0-9])(-))");

    std::string line = input;
    replace_all(line, "<skipped>", "");
    replace_all(line, "-\n", "");
    replace_all(line, "\n", " ");
    if (line.find('&') != std::string::npos) {
      replace_all(line, "&quot;", "\"");
      replace_all(line, "&amp;", "&");
      replace_all(line, "&lt;", "<");
      replace_all(line, "&gt;", ">");
    }
    line = " " + line + " ";
    line = std::regex_replace(line, symbols, " $1 ");
    line = std::regex_replace(line, period_comma_before, "$1 $2 ");
    line = std::regex_replace(line, period_comma_after, " $1 $2");
    line = std::regex_replace(line, dash_after_digit, "$1 $2 ");
    return split_whitespace(line);
  }

  BleuStats bleu_stats(const std::vector<std::string>& hyp_tokens,
                       const std::vector<std::string>& ref_tokens) {
    BleuStats stats;
    stats.hyp_length = static_cast<int64_t>(hyp_tokens.size());
    stats.ref_length = static_cast<int64_t>(ref_tokens.size());
    for (size_t order = 1; order <= 4; ++order) {
      const auto hyp = count_ngrams(hyp_tokens, order);
      const auto ref = count_ngrams(ref_tokens, order);
      int64_t matched = 0, total = 0;
      for (const auto& [ngram, count] : hyp) {
        total += count;
        if (auto it = ref.find(ngram); it != ref.end())
          matched += std::min(count, it->second);
      }
      stats.matches[order - 1] = matched;
      stats.totals[order - 1] = total;
    }
    return stats;
  }

  double bleu_from_stats(const BleuStats& stats) {
    if (stats.hyp_length == 0)
      return 0.0;
    double log_precision = 0;
    for (int n = 0; n < 4; ++n) {
      if (stats.matches[n] == 0 || stats.totals[n] == 0)
        return 0.0;
      log_precision += std::log(static_cast<double>(stats.matches[n]) / stats.totals[n]);
    }
    const double ratio = static_cast<double>(stats.ref_length) / stats.hyp_length;
    const double brevity = std::min(1.0, std::exp(1.0 - ratio));
    return 100.0 * brevity * std::exp(log_precision / 4.0);
  }

  double corpus_bleu(const std::vector<std::string>& hypotheses,
                     const std::vector<std::string>& references) {
    if (hypotheses.empty())
      throw std::invalid_argument("corpus_bleu: no hypotheses");
    if (hypotheses.size() != references.size())
      throw std::invalid_argument("corpus_bleu: " + std::to_string(hypotheses.size()) +
                                  " hypotheses vs " + std::to_string(references.size()) +
                                  " references");
    BleuStats total;
    for (size_t i = 0; i < hypotheses.size(); ++i)
      total += bleu_stats(tokenize_13a(hypotheses[i]), tokenize_13a(references[i]));
    return bleu_from_stats(total);
  }

  double sentence_bleu(const std::string& hypothesis, const std::string& reference) {
    const BleuStats stats = bleu_stats(tokenize_13a(hypothesis), tokenize_13a(reference));
    if (stats.hyp_length == 0 || stats.matches[0] == 0)
      return 0.0;
    double log_precision = std::log(static_cast<double>(stats.matches[0]) / stats.totals[0]);
    for (int n = 1; n < 4; ++n)
      log_precision += std::log((stats.matches[n] + 1.0) / (stats.totals[n] + 1.0));
    const double ratio = static_cast<double>(stats.ref_length) / stats.hyp_length;
    const double brevity = std::min(1.0, std::exp(1.0 - ratio));
    return 100.0 * brevity * std::exp(log_precision / 4.0);
  }

}  // namespace seqforge
