#include "seqforge/corpus.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "seqforge/tokenizer.h"

namespace seqforge {

  void NoiseConfig::validate() const {
    if (!(mask_fraction >= 0 && mask_fraction <= 1))
      throw std::invalid_argument("mask_fraction must be in [0, 1]");
    if (!(span_lambda > 0))
      throw std::invalid_argument("span_lambda must be positive");
  }

  int64_t Batch::target_tokens() const {
    int64_t n = 0;
    for (int64_t len : tgt_lengths)
      n += len;
    return n;
  }

  Batch collate(std::span<const Example> examples, std::span<const int64_t> ids) {
    Batch batch;
    batch.batch_size = static_cast<int64_t>(examples.size());
    for (const auto& ex : examples) {
      if (ex.tgt_in.size() != ex.tgt_out.size())
        throw std::invalid_argument("collate: tgt_in and tgt_out lengths differ");
      batch.src_len = std::max<int64_t>(batch.src_len, ex.src.size());
      batch.tgt_len = std::max<int64_t>(batch.tgt_len, ex.tgt_in.size());
      batch.ctx_len = std::max<int64_t>(batch.ctx_len, ex.ctx.size());
    }
    const int64_t b = batch.batch_size;
    batch.src.assign(b * batch.src_len, Vocabulary::kPad);
    batch.tgt_in.assign(b * batch.tgt_len, Vocabulary::kPad);
    batch.tgt_out.assign(b * batch.tgt_len, Vocabulary::kPad);
    batch.ctx.assign(b * batch.ctx_len, Vocabulary::kPad);
    for (int64_t i = 0; i < b; ++i) {
      const auto& ex = examples[i];
      std::copy(ex.src.begin(), ex.src.end(), batch.src.begin() + i * batch.src_len);
      std::copy(ex.tgt_in.begin(), ex.tgt_in.end(), batch.tgt_in.begin() + i * batch.tgt_len);
      std::copy(ex.tgt_out.begin(), ex.tgt_out.end(), batch.tgt_out.begin() + i * batch.tgt_len);
      std::copy(ex.ctx.begin(), ex.ctx.end(), batch.ctx.begin() + i * batch.ctx_len);
      batch.src_lengths.push_back(static_cast<int64_t>(ex.src.size()));
      batch.tgt_lengths.push_back(static_cast<int64_t>(ex.tgt_in.size()));
      batch.ctx_lengths.push_back(static_cast<int64_t>(ex.ctx.size()));
      batch.example_ids.push_back(ids.empty() ? i : ids[i]);
    }
    batch.token_count = b * std::max(batch.src_len, batch.tgt_len);
    return batch;
  }

  std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in)
      throw std::runtime_error("cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r')
        line.pop_back();
      lines.push_back(std::move(line));
    }
    return lines;
  }

  std::vector<std::vector<std::string>> read_documents(const std::string& path) {
    std::vector<std::vector<std::string>> documents(1);
    for (auto& line : read_lines(path)) {
      if (split_whitespace(line).empty()) {
        if (!documents.back().empty())
          documents.emplace_back();
      } else {
        documents.back().push_back(std::move(line));
      }
    }
    if (documents.back().empty())
      documents.pop_back();
    return documents;
  }

  std::vector<std::string> shard(const std::vector<std::string>& lines, int num_workers, int worker_id) {
    if (num_workers < 1 || worker_id < 0 || worker_id >= num_workers)
      throw std::invalid_argument("shard: need 0 <= worker_id < num_workers");
    std::vector<std::string> out;
    for (size_t i = worker_id; i < lines.size(); i += num_workers)
      out.push_back(lines[i]);
    return out;
  }

  std::vector<std::string> shard_file(const std::string& path, int num_workers, int worker_id) {
    return shard(read_lines(path), num_workers, worker_id);
  }

  std::vector<int32_t> apply_spans(std::span<const int32_t> tokens, std::vector<Span> spans, int32_t mask_id) {
    std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) { return a.start < b.start; });
    std::vector<int32_t> out;
    int64_t pos = 0;
    const int64_t n = static_cast<int64_t>(tokens.size());
    for (const auto& span : spans) {
      if (span.length < 1 || span.start < pos || span.start + span.length > n)
        throw std::out_of_range("apply_spans: invalid or overlapping span");
      out.insert(out.end(), tokens.begin() + pos, tokens.begin() + span.start);
      out.push_back(mask_id);
      pos = span.start + span.length;
    }
    out.insert(out.end(), tokens.begin() + pos, tokens.end());
    return out;
  }

  InfillResult infill(std::span<const int32_t> tokens,
                      const NoiseConfig& cfg,
                      Rng& rng,
                      std::span<const int32_t> special_ids) {
    cfg.validate();
    const int64_t n = static_cast<int64_t>(tokens.size());
    std::vector<bool> available(n);
    for (int64_t i = 0; i < n; ++i)
      available[i] = std::find(special_ids.begin(), special_ids.end(), tokens[i]) == special_ids.end();

    InfillResult result;
    const double target = cfg.mask_fraction * static_cast<double>(n);
    std::vector<int64_t> candidates;
    while (static_cast<double>(result.consumed) < target) {
      candidates.clear();
      for (int64_t i = 0; i < n; ++i)
        if (available[i])
          candidates.push_back(i);
      if (candidates.empty())
        break;
      const int64_t remaining = static_cast<int64_t>(std::ceil(target - static_cast<double>(result.consumed) - 1e-9));
      const int64_t want = std::clamp<int64_t>(rng.poisson(cfg.span_lambda), 1, std::max<int64_t>(remaining, 1));
      const int64_t start = candidates[rng.uniform_int(static_cast<int64_t>(candidates.size()))];
      int64_t length = 0;
      while (length < want && start + length < n && available[start + length]) {
        available[start + length] = false;
        ++length;
      }
      result.spans.push_back({start, length});
      result.consumed += length;
    }
    result.tokens = apply_spans(tokens, result.spans, cfg.mask_id);
    return result;
  }

  std::vector<double> language_sample_probs(const SamplerConfig& cfg) {
    if (!(cfg.temperature >= 1))
      throw std::invalid_argument("sampling temperature must be >= 1");
    if (cfg.sizes.empty())
      throw std::invalid_argument("no corpus sizes given");
    double total = 0;
    for (int64_t size : cfg.sizes) {
      if (size <= 0)
        throw std::invalid_argument("corpus sizes must be positive");
      total += static_cast<double>(size);
    }
    std::vector<double> probs;
    double norm = 0;
    for (int64_t size : cfg.sizes) {
      probs.push_back(std::pow(static_cast<double>(size) / total, 1.0 / cfg.temperature));
      norm += probs.back();
    }
    for (double& p : probs)
      p /= norm;
    return probs;
  }

  size_t sample_index(std::span<const double> probs, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0;
    for (size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc)
        return i;
    }
    return probs.size() - 1;
  }

  std::vector<Batch> make_batches(std::span<const Example> examples,
                                  int64_t token_budget,
                                  BatchingReport* report) {
    if (token_budget < 1)
      throw std::invalid_argument("token budget must be positive");
    auto longest = [&](int64_t i) {
      return static_cast<int64_t>(std::max(examples[i].src.size(), examples[i].tgt_in.size()));
    };
    std::vector<int64_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int64_t a, int64_t b) { return longest(a) < longest(b); });

    std::vector<Batch> batches;
    std::vector<Example> pending;
    std::vector<int64_t> pending_ids;
    int64_t pending_max = 0;
    int64_t skipped = 0;
    auto flush = [&]() {
      if (pending.empty())
        return;
      batches.push_back(collate(pending, pending_ids));
      pending.clear();
      pending_ids.clear();
      pending_max = 0;
    };
    for (int64_t i : order) {
      const int64_t len = longest(i);
      if (len > token_budget) {
        ++skipped;
        continue;
      }
      const int64_t new_max = std::max(pending_max, len);
      if (static_cast<int64_t>(pending.size() + 1) * new_max > token_budget)
        flush();
      pending.push_back(examples[i]);
      pending_ids.push_back(i);
      pending_max = std::max(pending_max, len);
    }
    flush();
    if (report)
      report->skipped += skipped;
    return batches;
  }

  Example make_translation_example(std::span<const int32_t> src_subwords,
                                   std::span<const int32_t> tgt_subwords,
                                   int32_t src_tag,
                                   int32_t tgt_tag,
                                   std::span<const int32_t> ctx_subwords) {
    Example ex;
    ex.src = encoder_input(src_subwords, src_tag);
    ex.tgt_in = decoder_input(tgt_subwords, tgt_tag);
    ex.tgt_out = decoder_target(tgt_subwords);
    if (!ctx_subwords.empty())
      ex.ctx = encoder_input(ctx_subwords, src_tag);
    return ex;
  }

  Example build_denoising_example(std::span<const int32_t> sentence,
                                  int32_t lang_tag,
                                  const NoiseConfig& cfg,
                                  Rng& rng,
                                  std::span<const int32_t> special_ids) {
    const auto noised = infill(sentence, cfg, rng, special_ids);
    Example ex;
    ex.src = encoder_input(noised.tokens, lang_tag);
    ex.tgt_in = decoder_input(sentence, lang_tag);
    ex.tgt_out = decoder_target(sentence);
    return ex;
  }

  Example build_document_denoising_example(const std::vector<std::vector<int32_t>>& sentences,
                                           int32_t lang_tag,
                                           const NoiseConfig& cfg,
                                           Rng& rng,
                                           std::span<const int32_t> special_ids) {
    if (sentences.empty())
      throw std::invalid_argument("document has no sentences");
    auto order = sentences;
    if (cfg.permute_sentences && order.size() > 1)
      order = permute_sentences(std::move(order), rng);
    std::vector<int32_t> shuffled, clean;
    for (const auto& s : order)
      shuffled.insert(shuffled.end(), s.begin(), s.end());
    for (const auto& s : sentences)
      clean.insert(clean.end(), s.begin(), s.end());
    const auto noised = infill(shuffled, cfg, rng, special_ids);
    Example ex;
    ex.src = encoder_input(noised.tokens, lang_tag);
    ex.tgt_in = decoder_input(clean, lang_tag);
    ex.tgt_out = decoder_target(clean);
    return ex;
  }

}  // namespace seqforge
