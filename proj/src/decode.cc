#include "seqforge/decode.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "json.hpp"
#include "seqforge/tokenizer.h"

namespace seqforge {

  void BeamConfig::validate() const {
    if (beam < 1)
      throw std::invalid_argument("beam size must be >= 1");
    if (max_len < 1)
      throw std::invalid_argument("max length must be >= 1");
  }

  double length_penalized(double logprob, size_t length, double alpha) {
    if (length == 0 || alpha == 0)
      return logprob;
    return logprob / std::pow(static_cast<double>(length), alpha);
  }

  namespace {

    EncoderOutput tile(const EncoderOutput& enc, int64_t n) {
      if (n == 1)
        return enc;
      EncoderOutput out;
      out.states = concat(std::vector<Tensor>(n, enc.states), 0);
      for (int64_t i = 0; i < n; ++i) {
        out.lengths.insert(out.lengths.end(), enc.lengths.begin(), enc.lengths.end());
        out.context_lengths.insert(out.context_lengths.end(), enc.context_lengths.begin(),
                                   enc.context_lengths.end());
      }
      if (enc.context.defined())
        out.context = concat(std::vector<Tensor>(n, enc.context), 0);
      return out;
    }

    std::vector<double> log_softmax_row(std::span<const Real> logits) {
      double top = -std::numeric_limits<double>::infinity();
      for (Real v : logits)
        top = std::max(top, static_cast<double>(v));
      double z = 0;
      for (Real v : logits)
        z += std::exp(static_cast<double>(v) - top);
      const double log_z = top + std::log(z);
      std::vector<double> out(logits.size());
      for (size_t i = 0; i < logits.size(); ++i)
        out[i] = static_cast<double>(logits[i]) - log_z;
      return out;
    }

  }  // namespace

  // --- ModelScorer ------------------------------------------------------------------

  ModelScorer::ModelScorer(const TransformerModel& model,
                           std::vector<int32_t> src,
                           int32_t start_token,
                           std::vector<int32_t> ctx,
                           int wait_k)
    : model_(model), src_(std::move(src)), ctx_(std::move(ctx)), start_(start_token), wait_k_(wait_k) {
    if (src_.empty())
      throw std::invalid_argument("cannot decode an empty source");
    if (wait_k_ < 0)
      throw std::invalid_argument("wait-k must be >= 1");
  }

  int64_t ModelScorer::visible_source(int64_t step) const {
    const int64_t s = static_cast<int64_t>(src_.size());
    if (wait_k_ == 0)
      return s;
    return std::min<int64_t>(wait_k_ + step - 1, s);
  }

  const EncoderOutput& ModelScorer::encoded(int64_t visible) {
    if (visible != cached_visible_) {
      const std::vector<int64_t> len{visible};
      const std::vector<int64_t> ctx_len{static_cast<int64_t>(ctx_.size())};
      cache_ = model_.encode(std::span<const int32_t>(src_.data(), visible), 1, visible, len, ctx_,
                             static_cast<int64_t>(ctx_.size()), ctx_.empty() ? std::span<const int64_t>() : ctx_len);
      cached_visible_ = visible;
    }
    return cache_;
  }

  std::vector<std::vector<double>> ModelScorer::next_log_probs(const std::vector<std::vector<int32_t>>& prefixes) {
    NoGradGuard no_grad;
    const int64_t n = static_cast<int64_t>(prefixes.size());
    if (n == 0)
      return {};
    const int64_t t = static_cast<int64_t>(prefixes[0].size()) + 1;
    std::vector<int32_t> tgt_in;
    tgt_in.reserve(n * t);
    for (const auto& p : prefixes) {
      if (static_cast<int64_t>(p.size()) + 1 != t)
        throw std::invalid_argument("prefixes in one scoring call must have equal length");
      tgt_in.push_back(start_);
      tgt_in.insert(tgt_in.end(), p.begin(), p.end());
    }
    const std::vector<int64_t> tgt_lengths(n, t);
    const int64_t visible = visible_source(t);
    const EncoderOutput enc = tile(encoded(visible), n);
    const int k = wait_k_ > 0 ? wait_k_ : model_.resolve_wait_k(ForwardOptions{});
    ForwardOutput out;
    model_.decode(enc, tgt_in, n, t, tgt_lengths, k, ForwardOptions{}, out);
    const int64_t v = out.logits.dim(2);
    std::vector<std::vector<double>> result;
    result.reserve(n);
    const auto data = out.logits.data();
    for (int64_t i = 0; i < n; ++i)
      result.push_back(log_softmax_row(data.subspan((i * t + t - 1) * v, v)));
    return result;
  }

  // --- search ------------------------------------------------------------------------

  Hypothesis greedy_decode(StepScorer& scorer, int max_len) {
    if (max_len < 1)
      throw std::invalid_argument("max length must be >= 1");
    Hypothesis hyp;
    for (int step = 0; step < max_len; ++step) {
      const auto lp = scorer.next_log_probs({hyp.tokens})[0];
      int32_t best = -1;
      for (int32_t v = 0; v < static_cast<int32_t>(lp.size()); ++v) {
        if (v == Vocabulary::kPad || !std::isfinite(lp[v]))
          continue;
        if (best < 0 || lp[v] > lp[best])
          best = v;
      }
      if (best < 0)
        break;
      hyp.tokens.push_back(best);
      hyp.logprob += lp[best];
      if (best == Vocabulary::kEos) {
        hyp.finished = true;
        break;
      }
    }
    hyp.score = hyp.logprob;
    return hyp;
  }

  std::vector<Hypothesis> beam_search(StepScorer& scorer, const BeamConfig& cfg) {
    cfg.validate();
    const auto by_score = [](const Hypothesis& a, const Hypothesis& b) { return a.score > b.score; };
    struct Candidate {
      double total;
      double step_lp;
      size_t hyp;
      int32_t token;
    };

    std::vector<Hypothesis> alive(1), finished;
    for (int step = 1; step <= cfg.max_len; ++step) {
      std::vector<std::vector<int32_t>> prefixes;
      for (const auto& h : alive)
        prefixes.push_back(h.tokens);
      const auto lps = scorer.next_log_probs(prefixes);

      std::vector<Candidate> cands;
      for (size_t h = 0; h < alive.size(); ++h)
        for (int32_t v = 0; v < static_cast<int32_t>(lps[h].size()); ++v)
          if (v != Vocabulary::kPad && std::isfinite(lps[h][v]))
            cands.push_back({alive[h].logprob + lps[h][v], lps[h][v], h, v});
      std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
        if (a.total != b.total)
          return a.total > b.total;
        if (a.step_lp != b.step_lp)
          return a.step_lp > b.step_lp;
        if (a.hyp != b.hyp)
          return a.hyp < b.hyp;
        return a.token < b.token;
      });

      // An end-of-sentence candidate is kept only if it ranks inside the top
      // `beam` candidates; the next alive set is the best `beam` others.
      std::vector<Hypothesis> next;
      for (size_t r = 0; r < cands.size(); ++r) {
        const auto& c = cands[r];
        if (c.token == Vocabulary::kEos) {
          if (r < static_cast<size_t>(cfg.beam)) {
            Hypothesis done = alive[c.hyp];
            done.tokens.push_back(c.token);
            done.logprob = c.total;
            done.finished = true;
            done.score = length_penalized(done.logprob, done.tokens.size(), cfg.length_penalty);
            finished.push_back(std::move(done));
          }
        } else if (static_cast<int>(next.size()) < cfg.beam) {
          Hypothesis grown = alive[c.hyp];
          grown.tokens.push_back(c.token);
          grown.logprob = c.total;
          grown.score = length_penalized(grown.logprob, grown.tokens.size(), cfg.length_penalty);
          next.push_back(std::move(grown));
        }
        if (static_cast<int>(next.size()) == cfg.beam && r + 1 >= static_cast<size_t>(cfg.beam))
          break;
      }
      alive = std::move(next);

      if (step == cfg.max_len)
        finished.insert(finished.end(), alive.begin(), alive.end());
      std::stable_sort(finished.begin(), finished.end(), by_score);
      if (static_cast<int>(finished.size()) > cfg.beam)
        finished.resize(cfg.beam);
      if (alive.empty() || step == cfg.max_len)
        break;
      // A full finished set ends the search. Extending the alive set past this
      // point could only matter under a positive length penalty and would break
      // the beam-of-one equals greedy guarantee.
      if (static_cast<int>(finished.size()) == cfg.beam)
        break;
    }
    return finished;
  }

  Hypothesis greedy_decode(const TransformerModel& model,
                           std::span<const int32_t> src,
                           int32_t start_token,
                           int max_len,
                           std::span<const int32_t> ctx) {
    ModelScorer scorer(model, {src.begin(), src.end()}, start_token, {ctx.begin(), ctx.end()});
    return greedy_decode(scorer, max_len);
  }

  std::vector<Hypothesis> beam_search(const TransformerModel& model,
                                      std::span<const int32_t> src,
                                      int32_t start_token,
                                      const BeamConfig& cfg,
                                      std::span<const int32_t> ctx) {
    ModelScorer scorer(model, {src.begin(), src.end()}, start_token, {ctx.begin(), ctx.end()});
    return beam_search(scorer, cfg);
  }

  Hypothesis wait_k_decode(const TransformerModel& model,
                           std::span<const int32_t> src,
                           int32_t start_token,
                           int k,
                           int max_len) {
    if (k < 1)
      throw std::invalid_argument("wait-k decoding needs k >= 1");
    ModelScorer scorer(model, {src.begin(), src.end()}, start_token, {}, k);
    return greedy_decode(scorer, max_len);
  }

  std::vector<double> score_pairs(const TransformerModel& model,
                                  const std::vector<std::vector<int32_t>>& srcs,
                                  int32_t start_token,
                                  const std::vector<std::vector<int32_t>>& tgts,
                                  bool per_token) {
    if (srcs.size() != tgts.size())
      throw std::invalid_argument("score_pairs: source and target counts differ");
    std::vector<Example> examples;
    for (size_t i = 0; i < srcs.size(); ++i) {
      if (tgts[i].empty())
        throw std::invalid_argument("score_pair: empty target");
      Example ex;
      ex.src = srcs[i];
      ex.tgt_in.push_back(start_token);
      ex.tgt_in.insert(ex.tgt_in.end(), tgts[i].begin(), tgts[i].end() - 1);
      ex.tgt_out = tgts[i];
      examples.push_back(std::move(ex));
    }
    if (examples.empty())
      return {};
    NoGradGuard no_grad;
    const Batch batch = collate(examples);
    const Tensor logits = model.forward(batch).logits;
    const int64_t t = batch.tgt_len, v = logits.dim(2);
    std::vector<double> scores;
    for (int64_t b = 0; b < batch.batch_size; ++b) {
      double total = 0;
      for (int64_t i = 0; i < batch.tgt_lengths[b]; ++i) {
        const auto row = log_softmax_row(logits.data().subspan((b * t + i) * v, v));
        total += row[batch.tgt_out[b * t + i]];
      }
      scores.push_back(per_token ? total / batch.tgt_lengths[b] : total);
    }
    return scores;
  }

  double score_pair(const TransformerModel& model,
                    std::span<const int32_t> src,
                    int32_t start_token,
                    std::span<const int32_t> tgt,
                    bool per_token,
                    std::span<const int32_t> ctx) {
    if (ctx.empty())
      return score_pairs(model, {{src.begin(), src.end()}}, start_token, {{tgt.begin(), tgt.end()}}, per_token)[0];
    if (tgt.empty())
      throw std::invalid_argument("score_pair: empty target");
    Example ex;
    ex.src.assign(src.begin(), src.end());
    ex.ctx.assign(ctx.begin(), ctx.end());
    ex.tgt_in.push_back(start_token);
    ex.tgt_in.insert(ex.tgt_in.end(), tgt.begin(), tgt.end() - 1);
    ex.tgt_out.assign(tgt.begin(), tgt.end());
    NoGradGuard no_grad;
    const Batch batch = collate(std::vector<Example>{ex});
    const Tensor logits = model.forward(batch).logits;
    const int64_t v = logits.dim(2);
    double total = 0;
    for (size_t i = 0; i < tgt.size(); ++i)
      total += log_softmax_row(logits.data().subspan(i * v, v))[tgt[i]];
    return per_token ? total / static_cast<double>(tgt.size()) : total;
  }

  std::vector<Hypothesis> masked_input_decode(const TransformerModel& model,
                                              std::span<const int32_t> subwords,
                                              const std::vector<Span>& spans,
                                              int32_t tag,
                                              const BeamConfig& cfg) {
    const auto masked = apply_spans(subwords, spans, Vocabulary::kMask);
    const auto src = encoder_input(masked, tag);
    return beam_search(model, src, tag, cfg);
  }

  std::vector<Span> parse_spans(const std::string& text) {
    std::vector<Span> spans;
    size_t pos = 0;
    while (pos < text.size()) {
      size_t end = text.find(',', pos);
      if (end == std::string::npos)
        end = text.size();
      const std::string item = text.substr(pos, end - pos);
      const size_t colon = item.find(':');
      if (colon == std::string::npos)
        throw std::invalid_argument("span must look like i:j, got '" + item + "'");
      const int64_t i = std::stoll(item.substr(0, colon));
      const int64_t j = std::stoll(item.substr(colon + 1));
      if (i < 0 || j <= i)
        throw std::invalid_argument("span i:j needs 0 <= i < j, got '" + item + "'");
      spans.push_back({i, j - i});
      pos = end + 1;
    }
    return spans;
  }

  // --- extraction -------------------------------------------------------------------

  std::string ExtractRecord::to_json_line() const {
    nlohmann::json j;
    j["sentence_index"] = sentence_index;
    j["kind"] = kind;
    j["layer"] = layer;
    j["head"] = head < 0 ? nlohmann::json(nullptr) : nlohmann::json(head);
    j["shape"] = shape;
    auto& vals = j["values"] = nlohmann::json::array();
    for (Real v : values)
      vals.push_back(static_cast<double>(v));
    return j.dump();
  }

  ExtractRecord ExtractRecord::from_json_line(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    ExtractRecord r;
    r.sentence_index = j.at("sentence_index");
    r.kind = j.at("kind");
    r.layer = j.at("layer");
    r.head = j.at("head").is_null() ? -1 : j.at("head").get<int>();
    r.shape = j.at("shape").get<Shape>();
    for (const auto& v : j.at("values"))
      r.values.push_back(static_cast<Real>(v.get<double>()));
    return r;
  }

  std::vector<ExtractRecord> extract(const TransformerModel& model,
                                     std::span<const int32_t> src,
                                     std::span<const int32_t> tgt_in,
                                     const std::vector<std::string>& kinds,
                                     const std::vector<int>& layers,
                                     int64_t sentence_index) {
    static const std::vector<std::string> known{"enc", "dec", "enc_self_attn", "dec_self_attn", "dec_cross_attn"};
    for (const auto& k : kinds)
      if (std::find(known.begin(), known.end(), k) == known.end())
        throw std::invalid_argument("unknown extraction kind: " + k);
    Example ex;
    ex.src.assign(src.begin(), src.end());
    ex.tgt_in.assign(tgt_in.begin(), tgt_in.end());
    ex.tgt_out.assign(tgt_in.size(), Vocabulary::kPad);
    NoGradGuard no_grad;
    const ForwardOutput out = model.forward(collate(std::vector<Example>{ex}));

    const int64_t s = static_cast<int64_t>(src.size()), t = static_cast<int64_t>(tgt_in.size());
    const int64_t h = model.config().hidden, heads = model.config().heads;
    std::vector<ExtractRecord> records;
    auto selected = [&](int layer, int count) {
      if (layer > count)
        return false;
      return layers.empty() || std::find(layers.begin(), layers.end(), layer) != layers.end();
    };
    for (int layer : layers) {
      const int limit = std::max(model.config().enc_layers, model.config().dec_layers);
      if (layer < 1 || layer > limit)
        throw std::invalid_argument("layer " + std::to_string(layer) + " out of range");
    }
    auto emit = [&](const std::string& kind, int layer, int head, Shape shape, std::span<const Real> values) {
      ExtractRecord r;
      r.sentence_index = sentence_index;
      r.kind = kind;
      r.layer = layer;
      r.head = head;
      r.shape = std::move(shape);
      r.values.assign(values.begin(), values.end());
      records.push_back(std::move(r));
    };
    for (const auto& kind : kinds) {
      const bool encoder_side = kind.rfind("enc", 0) == 0;
      const int count = encoder_side ? model.config().enc_layers : model.config().dec_layers;
      for (int layer = 1; layer <= count; ++layer) {
        if (!selected(layer, count))
          continue;
        if (kind == "enc") {
          emit(kind, layer, -1, {s, h}, out.encoder_states[layer - 1].data());
        } else if (kind == "dec") {
          emit(kind, layer, -1, {t, h}, out.decoder_states[layer - 1].data());
        } else {
          const Tensor& attn = kind == "enc_self_attn"   ? out.encoder_self_attn[layer - 1]
                               : kind == "dec_self_attn" ? out.decoder_self_attn[layer - 1]
                                                         : out.decoder_cross_attn[layer - 1];
          const int64_t rows = attn.dim(2), cols = attn.dim(3);
          for (int64_t hd = 0; hd < heads; ++hd)
            emit(kind, layer, static_cast<int>(hd), {rows, cols}, attn.data().subspan(hd * rows * cols, rows * cols));
        }
      }
    }
    return records;
  }

}  // namespace seqforge
