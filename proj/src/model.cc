#include "seqforge/model.h"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "json.hpp"

namespace seqforge {

  namespace {

    constexpr Real kNegInf = -std::numeric_limits<Real>::infinity();

    const char* const kProjections[] = {"q", "k", "v", "o"};

    bool ends_with(const std::string& text, const std::string& suffix) {
      return text.size() >= suffix.size() &&
             text.compare(text.size() - suffix.size(), suffix.size(), suffix) == 0;
    }

    // [B, 1, Tq, Tk] additive mask from key lengths and an optional [Tq, Tk]
    // structural mask.
    Tensor attention_mask(int64_t batch,
                          int64_t tq,
                          int64_t tk,
                          std::span<const int64_t> key_lengths,
                          const Tensor& structural) {
      std::vector<Real> mask(batch * tq * tk, Real(0));
      const auto sd = structural.data();
      for (int64_t b = 0; b < batch; ++b) {
        const int64_t valid = key_lengths.empty() ? tk : key_lengths[b];
        for (int64_t i = 0; i < tq; ++i) {
          Real* row = mask.data() + (b * tq + i) * tk;
          for (int64_t j = 0; j < tk; ++j) {
            if (j >= valid || (structural.defined() && std::isinf(sd[i * tk + j])))
              row[j] = kNegInf;
          }
        }
      }
      return Tensor({batch, 1, tq, tk}, std::move(mask));
    }

    struct AttentionResult {
      Tensor out;
      Tensor probs;
    };

    AttentionResult attention(const ParameterStore& p,
                              const std::string& prefix,
                              const Tensor& query_in,
                              const Tensor& kv_in,
                              const Tensor& mask,
                              int heads) {
      const int64_t b = query_in.dim(0), tq = query_in.dim(1), tk = kv_in.dim(1);
      const int64_t hidden = query_in.dim(2);
      const int64_t dh = hidden / heads;

      auto project = [&](const Tensor& x, const char* name, int64_t len, bool biased) {
        Tensor y = linear(x, p.get(prefix + "." + name + ".weight"),
                          biased ? p.get(prefix + "." + name + ".bias") : Tensor());
        y = permute(reshape(y, {b, len, heads, dh}), {0, 2, 1, 3});
        return reshape(y, {b * heads, len, dh});
      };
      Tensor q = project(query_in, "q", tq, true);
      Tensor k = project(kv_in, "k", tk, false);
      Tensor v = project(kv_in, "v", tk, true);

      Tensor scores = scale(bmm(q, k, /*transpose_b=*/true), Real(1) / std::sqrt(static_cast<Real>(dh)));
      Tensor probs = masked_softmax(reshape(scores, {b, heads, tq, tk}), mask);
      Tensor ctx = bmm(reshape(probs, {b * heads, tq, tk}), v);
      ctx = reshape(permute(reshape(ctx, {b, heads, tq, dh}), {0, 2, 1, 3}), {b, tq, hidden});
      Tensor out = linear(ctx, p.get(prefix + ".o.weight"), p.get(prefix + ".o.bias"));
      return {out, probs};
    }

    Tensor norm(const ParameterStore& p, const std::string& prefix, const Tensor& x, Real eps) {
      return layer_norm(x, p.get(prefix + ".gain"), p.get(prefix + ".bias"), eps);
    }

    Tensor feed_forward(const ParameterStore& p, const std::string& prefix, const Tensor& x) {
      Tensor h = gelu(linear(x, p.get(prefix + ".fc1.weight"), p.get(prefix + ".fc1.bias")));
      return linear(h, p.get(prefix + ".fc2.weight"), p.get(prefix + ".fc2.bias"));
    }

  }  // namespace

  std::string to_string(WaitKMode mode) {
    switch (mode) {
    case WaitKMode::Off: return "off";
    case WaitKMode::Fixed: return "fixed";
    case WaitKMode::Sampled: return "sampled";
    }
    return "off";
  }

  std::string to_string(ContextMode mode) {
    switch (mode) {
    case ContextMode::None: return "none";
    case ContextMode::DecoderCombination: return "decoder_combination";
    case ContextMode::EncoderGate: return "encoder_gate";
    }
    return "none";
  }

  std::string to_string(Positional mode) {
    return mode == Positional::Learned ? "learned" : "sinusoidal";
  }

  WaitKMode parse_wait_k_mode(const std::string& text) {
    if (text == "off") return WaitKMode::Off;
    if (text == "fixed") return WaitKMode::Fixed;
    if (text == "sampled") return WaitKMode::Sampled;
    throw ConfigError("unknown wait-k mode: " + text);
  }

  ContextMode parse_context_mode(const std::string& text) {
    if (text == "none") return ContextMode::None;
    if (text == "decoder_combination") return ContextMode::DecoderCombination;
    if (text == "encoder_gate") return ContextMode::EncoderGate;
    throw ConfigError("unknown context mode: " + text);
  }

  Positional parse_positional(const std::string& text) {
    if (text == "sinusoidal") return Positional::Sinusoidal;
    if (text == "learned") return Positional::Learned;
    throw ConfigError("unknown positional encoding: " + text);
  }

  void ModelConfig::validate() const {
    if (enc_layers < 1 || dec_layers < 1)
      throw ConfigError("layer counts must be positive");
    if (unique_enc_layers < 1 || enc_layers % unique_enc_layers != 0)
      throw ConfigError("enc_layers must be a multiple of unique_enc_layers");
    if (unique_dec_layers < 1 || dec_layers % unique_dec_layers != 0)
      throw ConfigError("dec_layers must be a multiple of unique_dec_layers");
    if (hidden < 1 || heads < 1 || hidden % heads != 0)
      throw ConfigError("hidden must be a positive multiple of heads");
    if (ffn < 1 || vocab_size < 1 || max_positions < 1)
      throw ConfigError("ffn, vocab_size and max_positions must be positive");
    if (!(dropout >= 0 && dropout < 1))
      throw ConfigError("dropout must be in [0, 1)");
    if (wait_k_mode == WaitKMode::Fixed && wait_k < 1)
      throw ConfigError("fixed wait-k needs k >= 1");
    if (wait_k_mode == WaitKMode::Sampled) {
      if (wait_k_set.empty())
        throw ConfigError("sampled wait-k needs a non-empty set of k values");
      for (int k : wait_k_set)
        if (k < 1)
          throw ConfigError("wait-k values must be >= 1");
    }
  }

  std::string ModelConfig::to_json() const {
    nlohmann::json j = {
      {"enc_layers", enc_layers},
      {"dec_layers", dec_layers},
      {"unique_enc_layers", unique_enc_layers},
      {"unique_dec_layers", unique_dec_layers},
      {"hidden", hidden},
      {"ffn", ffn},
      {"heads", heads},
      {"vocab_size", vocab_size},
      {"dropout", dropout},
      {"multi_layer_softmax", multi_layer_softmax},
      {"unidirectional_encoder", unidirectional_encoder},
      {"wait_k_mode", to_string(wait_k_mode)},
      {"wait_k", wait_k},
      {"wait_k_set", wait_k_set},
      {"context_mode", to_string(context_mode)},
      {"tie_embeddings", tie_embeddings},
      {"positional", to_string(positional)},
      {"max_positions", max_positions},
      {"layer_norm_eps", layer_norm_eps},
    };
    return j.dump();
  }

  ModelConfig ModelConfig::from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    ModelConfig cfg;
    cfg.enc_layers = j.at("enc_layers");
    cfg.dec_layers = j.at("dec_layers");
    cfg.unique_enc_layers = j.at("unique_enc_layers");
    cfg.unique_dec_layers = j.at("unique_dec_layers");
    cfg.hidden = j.at("hidden");
    cfg.ffn = j.at("ffn");
    cfg.heads = j.at("heads");
    cfg.vocab_size = j.at("vocab_size");
    cfg.dropout = j.at("dropout");
    cfg.multi_layer_softmax = j.at("multi_layer_softmax");
    cfg.unidirectional_encoder = j.at("unidirectional_encoder");
    cfg.wait_k_mode = parse_wait_k_mode(j.at("wait_k_mode"));
    cfg.wait_k = j.at("wait_k");
    cfg.wait_k_set = j.at("wait_k_set").get<std::vector<int>>();
    cfg.context_mode = parse_context_mode(j.at("context_mode"));
    cfg.tie_embeddings = j.at("tie_embeddings");
    cfg.positional = parse_positional(j.at("positional"));
    cfg.max_positions = j.at("max_positions");
    cfg.layer_norm_eps = j.at("layer_norm_eps");
    cfg.validate();
    return cfg;
  }

  // --- ParameterStore -----------------------------------------------------------

  Tensor& ParameterStore::add(const std::string& name, Tensor value) {
    if (contains(name))
      throw std::invalid_argument("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(value));
    return entries_.back().second;
  }

  Tensor& ParameterStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].second;
  }

  const Tensor& ParameterStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].second;
  }

  int64_t ParameterStore::total_elements() const {
    int64_t n = 0;
    for (const auto& [name, t] : entries_)
      n += t.numel();
    return n;
  }

  std::vector<std::string> ParameterStore::names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : entries_)
      out.push_back(name);
    return out;
  }

  void ParameterStore::zero_grad() {
    for (auto& [name, t] : entries_)
      t.zero_grad();
  }

  // --- Masks ----------------------------------------------------------------------

  Tensor build_wait_k_cross_mask(int k, int64_t src_len, int64_t tgt_len) {
    if (k < 1)
      throw std::invalid_argument("wait-k requires k >= 1");
    std::vector<Real> mask(tgt_len * src_len, Real(0));
    for (int64_t t = 0; t < tgt_len; ++t) {
      const int64_t visible = std::min<int64_t>(k + t, src_len);
      for (int64_t s = visible; s < src_len; ++s)
        mask[t * src_len + s] = kNegInf;
    }
    return Tensor({tgt_len, src_len}, std::move(mask));
  }

  Tensor build_causal_mask(int64_t len) {
    std::vector<Real> mask(len * len, Real(0));
    for (int64_t i = 0; i < len; ++i)
      for (int64_t j = i + 1; j < len; ++j)
        mask[i * len + j] = kNegInf;
    return Tensor({len, len}, std::move(mask));
  }

  Tensor build_unidirectional_encoder_mask(int64_t len) {
    return build_causal_mask(len);
  }

  Tensor sinusoidal_positions(int64_t len, int64_t hidden) {
    std::vector<Real> pe(len * hidden);
    for (int64_t pos = 0; pos < len; ++pos) {
      for (int64_t i = 0; i < hidden; i += 2) {
        const double angle = pos / std::pow(10000.0, static_cast<double>(i) / hidden);
        pe[pos * hidden + i] = static_cast<Real>(std::sin(angle));
        if (i + 1 < hidden)
          pe[pos * hidden + i + 1] = static_cast<Real>(std::cos(angle));
      }
    }
    return Tensor({len, hidden}, std::move(pe));
  }

  Tensor gated_blend(const Tensor& sentence_context,
                     const Tensor& other_context,
                     const Tensor& gate_weight,
                     const Tensor& gate_bias,
                     Tensor* gate_out) {
    Tensor gate = sigmoid(linear(concat({sentence_context, other_context}, -1), gate_weight, gate_bias));
    if (gate_out)
      *gate_out = gate;
    Tensor rest = sub(Tensor::scalar(Real(1)), gate);
    return add(mul(gate, sentence_context), mul(rest, other_context));
  }

  // --- TransformerModel ------------------------------------------------------------

  std::string TransformerModel::layer_prefix(const std::string& stack, int layer) {
    return stack + ".layer." + std::to_string(layer);
  }

  TransformerModel::TransformerModel(ModelConfig cfg, Rng& rng)
    : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_parameters(rng);
  }

  Tensor TransformerModel::init_parameter(const std::string& name, const Shape& shape, Rng& rng) const {
    const int64_t n = numel(shape);
    std::vector<Real> values(n, Real(0));
    if (ends_with(name, ".gain")) {
      std::fill(values.begin(), values.end(), Real(1));
    } else if (ends_with(name, ".bias")) {
      // zeros
    } else {
      for (auto& v : values)
        v = static_cast<Real>(0.02 * rng.normal());
    }
    return Tensor(shape, std::move(values), true);
  }

  void TransformerModel::build_parameters(Rng& rng) {
    const int64_t h = cfg_.hidden, f = cfg_.ffn, v = cfg_.vocab_size;
    auto add = [&](const std::string& name, Shape shape) {
      params_.add(name, init_parameter(name, shape, rng));
    };
    auto add_attention = [&](const std::string& prefix) {
      // No key bias: it shifts every score of a row equally, so softmax
      // ignores it and its exact gradient is zero.
      for (const char* proj : kProjections) {
        add(prefix + "." + proj + ".weight", {h, h});
        if (std::string(proj) != "k")
          add(prefix + "." + proj + ".bias", {h});
      }
    };
    auto add_norm = [&](const std::string& prefix) {
      add(prefix + ".gain", {h});
      add(prefix + ".bias", {h});
    };
    auto add_ffn = [&](const std::string& prefix) {
      add(prefix + ".fc1.weight", {h, f});
      add(prefix + ".fc1.bias", {f});
      add(prefix + ".fc2.weight", {f, h});
      add(prefix + ".fc2.bias", {h});
    };
    auto add_gate = [&](const std::string& prefix) {
      add(prefix + ".weight", {2 * h, 1});
      add(prefix + ".bias", {1});
    };

    add("embed.tokens", {v, h});
    if (cfg_.positional == Positional::Learned)
      add("embed.positions", {cfg_.max_positions, h});

    for (int u = 1; u <= cfg_.unique_enc_layers; ++u) {
      const std::string p = layer_prefix("encoder", u);
      add_attention(p + ".self_attn");
      add_norm(p + ".self_attn_norm");
      if (cfg_.context_mode == ContextMode::EncoderGate) {
        add_attention(p + ".ctx_attn");
        add_gate(p + ".ctx_gate");
      }
      add_ffn(p + ".ffn");
      add_norm(p + ".ffn_norm");
    }
    add_norm("encoder.final_norm");

    for (int u = 1; u <= cfg_.unique_dec_layers; ++u) {
      const std::string p = layer_prefix("decoder", u);
      add_attention(p + ".self_attn");
      add_norm(p + ".self_attn_norm");
      add_attention(p + ".cross_attn");
      add_norm(p + ".cross_attn_norm");
      if (cfg_.context_mode == ContextMode::DecoderCombination) {
        add_attention(p + ".ctx_attn");
        add_gate(p + ".ctx_gate");
      }
      add_ffn(p + ".ffn");
      add_norm(p + ".ffn_norm");
    }
    add_norm("decoder.final_norm");

    if (!cfg_.tie_embeddings)
      add("output.weight", {h, v});
    add("output.bias", {v});
  }

  std::vector<std::string> TransformerModel::layer_parameter_names(const std::string& stack, int layer) const {
    const std::string prefix = layer_prefix(stack, layer) + ".";
    std::vector<std::string> names;
    for (const auto& [name, t] : params_)
      if (name.compare(0, prefix.size(), prefix) == 0)
        names.push_back(name);
    return names;
  }

  int64_t TransformerModel::layer_parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_)
      if (name.rfind("encoder.layer.", 0) == 0 || name.rfind("decoder.layer.", 0) == 0)
        n += t.numel();
    return n;
  }

  int64_t expected_layer_parameter_count(const ModelConfig& cfg) {
    const int64_t h = cfg.hidden, f = cfg.ffn;
    const int64_t attn = 4 * h * h + 3 * h;
    const int64_t norm = 2 * h;
    const int64_t ffn = h * f + f + f * h + h;
    const int64_t gate = attn + 2 * h + 1;
    int64_t enc = attn + ffn + 2 * norm;
    int64_t dec = 2 * attn + ffn + 3 * norm;
    if (cfg.context_mode == ContextMode::EncoderGate)
      enc += gate;
    if (cfg.context_mode == ContextMode::DecoderCombination)
      dec += gate;
    return cfg.unique_enc_layers * enc + cfg.unique_dec_layers * dec;
  }

  int64_t expected_parameter_count(const ModelConfig& cfg) {
    const int64_t h = cfg.hidden, v = cfg.vocab_size;
    int64_t n = v * h + expected_layer_parameter_count(cfg) + 2 * (2 * h) + v;
    if (cfg.positional == Positional::Learned)
      n += static_cast<int64_t>(cfg.max_positions) * h;
    if (!cfg.tie_embeddings)
      n += h * v;
    return n;
  }

  TransformerModel TransformerModel::clone() const {
    TransformerModel copy;
    copy.cfg_ = cfg_;
    for (const auto& [name, t] : params_) {
      Tensor fresh = t.detach();
      fresh.set_requires_grad(t.requires_grad());
      copy.params_.add(name, std::move(fresh));
    }
    return copy;
  }

  int TransformerModel::resolve_wait_k(const ForwardOptions& opts) const {
    if (opts.wait_k)
      return *opts.wait_k;
    switch (cfg_.wait_k_mode) {
    case WaitKMode::Off:
      return 0;
    case WaitKMode::Fixed:
      return cfg_.wait_k;
    case WaitKMode::Sampled:
      if (!opts.training)
        return 0;
      if (!opts.rng)
        throw std::invalid_argument("sampled wait-k training needs an rng");
      return cfg_.wait_k_set[opts.rng->uniform_int(static_cast<int64_t>(cfg_.wait_k_set.size()))];
    }
    return 0;
  }

  namespace {

    Tensor embed(const ParameterStore& p,
                 const ModelConfig& cfg,
                 std::span<const int32_t> ids,
                 int64_t batch,
                 int64_t len) {
      if (len > cfg.max_positions)
        throw std::invalid_argument("sequence length " + std::to_string(len) + " exceeds max_positions " +
                                    std::to_string(cfg.max_positions));
      Tensor x = scale(embedding(p.get("embed.tokens"), ids, {batch, len}),
                       std::sqrt(static_cast<Real>(cfg.hidden)));
      if (cfg.positional == Positional::Learned)
        x = add(x, slice(p.get("embed.positions"), 0, 0, len));
      else
        x = add(x, sinusoidal_positions(len, cfg.hidden));
      return x;
    }

    Rng& dropout_rng(const ForwardOptions& opts, double p) {
      static thread_local Rng unused(0);
      if (opts.training && p > 0) {
        if (!opts.rng)
          throw std::invalid_argument("training forward with dropout needs an rng");
        return *opts.rng;
      }
      return unused;
    }

  }  // namespace

  EncoderOutput TransformerModel::encode(std::span<const int32_t> src,
                                         int64_t batch_size,
                                         int64_t src_len,
                                         std::span<const int64_t> src_lengths,
                                         std::span<const int32_t> ctx,
                                         int64_t ctx_len,
                                         std::span<const int64_t> ctx_lengths,
                                         const ForwardOptions& opts) const {
    const Real eps = static_cast<Real>(cfg_.layer_norm_eps);
    const Real p_drop = static_cast<Real>(cfg_.dropout);
    Rng& rng = dropout_rng(opts, cfg_.dropout);
    EncoderOutput out;
    out.lengths.assign(src_lengths.begin(), src_lengths.end());

    const bool wants_context = cfg_.context_mode != ContextMode::None;
    if (wants_context && ctx_len == 0)
      throw std::invalid_argument("context_mode " + to_string(cfg_.context_mode) + " requires context input");
    if (!wants_context && ctx_len > 0)
      throw std::invalid_argument("context input given but context_mode is none");

    // Plain encoder stack; gating against `context` only when provided.
    auto run_stack = [&](std::span<const int32_t> ids, int64_t len, std::span<const int64_t> lengths,
                         const Tensor* context, std::span<const int64_t> context_lengths,
                         EncoderOutput* record) {
      const Tensor structural = cfg_.unidirectional_encoder ? build_unidirectional_encoder_mask(len) : Tensor();
      const Tensor self_mask = attention_mask(batch_size, len, len, lengths, structural);
      Tensor ctx_mask;
      if (context)
        ctx_mask = attention_mask(batch_size, len, context->dim(1), context_lengths, Tensor());
      Tensor x = dropout(embed(params_, cfg_, ids, batch_size, len), p_drop, rng, opts.training);
      for (int i = 0; i < cfg_.enc_layers; ++i) {
        const std::string p = layer_prefix("encoder", i % cfg_.unique_enc_layers + 1);
        Tensor h = norm(params_, p + ".self_attn_norm", x, eps);
        AttentionResult self = attention(params_, p + ".self_attn", h, h, self_mask, cfg_.heads);
        Tensor a = self.out;
        if (context) {
          AttentionResult cross = attention(params_, p + ".ctx_attn", h, *context, ctx_mask, cfg_.heads);
          Tensor gate;
          a = gated_blend(a, cross.out, params_.get(p + ".ctx_gate.weight"), params_.get(p + ".ctx_gate.bias"),
                          &gate);
          if (record)
            record->gates.push_back(gate);
        }
        x = add(x, dropout(a, p_drop, rng, opts.training));
        h = norm(params_, p + ".ffn_norm", x, eps);
        x = add(x, dropout(feed_forward(params_, p + ".ffn", h), p_drop, rng, opts.training));
        if (record) {
          record->layer_states.push_back(x);
          record->self_attn.push_back(self.probs);
        }
      }
      return norm(params_, "encoder.final_norm", x, eps);
    };

    if (wants_context) {
      out.context = run_stack(ctx, ctx_len, ctx_lengths, nullptr, {}, nullptr);
      out.context_lengths.assign(ctx_lengths.begin(), ctx_lengths.end());
    }
    const bool gate_in_encoder = cfg_.context_mode == ContextMode::EncoderGate;
    out.states = run_stack(src, src_len, src_lengths, gate_in_encoder ? &out.context : nullptr,
                           out.context_lengths, &out);
    return out;
  }

  void TransformerModel::decode(const EncoderOutput& enc,
                                std::span<const int32_t> tgt_in,
                                int64_t batch_size,
                                int64_t tgt_len,
                                std::span<const int64_t> tgt_lengths,
                                int wait_k,
                                const ForwardOptions& opts,
                                ForwardOutput& out) const {
    const Real eps = static_cast<Real>(cfg_.layer_norm_eps);
    const Real p_drop = static_cast<Real>(cfg_.dropout);
    Rng& rng = dropout_rng(opts, cfg_.dropout);
    const int64_t src_len = enc.states.dim(1);

    const Tensor self_mask = attention_mask(batch_size, tgt_len, tgt_len, tgt_lengths, build_causal_mask(tgt_len));
    const Tensor cross_structural = wait_k > 0 ? build_wait_k_cross_mask(wait_k, src_len, tgt_len) : Tensor();
    const Tensor cross_mask = attention_mask(batch_size, tgt_len, src_len, enc.lengths, cross_structural);
    const bool combine = cfg_.context_mode == ContextMode::DecoderCombination;
    Tensor ctx_mask;
    if (combine)
      ctx_mask = attention_mask(batch_size, tgt_len, enc.context.dim(1), enc.context_lengths, Tensor());

    const Tensor& output_weight = cfg_.tie_embeddings ? params_.get("embed.tokens") : params_.get("output.weight");
    const Tensor projection = cfg_.tie_embeddings ? transpose(output_weight, 0, 1) : output_weight;
    auto project = [&](const Tensor& x) {
      return linear(norm(params_, "decoder.final_norm", x, eps), projection, params_.get("output.bias"));
    };

    Tensor x = dropout(embed(params_, cfg_, tgt_in, batch_size, tgt_len), p_drop, rng, opts.training);
    for (int i = 0; i < cfg_.dec_layers; ++i) {
      const std::string p = layer_prefix("decoder", i % cfg_.unique_dec_layers + 1);
      Tensor h = norm(params_, p + ".self_attn_norm", x, eps);
      AttentionResult self = attention(params_, p + ".self_attn", h, h, self_mask, cfg_.heads);
      x = add(x, dropout(self.out, p_drop, rng, opts.training));

      h = norm(params_, p + ".cross_attn_norm", x, eps);
      AttentionResult cross = attention(params_, p + ".cross_attn", h, enc.states, cross_mask, cfg_.heads);
      Tensor c = cross.out;
      if (combine) {
        AttentionResult extra = attention(params_, p + ".ctx_attn", h, enc.context, ctx_mask, cfg_.heads);
        Tensor gate;
        c = gated_blend(c, extra.out, params_.get(p + ".ctx_gate.weight"), params_.get(p + ".ctx_gate.bias"), &gate);
        out.context_gates.push_back(gate);
      }
      x = add(x, dropout(c, p_drop, rng, opts.training));

      h = norm(params_, p + ".ffn_norm", x, eps);
      x = add(x, dropout(feed_forward(params_, p + ".ffn", h), p_drop, rng, opts.training));

      out.decoder_states.push_back(x);
      out.decoder_self_attn.push_back(self.probs);
      out.decoder_cross_attn.push_back(cross.probs);
      if (cfg_.multi_layer_softmax && i + 1 < cfg_.dec_layers)
        out.layer_logits.push_back(project(x));
    }
    out.logits = project(x);
    if (cfg_.multi_layer_softmax)
      out.layer_logits.push_back(out.logits);
    out.applied_wait_k = wait_k;
  }

  ForwardOutput TransformerModel::forward(const Batch& batch, const ForwardOptions& opts) const {
    if (batch.batch_size == 0)
      throw std::invalid_argument("forward on empty batch");
    const int wait_k = resolve_wait_k(opts);
    EncoderOutput enc = encode(batch.src, batch.batch_size, batch.src_len, batch.src_lengths, batch.ctx,
                               batch.ctx_len, batch.ctx_lengths, opts);
    ForwardOutput out;
    out.encoder_states = enc.layer_states;
    out.encoder_self_attn = enc.self_attn;
    out.context_gates = enc.gates;
    decode(enc, batch.tgt_in, batch.batch_size, batch.tgt_len, batch.tgt_lengths, wait_k, opts, out);
    return out;
  }

}  // namespace seqforge
