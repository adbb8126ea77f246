#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "seqforge/corpus.h"
#include "seqforge/rng.h"
#include "seqforge/tensor.h"

namespace seqforge {

  enum class WaitKMode { Off, Fixed, Sampled };
  enum class ContextMode { None, DecoderCombination, EncoderGate };
  enum class Positional { Sinusoidal, Learned };

  std::string to_string(WaitKMode mode);
  std::string to_string(ContextMode mode);
  std::string to_string(Positional mode);
  WaitKMode parse_wait_k_mode(const std::string& text);
  ContextMode parse_context_mode(const std::string& text);
  Positional parse_positional(const std::string& text);

  class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
  };

  struct ModelConfig {
    int enc_layers = 6;
    int dec_layers = 6;
    // Distinct parameter sets per stack; layer i uses set (i mod unique).
    int unique_enc_layers = 6;
    int unique_dec_layers = 6;
    int hidden = 512;
    int ffn = 2048;
    int heads = 8;
    int vocab_size = 8000;
    double dropout = 0.1;
    bool multi_layer_softmax = false;
    bool unidirectional_encoder = false;
    WaitKMode wait_k_mode = WaitKMode::Off;
    int wait_k = 0;
    std::vector<int> wait_k_set;
    ContextMode context_mode = ContextMode::None;
    bool tie_embeddings = true;
    Positional positional = Positional::Sinusoidal;
    int max_positions = 512;
    double layer_norm_eps = 1e-5;

    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    bool operator==(const ModelConfig&) const = default;
  };

  // Flat, insertion-ordered name -> tensor namespace.
  class ParameterStore {
  public:
    Tensor& add(const std::string& name, Tensor value);
    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;

    size_t size() const { return entries_.size(); }
    int64_t total_elements() const;
    std::vector<std::string> names() const;

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    void zero_grad();

  private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, size_t> index_;
  };

  struct ForwardOptions {
    bool training = false;
    // Needed for dropout and for sampled wait-k during training.
    Rng* rng = nullptr;
    // Decode-time k; overrides the configured training policy.
    std::optional<int> wait_k;
  };

  struct ForwardOutput {
    Tensor logits;                            // [B, T, V]
    std::vector<Tensor> layer_logits;         // per decoder layer, multi-layer softmax only
    std::vector<Tensor> encoder_states;       // per layer [B, S, H]
    std::vector<Tensor> decoder_states;       // per layer [B, T, H]
    std::vector<Tensor> encoder_self_attn;    // per layer [B, heads, S, S]
    std::vector<Tensor> decoder_self_attn;    // per layer [B, heads, T, T]
    std::vector<Tensor> decoder_cross_attn;   // per layer [B, heads, T, S]
    std::vector<Tensor> context_gates;        // per gated layer [B, len, 1]
    int applied_wait_k = 0;                   // 0 when full attention
  };

  struct EncoderOutput {
    Tensor states;                            // final normalized [B, S, H]
    std::vector<int64_t> lengths;
    std::vector<Tensor> layer_states;
    std::vector<Tensor> self_attn;
    std::vector<Tensor> gates;
    // Encoded context (document / second source), when present.
    Tensor context;
    std::vector<int64_t> context_lengths;
  };

  // Additive masks (0 allowed, -inf blocked), positions 1-based in the
  // documentation and 0-based in storage.
  // Row t allows source positions 1..min(k+t-1, S).
  Tensor build_wait_k_cross_mask(int k, int64_t src_len, int64_t tgt_len);
  Tensor build_unidirectional_encoder_mask(int64_t len);
  Tensor build_causal_mask(int64_t len);

  Tensor sinusoidal_positions(int64_t len, int64_t hidden);

  // Pre-norm transformer encoder-decoder with layer tying, multi-layer
  // softmax, wait-k cross masks and two context-combination modes.
  class TransformerModel {
  public:
    TransformerModel() = default;
    TransformerModel(ModelConfig cfg, Rng& rng);

    const ModelConfig& config() const { return cfg_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

    ForwardOutput forward(const Batch& batch, const ForwardOptions& opts = {}) const;

    EncoderOutput encode(std::span<const int32_t> src,
                         int64_t batch_size,
                         int64_t src_len,
                         std::span<const int64_t> src_lengths,
                         std::span<const int32_t> ctx = {},
                         int64_t ctx_len = 0,
                         std::span<const int64_t> ctx_lengths = {},
                         const ForwardOptions& opts = {}) const;

    // Runs the decoder on tgt_in [B, T] against encoder output; fills the
    // decoder-side fields of out.
    void decode(const EncoderOutput& enc,
                std::span<const int32_t> tgt_in,
                int64_t batch_size,
                int64_t tgt_len,
                std::span<const int64_t> tgt_lengths,
                int wait_k,
                const ForwardOptions& opts,
                ForwardOutput& out) const;

    // Deep copy with independent storage.
    TransformerModel clone() const;

    // Fresh values for one named parameter, following the init scheme.
    Tensor init_parameter(const std::string& name, const Shape& shape, Rng& rng) const;

    // Parameter names of unique layer `layer` (1-based) of a stack.
    std::vector<std::string> layer_parameter_names(const std::string& stack, int layer) const;
    int64_t layer_parameter_count() const;
    int64_t parameter_count() const { return params_.total_elements(); }

    // k used for a forward pass under the given options (0 = none).
    int resolve_wait_k(const ForwardOptions& opts) const;

    static std::string layer_prefix(const std::string& stack, int layer);

  private:
    void build_parameters(Rng& rng);

    ModelConfig cfg_;
    ParameterStore params_;
  };

  // Closed-form parameter count for a configuration.
  int64_t expected_parameter_count(const ModelConfig& cfg);
  int64_t expected_layer_parameter_count(const ModelConfig& cfg);

  // Gated blend used by both context modes:
  // g = sigmoid(w^T [a; c] + b), out = g * a + (1 - g) * c.
  Tensor gated_blend(const Tensor& sentence_context,
                     const Tensor& other_context,
                     const Tensor& gate_weight,
                     const Tensor& gate_bias,
                     Tensor* gate_out = nullptr);

}  // namespace seqforge
