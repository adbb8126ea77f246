#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqforge/rng.h"

// Storage precision. The default build stores 32-bit floats; the 64-bit
// "shadow" build (SEQFORGE_REAL_DOUBLE) exists for gradient checking only.
#if defined(SEQFORGE_REAL_DOUBLE)
using Real = double;
#else
using Real = float;
#endif

namespace seqforge {

  using Shape = std::vector<int64_t>;

  int64_t numel(const Shape& shape);
  std::string shape_str(const Shape& shape);

  class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
  };

  class GraphError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
  };

  namespace detail {
    struct Node {
      Shape shape;
      std::vector<Real> data;
      std::vector<Real> grad;
      bool requires_grad = false;
      bool backward_done = false;
      std::vector<std::shared_ptr<Node>> parents;
      // Reads this node's grad and accumulates into the parents' grads.
      std::function<void(Node&)> backward;

      std::vector<Real>& ensure_grad() {
        if (grad.size() != data.size())
          grad.assign(data.size(), Real(0));
        return grad;
      }
    };
  }

  // Dense row-major array with reverse-mode differentiation. Copies share
  // the underlying node; use clone() for an independent value copy.
  class Tensor {
  public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, Real value, bool requires_grad = false);
    static Tensor scalar(Real value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int rank() const { return static_cast<int>(shape().size()); }
    int64_t dim(int axis) const;
    int64_t numel() const;

    std::span<const Real> data() const;
    // Writes bypass the graph: only meant for leaves (parameters, inputs).
    std::span<Real> data_mut();
    Real at(int64_t flat_index) const { return data()[flat_index]; }

    bool requires_grad() const;
    void set_requires_grad(bool value);
    bool has_grad() const;
    std::span<const Real> grad() const;
    std::span<Real> grad_mut();
    void zero_grad();

    Real item() const;

    // Populates grads of every requires_grad leaf reachable from this scalar.
    // The graph is released afterwards; a second call is an error.
    void backward();

    // Fresh leaf holding a copy of the values, no history.
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  private:
    std::shared_ptr<detail::Node> node_;
  };

  // Disables graph recording on the current thread for its lifetime.
  class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
  };

  bool grad_enabled();

  // Elementwise with numpy-style broadcasting.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, Real factor);

  Tensor matmul(const Tensor& a, const Tensor& b);
  // a: [B, m, k], b: [B, k, n] (or [B, n, k] when transpose_b).
  Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
  // x: [..., in], weight: [in, out], bias: [out] or undefined.
  Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

  Tensor reshape(const Tensor& x, Shape shape);
  Tensor permute(const Tensor& x, const std::vector<int>& perm);
  Tensor transpose(const Tensor& x, int axis0, int axis1);
  Tensor concat(const std::vector<Tensor>& parts, int axis);
  Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length);

  // Softmax over the last axis after adding an additive mask (entries 0 or
  // -inf, broadcastable to x). Masked entries are exactly 0. A row with every
  // entry masked yields zeros and sets *fully_masked_row.
  Tensor masked_softmax(const Tensor& x, const Tensor& mask, bool* fully_masked_row = nullptr);
  Tensor softmax(const Tensor& x);
  Tensor log_softmax(const Tensor& x);

  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps);
  Tensor gelu(const Tensor& x);
  Tensor relu(const Tensor& x);
  Tensor sigmoid(const Tensor& x);
  // log(max(x, floor)); gradient is zero where clamped.
  Tensor log_clamped(const Tensor& x, Real floor);

  // Gathers rows of weight [V, H]; output shape is out_prefix + [H].
  Tensor embedding(const Tensor& weight, std::span<const int32_t> ids, Shape out_prefix);

  // Inverted dropout: scales survivors by 1/(1-p) in training, identity otherwise.
  Tensor dropout(const Tensor& x, Real p, Rng& rng, bool training);

  Tensor sum(const Tensor& x);
  Tensor mean(const Tensor& x);

  // Result node for an op defined outside this library. The graph is only
  // recorded when gradients are enabled and some input requires them;
  // backward reads self.grad and accumulates into input_grad(self, i).
  Tensor custom_op(Shape shape,
                   std::vector<Real> data,
                   const std::vector<Tensor>& inputs,
                   std::function<void(detail::Node&)> backward);
  // Gradient buffer of input i inside a custom backward, or nullptr when that
  // input does not take gradients.
  Real* input_grad(detail::Node& self, size_t i);

  // Mean over non-pad rows of (1-eps)*NLL(target) + eps*mean_v NLL(v).
  // logits: [N, V]; targets: N ids. Throws if every row is padding.
  Tensor cross_entropy_label_smoothed(const Tensor& logits,
                                      std::span<const int32_t> targets,
                                      Real smoothing,
                                      int32_t pad_id);

}  // namespace seqforge
