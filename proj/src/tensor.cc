#include "seqforge/tensor.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

namespace seqforge {

  namespace {

    using detail::Node;
    using MatR = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapR = Eigen::Map<MatR>;
    using CMapR = Eigen::Map<const MatR>;

    thread_local bool t_grad_enabled = true;

    using BackwardFn = std::function<void(Node&)>;

    Tensor make_result(Shape shape,
                       std::vector<Real> data,
                       std::initializer_list<const Tensor*> inputs,
                       BackwardFn backward) {
      auto node = std::make_shared<Node>();
      node->shape = std::move(shape);
      node->data = std::move(data);
      if (t_grad_enabled) {
        bool any = false;
        for (const Tensor* input : inputs)
          any = any || input->requires_grad();
        if (any) {
          node->requires_grad = true;
          for (const Tensor* input : inputs)
            node->parents.push_back(input->node());
          node->backward = std::move(backward);
        }
      }
      return Tensor(std::move(node));
    }

    Tensor make_result(Shape shape,
                       std::vector<Real> data,
                       const std::vector<Tensor>& inputs,
                       BackwardFn backward) {
      auto node = std::make_shared<Node>();
      node->shape = std::move(shape);
      node->data = std::move(data);
      if (t_grad_enabled) {
        bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
        if (any) {
          node->requires_grad = true;
          for (const Tensor& input : inputs)
            node->parents.push_back(input.node());
          node->backward = std::move(backward);
        }
      }
      return Tensor(std::move(node));
    }

    // Grad buffer of parent i, or nullptr when it does not need one.
    Real* parent_grad(Node& self, size_t i) {
      Node& parent = *self.parents[i];
      if (!parent.requires_grad)
        return nullptr;
      return parent.ensure_grad().data();
    }

    void require_defined(const Tensor& t, const char* op) {
      if (!t.defined())
        throw ShapeError(std::string(op) + ": undefined tensor");
    }

    int normalize_axis(int axis, int rank, const char* op) {
      if (axis < 0)
        axis += rank;
      if (axis < 0 || axis >= rank)
        throw ShapeError(std::string(op) + ": axis out of range");
      return axis;
    }

    std::vector<int64_t> strides_of(const Shape& shape) {
      std::vector<int64_t> strides(shape.size(), 1);
      for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
        strides[i] = strides[i + 1] * shape[i + 1];
      return strides;
    }

    // Flat index into a broadcast operand for every output element.
    std::vector<int64_t> broadcast_index(const Shape& operand, const Shape& out) {
      const size_t rank = out.size();
      const size_t offset = rank - operand.size();
      std::vector<int64_t> operand_strides(rank, 0);
      const auto own = strides_of(operand);
      for (size_t d = 0; d < operand.size(); ++d)
        operand_strides[offset + d] = operand[d] == 1 ? 0 : own[d];

      const int64_t total = numel(out);
      std::vector<int64_t> index(total);
      std::vector<int64_t> counter(rank, 0);
      int64_t position = 0;
      for (int64_t i = 0; i < total; ++i) {
        index[i] = position;
        for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
          ++counter[d];
          position += operand_strides[d];
          if (counter[d] < out[d])
            break;
          position -= operand_strides[d] * counter[d];
          counter[d] = 0;
        }
      }
      return index;
    }

    Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
      const size_t rank = std::max(a.size(), b.size());
      Shape out(rank, 1);
      for (size_t i = 0; i < rank; ++i) {
        const int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1)
          throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
        out[i] = std::max(da, db);
      }
      return out;
    }

    bool is_suffix(const Shape& small, const Shape& big) {
      if (small.size() > big.size())
        return false;
      return std::equal(small.begin(), small.end(), big.end() - small.size());
    }

    enum class BinaryKind { Add, Sub, Mul };

    Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* op) {
      require_defined(a, op);
      require_defined(b, op);
      const Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
      const int64_t total = numel(out_shape);
      const auto ad = a.data();
      const auto bd = b.data();
      const int64_t na = a.numel();
      const int64_t nb = b.numel();

      // Index maps: empty means "identity modulo operand size" (suffix
      // broadcast), which covers the same-shape case too.
      std::shared_ptr<std::vector<int64_t>> ia, ib;
      if (!is_suffix(a.shape(), out_shape))
        ia = std::make_shared<std::vector<int64_t>>(broadcast_index(a.shape(), out_shape));
      if (!is_suffix(b.shape(), out_shape))
        ib = std::make_shared<std::vector<int64_t>>(broadcast_index(b.shape(), out_shape));

      auto index_a = [ia, na](int64_t i) { return ia ? (*ia)[i] : i % na; };
      auto index_b = [ib, nb](int64_t i) { return ib ? (*ib)[i] : i % nb; };

      std::vector<Real> out(total);
      if (!ia && !ib && na == total && nb == total) {
        switch (kind) {
        case BinaryKind::Add: for (int64_t i = 0; i < total; ++i) out[i] = ad[i] + bd[i]; break;
        case BinaryKind::Sub: for (int64_t i = 0; i < total; ++i) out[i] = ad[i] - bd[i]; break;
        case BinaryKind::Mul: for (int64_t i = 0; i < total; ++i) out[i] = ad[i] * bd[i]; break;
        }
      } else {
        for (int64_t i = 0; i < total; ++i) {
          const Real x = ad[index_a(i)];
          const Real y = bd[index_b(i)];
          out[i] = kind == BinaryKind::Add ? x + y : kind == BinaryKind::Sub ? x - y : x * y;
        }
      }

      return make_result(out_shape, std::move(out), {&a, &b},
                         [kind, total, index_a, index_b](Node& self) {
        const Real* g = self.grad.data();
        const Node& pa = *self.parents[0];
        const Node& pb = *self.parents[1];
        if (Real* ga = parent_grad(self, 0)) {
          for (int64_t i = 0; i < total; ++i) {
            const Real factor = kind == BinaryKind::Mul ? pb.data[index_b(i)] : Real(1);
            ga[index_a(i)] += g[i] * factor;
          }
        }
        if (Real* gb = parent_grad(self, 1)) {
          for (int64_t i = 0; i < total; ++i) {
            const Real factor = kind == BinaryKind::Mul ? pa.data[index_a(i)]
                              : kind == BinaryKind::Sub ? Real(-1) : Real(1);
            gb[index_b(i)] += g[i] * factor;
          }
        }
      });
    }

    // Elementwise unary op; derivative given (x, y).
    template <typename F, typename D>
    Tensor unary(const Tensor& x, F f, D df, const char* op) {
      require_defined(x, op);
      const auto xd = x.data();
      std::vector<Real> out(xd.size());
      for (size_t i = 0; i < xd.size(); ++i)
        out[i] = f(xd[i]);
      return make_result(x.shape(), std::move(out), {&x}, [df](Node& self) {
        Real* gx = parent_grad(self, 0);
        if (!gx)
          return;
        const auto& xdata = self.parents[0]->data;
        for (size_t i = 0; i < self.data.size(); ++i)
          gx[i] += self.grad[i] * df(xdata[i], self.data[i]);
      });
    }

  }  // namespace

  int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape)
      n *= d;
    return n;
  }

  std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (size_t i = 0; i < shape.size(); ++i)
      out << (i ? "," : "") << shape[i];
    out << ']';
    return out.str();
  }

  // --- Tensor ---------------------------------------------------------------

  Tensor::Tensor(Shape shape, std::vector<Real> data, bool requires_grad) {
    for (int64_t d : shape)
      if (d < 0)
        throw ShapeError("negative dimension in " + shape_str(shape));
    if (seqforge::numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("data size " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), Real(0), requires_grad);
  }

  Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
    const int64_t n = seqforge::numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, value), requires_grad);
  }

  Tensor Tensor::scalar(Real value) {
    return Tensor(Shape{}, {value});
  }

  const Shape& Tensor::shape() const {
    static const Shape empty;
    return node_ ? node_->shape : empty;
  }

  int64_t Tensor::dim(int axis) const {
    const int r = rank();
    if (axis < 0)
      axis += r;
    if (axis < 0 || axis >= r)
      throw ShapeError("dim: axis out of range for shape " + shape_str(shape()));
    return shape()[axis];
  }

  int64_t Tensor::numel() const {
    return node_ ? static_cast<int64_t>(node_->data.size()) : 0;
  }

  std::span<const Real> Tensor::data() const {
    if (!node_)
      return {};
    return node_->data;
  }

  std::span<Real> Tensor::data_mut() {
    if (!node_)
      return {};
    return node_->data;
  }

  bool Tensor::requires_grad() const {
    return node_ && node_->requires_grad;
  }

  void Tensor::set_requires_grad(bool value) {
    if (!node_)
      throw GraphError("set_requires_grad on undefined tensor");
    if (node_->backward)
      throw GraphError("set_requires_grad is only valid on leaves");
    node_->requires_grad = value;
  }

  bool Tensor::has_grad() const {
    return node_ && node_->grad.size() == node_->data.size() && !node_->data.empty();
  }

  std::span<const Real> Tensor::grad() const {
    if (!has_grad())
      return {};
    return node_->grad;
  }

  std::span<Real> Tensor::grad_mut() {
    if (!node_)
      return {};
    return node_->ensure_grad();
  }

  void Tensor::zero_grad() {
    if (node_ && !node_->grad.empty())
      std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
  }

  Real Tensor::item() const {
    if (numel() != 1)
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  void Tensor::backward() {
    if (!node_)
      throw GraphError("backward on undefined tensor");
    if (numel() != 1)
      throw GraphError("backward requires a scalar, got shape " + shape_str(shape()));
    if (node_->backward_done)
      throw GraphError("backward called twice on the same graph");
    if (!node_->requires_grad)
      throw GraphError("backward on a tensor that does not require grad");

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* parent = node->parents[next++].get();
        if (parent->requires_grad && visited.insert(parent).second)
          stack.emplace_back(parent, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    node_->ensure_grad()[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backward && !node->grad.empty())
        node->backward(*node);
    }

    // Release the graph. Interior grads are dropped; leaves keep theirs.
    for (Node* node : order) {
      if (node->backward) {
        node->backward = nullptr;
        node->parents.clear();
        if (node != node_.get())
          std::vector<Real>().swap(node->grad);
      }
    }
    node_->backward_done = true;
  }

  Tensor Tensor::detach() const {
    if (!node_)
      return {};
    return Tensor(node_->shape, node_->data);
  }

  NoGradGuard::NoGradGuard()
    : previous_(t_grad_enabled) {
    t_grad_enabled = false;
  }

  NoGradGuard::~NoGradGuard() {
    t_grad_enabled = previous_;
  }

  bool grad_enabled() {
    return t_grad_enabled;
  }

  // --- Elementwise ------------------------------------------------------------

  Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Add, "add"); }
  Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Sub, "sub"); }
  Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Mul, "mul"); }

  Tensor scale(const Tensor& a, Real factor) {
    return unary(a, [factor](Real x) { return x * factor; },
                 [factor](Real, Real) { return factor; }, "scale");
  }

  Tensor gelu(const Tensor& x) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    return unary(
      x,
      [](Real v) { return static_cast<Real>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2))); },
      [](Real v, Real) {
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * double(v) * v);
        return static_cast<Real>(cdf + v * pdf);
      },
      "gelu");
  }

  Tensor relu(const Tensor& x) {
    return unary(x, [](Real v) { return v > 0 ? v : Real(0); },
                 [](Real v, Real) { return v > 0 ? Real(1) : Real(0); }, "relu");
  }

  Tensor sigmoid(const Tensor& x) {
    return unary(
      x,
      [](Real v) {
        return v >= 0 ? static_cast<Real>(1.0 / (1.0 + std::exp(-double(v))))
                      : static_cast<Real>(std::exp(double(v)) / (1.0 + std::exp(double(v))));
      },
      [](Real, Real y) { return y * (Real(1) - y); }, "sigmoid");
  }

  Tensor log_clamped(const Tensor& x, Real floor) {
    return unary(x, [floor](Real v) { return static_cast<Real>(std::log(std::max(v, floor))); },
                 [floor](Real v, Real) { return v > floor ? Real(1) / v : Real(0); },
                 "log_clamped");
  }

  // --- Products ---------------------------------------------------------------

  Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
      throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<Real> out(m * n);
    MapR(out.data(), m, n).noalias() = CMapR(a.data().data(), m, k) * CMapR(b.data().data(), k, n);
    return make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
      CMapR g(self.grad.data(), m, n);
      if (Real* ga = parent_grad(self, 0))
        MapR(ga, m, k).noalias() += g * CMapR(self.parents[1]->data.data(), k, n).transpose();
      if (Real* gb = parent_grad(self, 1))
        MapR(gb, k, n).noalias() += CMapR(self.parents[0]->data.data(), m, k).transpose() * g;
    });
  }

  Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
    require_defined(a, "bmm");
    require_defined(b, "bmm");
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
      throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    const int64_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
    const int64_t n = transpose_b ? b.dim(1) : b.dim(2);
    if ((transpose_b ? b.dim(2) : b.dim(1)) != k)
      throw ShapeError("bmm: inner dimensions differ: " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    std::vector<Real> out(batch * m * n);
    const Real* ad = a.data().data();
    const Real* bd = b.data().data();
    for (int64_t i = 0; i < batch; ++i) {
      CMapR am(ad + i * m * k, m, k);
      MapR om(out.data() + i * m * n, m, n);
      if (transpose_b)
        om.noalias() = am * CMapR(bd + i * n * k, n, k).transpose();
      else
        om.noalias() = am * CMapR(bd + i * k * n, k, n);
    }
    return make_result({batch, m, n}, std::move(out), {&a, &b},
                       [batch, m, k, n, transpose_b](Node& self) {
      Real* ga = parent_grad(self, 0);
      Real* gb = parent_grad(self, 1);
      const Real* ad = self.parents[0]->data.data();
      const Real* bd = self.parents[1]->data.data();
      for (int64_t i = 0; i < batch; ++i) {
        CMapR g(self.grad.data() + i * m * n, m, n);
        if (ga) {
          MapR gam(ga + i * m * k, m, k);
          if (transpose_b)
            gam.noalias() += g * CMapR(bd + i * n * k, n, k);
          else
            gam.noalias() += g * CMapR(bd + i * k * n, k, n).transpose();
        }
        if (gb) {
          CMapR am(ad + i * m * k, m, k);
          if (transpose_b)
            MapR(gb + i * n * k, n, k).noalias() += g.transpose() * am;
          else
            MapR(gb + i * k * n, k, n).noalias() += am.transpose() * g;
        }
      }
    });
  }

  Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_defined(x, "linear");
    require_defined(weight, "linear");
    if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(0))
      throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " and " +
                       shape_str(weight.shape()));
    const int64_t in = weight.dim(0), out_dim = weight.dim(1);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim))
      throw ShapeError("linear: bias shape " + shape_str(bias.shape()));
    const int64_t rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = out_dim;

    std::vector<Real> out(rows * out_dim);
    MapR om(out.data(), rows, out_dim);
    om.noalias() = CMapR(x.data().data(), rows, in) * CMapR(weight.data().data(), in, out_dim);
    if (bias.defined())
      om.rowwise() += Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>(bias.data().data(), out_dim);

    const bool has_bias = bias.defined();
    auto backward = [rows, in, out_dim, has_bias](Node& self) {
      CMapR g(self.grad.data(), rows, out_dim);
      if (Real* gx = parent_grad(self, 0))
        MapR(gx, rows, in).noalias() += g * CMapR(self.parents[1]->data.data(), in, out_dim).transpose();
      if (Real* gw = parent_grad(self, 1))
        MapR(gw, in, out_dim).noalias() += CMapR(self.parents[0]->data.data(), rows, in).transpose() * g;
      if (has_bias) {
        if (Real* gb = parent_grad(self, 2))
          Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>(gb, out_dim) += g.colwise().sum();
      }
    };
    if (has_bias)
      return make_result(std::move(out_shape), std::move(out), {&x, &weight, &bias}, backward);
    return make_result(std::move(out_shape), std::move(out), {&x, &weight}, backward);
  }

  // --- Layout -------------------------------------------------------------------

  Tensor reshape(const Tensor& x, Shape shape) {
    require_defined(x, "reshape");
    int64_t known = 1;
    int infer = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
      if (shape[i] == -1) {
        if (infer >= 0)
          throw ShapeError("reshape: more than one inferred dimension");
        infer = static_cast<int>(i);
      } else {
        known *= shape[i];
      }
    }
    if (infer >= 0 && known > 0)
      shape[infer] = x.numel() / known;
    if (numel(shape) != x.numel())
      throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    std::vector<Real> out(x.data().begin(), x.data().end());
    return make_result(std::move(shape), std::move(out), {&x}, [](Node& self) {
      if (Real* gx = parent_grad(self, 0))
        for (size_t i = 0; i < self.grad.size(); ++i)
          gx[i] += self.grad[i];
    });
  }

  Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    require_defined(x, "permute");
    const int rank = x.rank();
    if (static_cast<int>(perm.size()) != rank)
      throw ShapeError("permute: permutation rank mismatch");
    std::vector<bool> seen(rank, false);
    for (int p : perm) {
      if (p < 0 || p >= rank || seen[p])
        throw ShapeError("permute: invalid permutation");
      seen[p] = true;
    }
    const Shape& in_shape = x.shape();
    Shape out_shape(rank);
    const auto in_strides = strides_of(in_shape);
    std::vector<int64_t> src_strides(rank);
    for (int d = 0; d < rank; ++d) {
      out_shape[d] = in_shape[perm[d]];
      src_strides[d] = in_strides[perm[d]];
    }
    // Source offset for each output element.
    const int64_t total = x.numel();
    auto index = std::make_shared<std::vector<int64_t>>(total);
    {
      std::vector<int64_t> counter(rank, 0);
      int64_t position = 0;
      for (int64_t i = 0; i < total; ++i) {
        (*index)[i] = position;
        for (int d = rank - 1; d >= 0; --d) {
          ++counter[d];
          position += src_strides[d];
          if (counter[d] < out_shape[d])
            break;
          position -= src_strides[d] * counter[d];
          counter[d] = 0;
        }
      }
    }
    std::vector<Real> out(total);
    const auto xd = x.data();
    for (int64_t i = 0; i < total; ++i)
      out[i] = xd[(*index)[i]];
    return make_result(std::move(out_shape), std::move(out), {&x}, [index](Node& self) {
      if (Real* gx = parent_grad(self, 0))
        for (size_t i = 0; i < self.grad.size(); ++i)
          gx[(*index)[i]] += self.grad[i];
    });
  }

  Tensor transpose(const Tensor& x, int axis0, int axis1) {
    const int rank = x.rank();
    axis0 = normalize_axis(axis0, rank, "transpose");
    axis1 = normalize_axis(axis1, rank, "transpose");
    std::vector<int> perm(rank);
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[axis0], perm[axis1]);
    return permute(x, perm);
  }

  Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty())
      throw ShapeError("concat: no inputs");
    for (const auto& p : parts)
      require_defined(p, "concat");
    const int rank = parts[0].rank();
    axis = normalize_axis(axis, rank, "concat");
    Shape out_shape = parts[0].shape();
    out_shape[axis] = 0;
    for (const auto& p : parts) {
      if (p.rank() != rank)
        throw ShapeError("concat: rank mismatch");
      for (int d = 0; d < rank; ++d)
        if (d != axis && p.shape()[d] != parts[0].shape()[d])
          throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                           shape_str(parts[0].shape()));
      out_shape[axis] += p.shape()[axis];
    }
    int64_t outer = 1;
    for (int d = 0; d < axis; ++d)
      outer *= out_shape[d];
    int64_t inner = 1;
    for (int d = axis + 1; d < rank; ++d)
      inner *= out_shape[d];

    std::vector<int64_t> chunk(parts.size());
    for (size_t i = 0; i < parts.size(); ++i)
      chunk[i] = parts[i].shape()[axis] * inner;
    const int64_t row = out_shape[axis] * inner;

    std::vector<Real> out(numel(out_shape));
    for (int64_t o = 0; o < outer; ++o) {
      int64_t offset = o * row;
      for (size_t i = 0; i < parts.size(); ++i) {
        const Real* src = parts[i].data().data() + o * chunk[i];
        std::copy(src, src + chunk[i], out.data() + offset);
        offset += chunk[i];
      }
    }
    return make_result(std::move(out_shape), std::move(out), parts, [outer, chunk, row](Node& self) {
      for (int64_t o = 0; o < outer; ++o) {
        int64_t offset = o * row;
        for (size_t i = 0; i < chunk.size(); ++i) {
          if (Real* g = parent_grad(self, i))
            for (int64_t j = 0; j < chunk[i]; ++j)
              g[o * chunk[i] + j] += self.grad[offset + j];
          offset += chunk[i];
        }
      }
    });
  }

  Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length) {
    require_defined(x, "slice");
    const int rank = x.rank();
    axis = normalize_axis(axis, rank, "slice");
    const Shape& in_shape = x.shape();
    if (start < 0 || length < 0 || start + length > in_shape[axis])
      throw ShapeError("slice: range out of bounds for " + shape_str(in_shape));
    int64_t outer = 1;
    for (int d = 0; d < axis; ++d)
      outer *= in_shape[d];
    int64_t inner = 1;
    for (int d = axis + 1; d < rank; ++d)
      inner *= in_shape[d];
    Shape out_shape = in_shape;
    out_shape[axis] = length;
    const int64_t in_row = in_shape[axis] * inner;
    const int64_t out_row = length * inner;
    const int64_t first = start * inner;

    std::vector<Real> out(outer * out_row);
    const auto xd = x.data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(xd.begin() + o * in_row + first, xd.begin() + o * in_row + first + out_row,
                out.begin() + o * out_row);
    return make_result(std::move(out_shape), std::move(out), {&x},
                       [outer, in_row, out_row, first](Node& self) {
      if (Real* gx = parent_grad(self, 0))
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t j = 0; j < out_row; ++j)
            gx[o * in_row + first + j] += self.grad[o * out_row + j];
    });
  }

  // --- Normalization ------------------------------------------------------------

  Tensor masked_softmax(const Tensor& x, const Tensor& mask, bool* fully_masked_row) {
    require_defined(x, "masked_softmax");
    if (x.rank() < 1)
      throw ShapeError("masked_softmax: scalar input");
    const int64_t cols = x.dim(-1);
    const int64_t total = x.numel();
    const int64_t rows = cols == 0 ? 0 : total / cols;
    const auto xd = x.data();

    std::vector<Real> additive;
    if (mask.defined()) {
      const Shape joint = broadcast_shape(x.shape(), mask.shape(), "masked_softmax");
      if (joint != x.shape())
        throw ShapeError("masked_softmax: mask " + shape_str(mask.shape()) +
                         " not broadcastable to " + shape_str(x.shape()));
      const auto md = mask.data();
      if (mask.numel() == total) {
        additive.assign(md.begin(), md.end());
      } else {
        const auto index = broadcast_index(mask.shape(), x.shape());
        additive.resize(total);
        for (int64_t i = 0; i < total; ++i)
          additive[i] = md[index[i]];
      }
    }

    bool any_fully_masked = false;
    std::vector<Real> out(total, Real(0));
    for (int64_t r = 0; r < rows; ++r) {
      const Real* in = xd.data() + r * cols;
      const Real* m = additive.empty() ? nullptr : additive.data() + r * cols;
      Real* o = out.data() + r * cols;
      Real max_value = -std::numeric_limits<Real>::infinity();
      for (int64_t j = 0; j < cols; ++j) {
        if (m && std::isinf(m[j]) && m[j] < 0)
          continue;
        max_value = std::max(max_value, in[j] + (m ? m[j] : Real(0)));
      }
      if (std::isinf(max_value)) {
        any_fully_masked = true;
        continue;
      }
      double denom = 0;
      for (int64_t j = 0; j < cols; ++j) {
        if (m && std::isinf(m[j]) && m[j] < 0)
          continue;
        const Real e = std::exp(in[j] + (m ? m[j] : Real(0)) - max_value);
        o[j] = e;
        denom += e;
      }
      const Real inv = static_cast<Real>(1.0 / denom);
      for (int64_t j = 0; j < cols; ++j)
        o[j] *= inv;
    }
    if (fully_masked_row)
      *fully_masked_row = any_fully_masked;

    return make_result(x.shape(), std::move(out), {&x}, [rows, cols](Node& self) {
      Real* gx = parent_grad(self, 0);
      if (!gx)
        return;
      for (int64_t r = 0; r < rows; ++r) {
        const Real* y = self.data.data() + r * cols;
        const Real* g = self.grad.data() + r * cols;
        double dot = 0;
        for (int64_t j = 0; j < cols; ++j)
          dot += double(y[j]) * g[j];
        for (int64_t j = 0; j < cols; ++j)
          gx[r * cols + j] += y[j] * (g[j] - static_cast<Real>(dot));
      }
    });
  }

  Tensor softmax(const Tensor& x) {
    return masked_softmax(x, Tensor());
  }

  Tensor log_softmax(const Tensor& x) {
    require_defined(x, "log_softmax");
    const int64_t cols = x.dim(-1);
    const int64_t rows = cols == 0 ? 0 : x.numel() / cols;
    const auto xd = x.data();
    std::vector<Real> out(x.numel());
    for (int64_t r = 0; r < rows; ++r) {
      const Real* in = xd.data() + r * cols;
      Real max_value = *std::max_element(in, in + cols);
      double denom = 0;
      for (int64_t j = 0; j < cols; ++j)
        denom += std::exp(double(in[j]) - max_value);
      const double lse = max_value + std::log(denom);
      for (int64_t j = 0; j < cols; ++j)
        out[r * cols + j] = static_cast<Real>(in[j] - lse);
    }
    return make_result(x.shape(), std::move(out), {&x}, [rows, cols](Node& self) {
      Real* gx = parent_grad(self, 0);
      if (!gx)
        return;
      for (int64_t r = 0; r < rows; ++r) {
        const Real* y = self.data.data() + r * cols;
        const Real* g = self.grad.data() + r * cols;
        double gsum = 0;
        for (int64_t j = 0; j < cols; ++j)
          gsum += g[j];
        for (int64_t j = 0; j < cols; ++j)
          gx[r * cols + j] += g[j] - static_cast<Real>(std::exp(double(y[j])) * gsum);
      }
    });
  }

  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps) {
    require_defined(x, "layer_norm");
    const int64_t cols = x.dim(-1);
    if (gain.numel() != cols || bias.numel() != cols)
      throw ShapeError("layer_norm: gain/bias must match last dim " + std::to_string(cols));
    const int64_t rows = x.numel() / cols;
    const auto xd = x.data();
    const auto gd = gain.data();
    const auto bd = bias.data();

    auto normalized = std::make_shared<std::vector<Real>>(x.numel());
    auto inv_std = std::make_shared<std::vector<Real>>(rows);
    std::vector<Real> out(x.numel());
    for (int64_t r = 0; r < rows; ++r) {
      const Real* in = xd.data() + r * cols;
      double mean = 0;
      for (int64_t j = 0; j < cols; ++j)
        mean += in[j];
      mean /= cols;
      double var = 0;
      for (int64_t j = 0; j < cols; ++j)
        var += (in[j] - mean) * (in[j] - mean);
      var /= cols;
      const double rstd = 1.0 / std::sqrt(var + eps);
      (*inv_std)[r] = static_cast<Real>(rstd);
      for (int64_t j = 0; j < cols; ++j) {
        const Real xhat = static_cast<Real>((in[j] - mean) * rstd);
        (*normalized)[r * cols + j] = xhat;
        out[r * cols + j] = xhat * gd[j] + bd[j];
      }
    }
    return make_result(x.shape(), std::move(out), {&x, &gain, &bias},
                       [rows, cols, normalized, inv_std](Node& self) {
      const Real* g = self.grad.data();
      const Real* gain_data = self.parents[1]->data.data();
      Real* gx = parent_grad(self, 0);
      Real* gg = parent_grad(self, 1);
      Real* gb = parent_grad(self, 2);
      for (int64_t r = 0; r < rows; ++r) {
        const Real* xhat = normalized->data() + r * cols;
        const Real* gr = g + r * cols;
        if (gg || gb) {
          for (int64_t j = 0; j < cols; ++j) {
            if (gg) gg[j] += gr[j] * xhat[j];
            if (gb) gb[j] += gr[j];
          }
        }
        if (gx) {
          double mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (int64_t j = 0; j < cols; ++j) {
            const double dxhat = double(gr[j]) * gain_data[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[j];
          }
          mean_dxhat /= cols;
          mean_dxhat_xhat /= cols;
          const double rstd = (*inv_std)[r];
          for (int64_t j = 0; j < cols; ++j) {
            const double dxhat = double(gr[j]) * gain_data[j];
            gx[r * cols + j] += static_cast<Real>(rstd * (dxhat - mean_dxhat - xhat[j] * mean_dxhat_xhat));
          }
        }
      }
    });
  }

  // --- Misc -------------------------------------------------------------------------

  Tensor embedding(const Tensor& weight, std::span<const int32_t> ids, Shape out_prefix) {
    require_defined(weight, "embedding");
    if (weight.rank() != 2)
      throw ShapeError("embedding: weight must be 2-D");
    if (numel(out_prefix) != static_cast<int64_t>(ids.size()))
      throw ShapeError("embedding: id count does not match output shape");
    const int64_t vocab = weight.dim(0), hidden = weight.dim(1);
    auto id_copy = std::make_shared<std::vector<int32_t>>(ids.begin(), ids.end());
    std::vector<Real> out(ids.size() * hidden);
    const auto wd = weight.data();
    for (size_t i = 0; i < ids.size(); ++i) {
      const int32_t id = ids[i];
      if (id < 0 || id >= vocab)
        throw std::out_of_range("embedding: id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(vocab));
      std::copy(wd.begin() + id * hidden, wd.begin() + (id + 1) * hidden, out.begin() + i * hidden);
    }
    Shape out_shape = std::move(out_prefix);
    out_shape.push_back(hidden);
    return make_result(std::move(out_shape), std::move(out), {&weight}, [id_copy, hidden](Node& self) {
      Real* gw = parent_grad(self, 0);
      if (!gw)
        return;
      for (size_t i = 0; i < id_copy->size(); ++i) {
        Real* row = gw + (*id_copy)[i] * hidden;
        const Real* g = self.grad.data() + i * hidden;
        for (int64_t j = 0; j < hidden; ++j)
          row[j] += g[j];
      }
    });
  }

  Tensor dropout(const Tensor& x, Real p, Rng& rng, bool training) {
    require_defined(x, "dropout");
    if (p < 0 || p >= 1)
      throw std::invalid_argument("dropout: p must be in [0, 1)");
    if (!training || p == 0)
      return x;
    const Real keep_scale = Real(1) / (Real(1) - p);
    auto keep = std::make_shared<std::vector<Real>>(x.numel());
    std::vector<Real> out(x.numel());
    const auto xd = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) {
      (*keep)[i] = rng.uniform() >= p ? keep_scale : Real(0);
      out[i] = xd[i] * (*keep)[i];
    }
    return make_result(x.shape(), std::move(out), {&x}, [keep](Node& self) {
      if (Real* gx = parent_grad(self, 0))
        for (size_t i = 0; i < self.grad.size(); ++i)
          gx[i] += self.grad[i] * (*keep)[i];
    });
  }

  Tensor custom_op(Shape shape,
                   std::vector<Real> data,
                   const std::vector<Tensor>& inputs,
                   std::function<void(detail::Node&)> backward) {
    if (seqforge::numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("custom_op: data size does not match shape " + shape_str(shape));
    return make_result(std::move(shape), std::move(data), inputs, std::move(backward));
  }

  Real* input_grad(detail::Node& self, size_t i) { return parent_grad(self, i); }

  Tensor sum(const Tensor& x) {
    require_defined(x, "sum");
    double total = 0;
    for (Real v : x.data())
      total += v;
    return make_result({}, {static_cast<Real>(total)}, {&x}, [](Node& self) {
      if (Real* gx = parent_grad(self, 0)) {
        const Real g = self.grad[0];
        const size_t n = self.parents[0]->data.size();
        for (size_t i = 0; i < n; ++i)
          gx[i] += g;
      }
    });
  }

  Tensor mean(const Tensor& x) {
    if (x.numel() == 0)
      throw ShapeError("mean of empty tensor");
    return scale(sum(x), Real(1) / static_cast<Real>(x.numel()));
  }

  Tensor cross_entropy_label_smoothed(const Tensor& logits,
                                      std::span<const int32_t> targets,
                                      Real smoothing,
                                      int32_t pad_id) {
    require_defined(logits, "cross_entropy");
    if (logits.rank() != 2)
      throw ShapeError("cross_entropy: logits must be [N, V]");
    if (smoothing < 0 || smoothing > 1)
      throw std::invalid_argument("cross_entropy: smoothing must be in [0, 1]");
    const int64_t rows = logits.dim(0), vocab = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != rows)
      throw ShapeError("cross_entropy: target count does not match rows");
    auto tgt = std::make_shared<std::vector<int32_t>>(targets.begin(), targets.end());
    int64_t count = 0;
    for (int32_t t : *tgt) {
      if (t == pad_id)
        continue;
      if (t < 0 || t >= vocab)
        throw std::out_of_range("cross_entropy: target id out of range");
      ++count;
    }
    if (count == 0)
      throw std::invalid_argument("cross_entropy: every position is padding");

    const auto ld = logits.data();
    auto lse = std::make_shared<std::vector<double>>(rows, 0.0);
    double total = 0;
    for (int64_t r = 0; r < rows; ++r) {
      if ((*tgt)[r] == pad_id)
        continue;
      const Real* row = ld.data() + r * vocab;
      const Real max_value = *std::max_element(row, row + vocab);
      double denom = 0, row_sum = 0;
      for (int64_t j = 0; j < vocab; ++j) {
        denom += std::exp(double(row[j]) - max_value);
        row_sum += row[j];
      }
      const double log_z = max_value + std::log(denom);
      (*lse)[r] = log_z;
      const double nll_target = log_z - row[(*tgt)[r]];
      const double mean_nll = log_z - row_sum / vocab;
      total += (1.0 - smoothing) * nll_target + smoothing * mean_nll;
    }
    const double norm = 1.0 / static_cast<double>(count);
    return make_result({}, {static_cast<Real>(total * norm)}, {&logits},
                       [rows, vocab, tgt, lse, smoothing, pad_id, norm](Node& self) {
      Real* gx = parent_grad(self, 0);
      if (!gx)
        return;
      const double g = self.grad[0] * norm;
      const Real* ld = self.parents[0]->data.data();
      const double uniform_share = static_cast<double>(smoothing) / vocab;
      for (int64_t r = 0; r < rows; ++r) {
        const int32_t t = (*tgt)[r];
        if (t == pad_id)
          continue;
        const double log_z = (*lse)[r];
        for (int64_t j = 0; j < vocab; ++j) {
          double d = std::exp(double(ld[r * vocab + j]) - log_z) - uniform_share;
          if (j == t)
            d -= 1.0 - smoothing;
          gx[r * vocab + j] += static_cast<Real>(g * d);
        }
      }
    });
  }

}  // namespace seqforge
