#include "seqforge/distill_loss.h"

#include <cmath>
#include <limits>
#include <string>

namespace seqforge {

  namespace {

    constexpr double kProbFloor = 1e-12;

    void log_softmax_row(const Real* x, int64_t v, double inv_tau, std::vector<double>& out) {
      out.resize(v);
      double top = -std::numeric_limits<double>::infinity();
      for (int64_t i = 0; i < v; ++i)
        top = std::max(top, x[i] * inv_tau);
      double z = 0;
      for (int64_t i = 0; i < v; ++i)
        z += std::exp(x[i] * inv_tau - top);
      const double lz = top + std::log(z);
      for (int64_t i = 0; i < v; ++i)
        out[i] = x[i] * inv_tau - lz;
    }

    void check_pair(const DistillPair& p, int min_rank, const char* what) {
      if (!p.teacher.defined() || !p.student.defined())
        throw ShapeError(std::string(what) + ": undefined tensor");
      if (p.teacher.shape() != p.student.shape())
        throw ShapeError(std::string(what) + ": teacher " + shape_str(p.teacher.shape()) + " vs student " +
                         shape_str(p.student.shape()));
      if (p.teacher.rank() < min_rank)
        throw ShapeError(std::string(what) + ": rank too small");
      if (static_cast<int64_t>(p.lengths.size()) != p.teacher.dim(0))
        throw ShapeError(std::string(what) + ": one length per batch row expected");
    }

  }  // namespace

  Tensor logit_distill_loss(const Tensor& teacher_logits,
                            const Tensor& student_logits,
                            double tau,
                            std::span<const int32_t> targets,
                            int32_t pad_id) {
    if (!(tau > 0))
      throw std::invalid_argument("temperature must be positive");
    if (teacher_logits.shape() != student_logits.shape())
      throw ShapeError("logit distillation: teacher " + shape_str(teacher_logits.shape()) + " vs student " +
                       shape_str(student_logits.shape()));
    const int64_t v = student_logits.shape().back();
    const int64_t rows = student_logits.numel() / v;
    if (!targets.empty() && static_cast<int64_t>(targets.size()) != rows)
      throw ShapeError("logit distillation: one target per row expected");

    const double inv_tau = 1.0 / tau;
    const auto t = teacher_logits.data();
    const auto s = student_logits.data();
    std::vector<double> lp_t, lp_s;
    // d loss / d student logit, before the upstream gradient.
    auto grad = std::make_shared<std::vector<double>>(student_logits.numel(), 0.0);
    int64_t valid = 0;
    for (int64_t r = 0; r < rows; ++r)
      valid += targets.empty() || targets[r] != pad_id;
    if (valid == 0)
      throw std::invalid_argument("logit distillation: every row is padding");
    double total = 0;
    const double row_scale = tau * tau / static_cast<double>(valid);
    for (int64_t r = 0; r < rows; ++r) {
      if (!targets.empty() && targets[r] == pad_id)
        continue;
      log_softmax_row(t.data() + r * v, v, inv_tau, lp_t);
      log_softmax_row(s.data() + r * v, v, inv_tau, lp_s);
      double kl = 0;
      for (int64_t i = 0; i < v; ++i) {
        const double p = std::exp(lp_t[i]);
        if (p > 0)
          kl += p * (lp_t[i] - lp_s[i]);
        // d/ds_i of tau^2 * KL = tau * (q_i - p_i)
        (*grad)[r * v + i] = row_scale * inv_tau * (std::exp(lp_s[i]) - p);
      }
      total += kl;
    }
    const double loss = total * row_scale;
    return custom_op({}, {static_cast<Real>(loss)}, {student_logits}, [grad](detail::Node& self) {
      Real* gs = input_grad(self, 0);
      if (!gs)
        return;
      const double up = self.grad[0];
      for (size_t i = 0; i < grad->size(); ++i)
        gs[i] += static_cast<Real>(up * (*grad)[i]);
    });
  }

  Tensor hidden_mse_loss(const std::vector<DistillPair>& pairs) {
    if (pairs.empty())
      throw std::invalid_argument("hidden distillation: no layer pairs");
    std::vector<Tensor> students;
    std::vector<std::shared_ptr<std::vector<double>>> grads;
    double total = 0;
    int64_t count = 0;
    for (const auto& p : pairs) {
      check_pair(p, 3, "hidden distillation");
      const int64_t b = p.teacher.dim(0), t = p.teacher.dim(1), inner = p.teacher.numel() / (b * t);
      for (int64_t i = 0; i < b; ++i)
        count += std::min(p.lengths[i], t) * inner;
    }
    if (count == 0)
      throw std::invalid_argument("hidden distillation: no valid positions");
    for (const auto& p : pairs) {
      const int64_t b = p.teacher.dim(0), t = p.teacher.dim(1), inner = p.teacher.numel() / (b * t);
      const auto td = p.teacher.data();
      const auto sd = p.student.data();
      auto g = std::make_shared<std::vector<double>>(p.student.numel(), 0.0);
      for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < std::min(p.lengths[i], t); ++j)
          for (int64_t k = 0; k < inner; ++k) {
            const int64_t at = (i * t + j) * inner + k;
            const double d = double(sd[at]) - double(td[at]);
            total += d * d;
            (*g)[at] = 2 * d / static_cast<double>(count);
          }
      students.push_back(p.student);
      grads.push_back(std::move(g));
    }
    return custom_op({}, {static_cast<Real>(total / static_cast<double>(count))}, students,
                     [grads](detail::Node& self) {
                       const double up = self.grad[0];
                       for (size_t n = 0; n < grads.size(); ++n) {
                         Real* gs = input_grad(self, n);
                         if (!gs)
                           continue;
                         for (size_t i = 0; i < grads[n]->size(); ++i)
                           gs[i] += static_cast<Real>(up * (*grads[n])[i]);
                       }
                     });
  }

  Tensor attention_kl_loss(const std::vector<DistillPair>& pairs) {
    if (pairs.empty())
      throw std::invalid_argument("attention distillation: no layer pairs");
    struct RowRef {
      size_t pair;
      int64_t offset;
      int64_t width;
    };
    std::vector<RowRef> rows;
    for (size_t n = 0; n < pairs.size(); ++n) {
      const auto& p = pairs[n];
      check_pair(p, 4, "attention distillation");
      const int64_t b = p.teacher.dim(0), heads = p.teacher.dim(1), tq = p.teacher.dim(2), tk = p.teacher.dim(3);
      const auto td = p.teacher.data();
      for (int64_t i = 0; i < b; ++i)
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t q = 0; q < std::min(p.lengths[i], tq); ++q) {
            const int64_t offset = ((i * heads + h) * tq + q) * tk;
            double mass = 0;
            for (int64_t k = 0; k < tk; ++k)
              mass += td[offset + k];
            if (mass > 0)
              rows.push_back({n, offset, tk});
          }
    }
    if (rows.empty())
      throw std::invalid_argument("attention distillation: no valid rows");

    std::vector<std::shared_ptr<std::vector<double>>> grads;
    std::vector<Tensor> students;
    for (const auto& p : pairs) {
      grads.push_back(std::make_shared<std::vector<double>>(p.student.numel(), 0.0));
      students.push_back(p.student);
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    double total = 0;
    for (const auto& r : rows) {
      const auto td = pairs[r.pair].teacher.data();
      const auto sd = pairs[r.pair].student.data();
      auto& g = *grads[r.pair];
      for (int64_t k = 0; k < r.width; ++k) {
        const double pt = td[r.offset + k];
        if (pt <= 0)
          continue;
        const double ps = sd[r.offset + k];
        const double clamped = std::max(ps, kProbFloor);
        total += pt * (std::log(pt) - std::log(clamped));
        if (ps > kProbFloor)
          g[r.offset + k] = -pt / ps * inv;
      }
    }
    return custom_op({}, {static_cast<Real>(total * inv)}, students, [grads](detail::Node& self) {
      const double up = self.grad[0];
      for (size_t n = 0; n < grads.size(); ++n) {
        Real* gs = input_grad(self, n);
        if (!gs)
          continue;
        for (size_t i = 0; i < grads[n]->size(); ++i)
          gs[i] += static_cast<Real>(up * (*grads[n])[i]);
      }
    });
  }

}  // namespace seqforge
