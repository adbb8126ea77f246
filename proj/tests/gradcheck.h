#pragma once

#include <algorithm>
#include <cmath>
#include <type_traits>
#include <vector>

#include "seqforge/rng.h"
#include "seqforge/tensor.h"

namespace seqforge::testing {

  constexpr bool kShadow64 = std::is_same_v<Real, double>;

  // Finite-difference tolerance for the active storage precision.
  inline double gradcheck_tolerance() {
    return kShadow64 ? 1e-4 : 1e-3;
  }

  inline Tensor random_tensor(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = true) {
    std::vector<Real> values(numel(shape));
    for (auto& v : values)
      v = static_cast<Real>(stddev * rng.normal());
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  // Scalar probe sum(out * w) with fixed random w, so every output element
  // contributes a distinct weight to the gradient.
  inline Tensor probe(const Tensor& out, uint64_t seed = 99) {
    Rng rng(seed);
    return sum(mul(out, random_tensor(out.shape(), rng, 1.0, false)));
  }

  struct GradcheckResult {
    double max_rel_error = 0;
    int checked = 0;
    int worst_leaf = -1;
  };

  // Compares analytic gradients of loss_fn() w.r.t. each leaf against central
  // differences. The error of a leaf is max|fd - analytic| over its checked
  // coordinates divided by the largest magnitude among them; the result is the
  // worst leaf. max_coords > 0 samples that many coordinates per leaf.
  // scale_floor > 0 sets the denominator to at least scale_floor times the
  // largest analytic gradient across all leaves, for leaves whose true
  // gradient is close to zero and dominated by rounding noise.
  template <typename F>
  GradcheckResult gradcheck(std::vector<Tensor> leaves, F&& loss_fn, double eps = 1e-3, int max_coords = -1,
                            uint64_t seed = 7, double scale_floor = 0) {
    for (auto& leaf : leaves)
      leaf.zero_grad();
    Tensor loss = loss_fn();
    loss.backward();
    double global_mag = 0;
    for (auto& leaf : leaves)
      for (Real g : leaf.grad())
        global_mag = std::max(global_mag, std::abs(double(g)));
    const double floor = scale_floor * global_mag;

    GradcheckResult result;
    Rng pick(seed);
    for (size_t li = 0; li < leaves.size(); ++li) {
      auto& leaf = leaves[li];
      const std::vector<Real> analytic(leaf.grad().begin(), leaf.grad().end());
      if (analytic.empty())
        continue;
      std::vector<int64_t> coords;
      const int64_t n = leaf.numel();
      if (max_coords < 0 || n <= max_coords) {
        for (int64_t i = 0; i < n; ++i)
          coords.push_back(i);
      } else {
        for (int i = 0; i < max_coords; ++i)
          coords.push_back(pick.uniform_int(n));
      }
      double max_diff = 0, max_mag = 0;
      for (int64_t i : coords) {
        auto values = leaf.data_mut();
        const Real saved = values[i];
        double plus, minus;
        {
          NoGradGuard guard;
          values[i] = static_cast<Real>(saved + eps);
          plus = loss_fn().item();
          values[i] = static_cast<Real>(saved - eps);
          minus = loss_fn().item();
          values[i] = saved;
        }
        const double fd = (plus - minus) / (2 * eps);
        max_diff = std::max(max_diff, std::abs(fd - analytic[i]));
        max_mag = std::max({max_mag, std::abs(fd), std::abs(double(analytic[i]))});
        ++result.checked;
      }
      max_mag = std::max(max_mag, floor);
      if (max_mag > 0 && max_diff / max_mag > result.max_rel_error) {
        result.max_rel_error = max_diff / max_mag;
        result.worst_leaf = static_cast<int>(li);
      }
    }
    return result;
  }

}  // namespace seqforge::testing
