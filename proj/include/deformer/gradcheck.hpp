#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "deformer/ops.hpp"
#include "deformer/tensor.hpp"

namespace deformer {

// Compares analytic gradients against central finite differences for a
// deterministic scalar-valued function of the given tensors (dropout must be
// disabled). Returns the max over all coordinates of
// |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
template <typename S>
double finite_difference_check(const std::function<Tensor<S>(const std::vector<Tensor<S>>&)>& f,
                               std::vector<Tensor<S>>& point, double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite_difference_check: eps must be positive");

  for (auto& t : point) t.zero_grad();
  GradTape<S>::instance().clear();
  Tensor<S> loss = f(point);
  backward(loss);

  std::vector<Mat<S>> analytic;
  analytic.reserve(point.size());
  for (auto& t : point) analytic.push_back(t.grad());

  double max_rel_error = 0.0;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < point.size(); ++i) {
    if (!point[i].requires_grad()) continue;
    Mat<S>& values = point[i].mutable_value();
    for (Index r = 0; r < values.rows(); ++r) {
      for (Index c = 0; c < values.cols(); ++c) {
        const S original = values(r, c);
        values(r, c) = original + static_cast<S>(eps);
        const double plus = static_cast<double>(f(point).value()(0, 0));
        values(r, c) = original - static_cast<S>(eps);
        const double minus = static_cast<double>(f(point).value()(0, 0));
        values(r, c) = original;
        const double numeric = (plus - minus) / (2.0 * eps);
        const double exact = static_cast<double>(analytic[i](r, c));
        const double rel =
            std::abs(exact - numeric) / std::max(1e-12, std::abs(exact) + std::abs(numeric));
        max_rel_error = std::max(max_rel_error, rel);
      }
    }
  }
  return max_rel_error;
}

// Per-coordinate step ladder for full-model checks. No single eps suits every
// coordinate: large steps cross relu kinks, small steps push ~1e-8 gradients
// into the fd noise floor. Each coordinate is accepted at its best-conditioned
// step; a wrong gradient formula fails at every step. Returns the max over
// coordinates of the min-over-ladder relative error.
template <typename S>
double finite_difference_check_adaptive(const std::function<Tensor<S>(const std::vector<Tensor<S>>&)>& f,
                                        std::vector<Tensor<S>>& point, double target = 1e-6) {
  static constexpr double kLadder[] = {1e-4, 1e-5, 1e-3, 1e-6, 1e-2};

  for (auto& t : point) t.zero_grad();
  GradTape<S>::instance().clear();
  Tensor<S> loss = f(point);
  backward(loss);

  std::vector<Mat<S>> analytic;
  analytic.reserve(point.size());
  for (auto& t : point) analytic.push_back(t.grad());

  double max_rel_error = 0.0;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < point.size(); ++i) {
    if (!point[i].requires_grad()) continue;
    Mat<S>& values = point[i].mutable_value();
    for (Index r = 0; r < values.rows(); ++r) {
      for (Index c = 0; c < values.cols(); ++c) {
        const S original = values(r, c);
        const double exact = static_cast<double>(analytic[i](r, c));
        double best = std::numeric_limits<double>::infinity();
        for (double eps : kLadder) {
          values(r, c) = original + static_cast<S>(eps);
          const double plus = static_cast<double>(f(point).value()(0, 0));
          values(r, c) = original - static_cast<S>(eps);
          const double minus = static_cast<double>(f(point).value()(0, 0));
          values(r, c) = original;
          const double numeric = (plus - minus) / (2.0 * eps);
          best = std::min(best, std::abs(exact - numeric) /
                                    std::max(1e-12, std::abs(exact) + std::abs(numeric)));
          if (best < target) break;
        }
        max_rel_error = std::max(max_rel_error, best);
      }
    }
  }
  return max_rel_error;
}

}  // namespace deformer
