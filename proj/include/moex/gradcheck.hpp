#pragma once

#include "moex/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace moex {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  double max_abs_error = 0;
  Index checked = 0;
};

/// Relative error with a floor on the denominator, so entries that are both
/// near zero are judged on absolute difference.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, perturbing every element of every leaf. The function must
/// rebuild its graph from the leaves on each call.
inline GradCheckResult check_gradients(const std::string& name, std::vector<Var<double>> leaves,
                                       const std::function<Var<double>(const std::vector<Var<double>>&)>& f,
                                       double step = 1e-4) {
  for (auto& l : leaves) l.zero_grad();
  Var<double> root = f(leaves);
  backward(root);

  GradCheckResult result{name, 0, 0, 0};
  for (auto& leaf : leaves) {
    if (!leaf.requires_grad()) continue;
    const Tensor4<double> analytic = leaf.grad();
    auto& v = leaf.mutable_value();
    for (Index i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + step;
      const double up = f(leaves).value().item();
      v[i] = orig - step;
      const double down = f(leaves).value().item();
      v[i] = orig;
      const double numeric = (up - down) / (2 * step);
      result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[i], numeric));
      result.max_abs_error = std::max(result.max_abs_error, std::abs(analytic[i] - numeric));
      ++result.checked;
    }
  }
  return result;
}

}  // namespace moex
