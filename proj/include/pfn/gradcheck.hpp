#pragma once

#include "pfn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace pfn {

struct GradCheckOptions {
  double step = 1e-6;
  // Magnitudes below this are compared absolutely rather than relatively.
  double floor = 1e-6;
  // Elements checked per leaf; <= 0 means all.
  Eigen::Index max_elements = 0;
};

struct GradCheckResult {
  double max_rel_error = 0;
  Eigen::Index checked = 0;
  std::string worst;  // "leaf[index]: analytic vs numeric"
};

/// Central finite differences against the reverse pass.
///
/// `loss` must rebuild the graph from the leaves on every call and return a
/// scalar. Only the forward path is used for the numeric side.
template <typename LossFn>
GradCheckResult check_gradients(std::span<Tensor<double>> leaves, LossFn&& loss,
                                const GradCheckOptions& opts = {}) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  loss().backward();
  std::vector<Array<double>> analytic;
  for (auto& leaf : leaves) {
    analytic.push_back(leaf.has_grad() ? leaf.grad() : Array<double>::Zero(leaf.size()));
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    const Eigen::Index n = leaf.size();
    const Eigen::Index stride =
        opts.max_elements > 0 && n > opts.max_elements ? (n + opts.max_elements - 1) / opts.max_elements : 1;
    for (Eigen::Index i = 0; i < n; i += stride) {
      const double saved = leaf.value()[i];
      leaf.mutable_value()[i] = saved + opts.step;
      const double up = loss().item();
      leaf.mutable_value()[i] = saved - opts.step;
      const double down = loss().item();
      leaf.mutable_value()[i] = saved;
      const double numeric = (up - down) / (2 * opts.step);
      const double a = analytic[li][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.checked;
      if (!(rel <= result.max_rel_error)) {
        result.max_rel_error = std::isnan(rel) ? std::numeric_limits<double>::infinity() : rel;
        result.worst = "leaf" + std::to_string(li) + "[" + std::to_string(i) +
                       "]: analytic " + std::to_string(a) + " vs numeric " + std::to_string(numeric);
      }
    }
  }
  return result;
}

}  // namespace pfn
