#pragma once

#include "pfn/tensor.hpp"

#include <cmath>
#include <random>

namespace pfn {

/// (cout, cin, k, k) weight drawn from uniform(+-sqrt(6 / fan_in)).
template <typename Scalar>
Tensor<Scalar> uniform_conv_weight(std::mt19937_64& rng, int cout, int cin, int k) {
  const Shape ws{cout, cin, k, k};
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const double bound = std::sqrt(6.0 / double(cin * k * k));
  Array<Scalar> w(ws.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = Scalar(bound * dist(rng));
  return Tensor<Scalar>(ws, std::move(w));
}

}  // namespace pfn
