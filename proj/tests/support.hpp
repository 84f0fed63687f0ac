#pragma once

#include "pfn/tensor.hpp"

#include <random>

namespace pfn::test {

template <typename Scalar = double>
Tensor<Scalar> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Array<Scalar> v(shape.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = Scalar(dist(rng));
  return Tensor<Scalar>(shape, std::move(v));
}

/// Fixed random weighting so sum(out * w) exercises every output element.
template <typename Scalar = double>
Tensor<Scalar> probe_for(const Tensor<Scalar>& t, std::uint64_t seed = 99) {
  return random_tensor<Scalar>(t.shape(), seed, 0.5, 1.5);
}

}  // namespace pfn::test
