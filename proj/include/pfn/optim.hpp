#pragma once

#include "pfn/tensor.hpp"

#include <span>

namespace pfn {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update per parameter. Grads are left untouched.
/// Throws UsageError if a parameter has no gradient.
template <typename Scalar>
void adam_step(std::span<Parameter<Scalar>> params, double lr, const AdamOptions& opts = {});

/// Rescales all grads so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename Scalar>
double clip_global_grad_norm(std::span<Parameter<Scalar>> params, double max_norm = 1.0);

template <typename Scalar>
double global_grad_norm(std::span<const Parameter<Scalar>> params);

template <typename Scalar>
void zero_grad(std::span<Parameter<Scalar>> params);

}  // namespace pfn
