#include "pfn/optim.hpp"

#include <cmath>

namespace pfn {

template <typename Scalar>
void adam_step(std::span<Parameter<Scalar>> params, double lr, const AdamOptions& opts) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad() && p.tensor.size() > 0) {
      throw UsageError("adam_step: parameter '" + p.name + "' has no gradient");
    }
  }
  for (auto& p : params) {
    if (p.tensor.size() == 0) continue;
    ++p.step_count;
    const Scalar b1 = Scalar(opts.beta1);
    const Scalar b2 = Scalar(opts.beta2);
    const auto& g = p.tensor.grad();
    p.adam_m = b1 * p.adam_m + (1 - b1) * g;
    p.adam_v = b2 * p.adam_v + (1 - b2) * g.square();
    const double t = double(p.step_count);
    const Scalar bc1 = Scalar(1.0 - std::pow(opts.beta1, t));
    const Scalar bc2 = Scalar(1.0 - std::pow(opts.beta2, t));
    p.tensor.mutable_value() -=
        Scalar(lr) * (p.adam_m / bc1) / ((p.adam_v / bc2).sqrt() + Scalar(opts.eps));
  }
}

template <typename Scalar>
double global_grad_norm(std::span<const Parameter<Scalar>> params) {
  double sq = 0;
  for (const auto& p : params) {
    if (p.tensor.has_grad()) sq += p.tensor.grad().template cast<double>().square().sum();
  }
  return std::sqrt(sq);
}

template <typename Scalar>
double clip_global_grad_norm(std::span<Parameter<Scalar>> params, double max_norm) {
  const double norm = global_grad_norm(std::span<const Parameter<Scalar>>(params.data(), params.size()));
  if (norm > max_norm) {
    const Scalar scale = Scalar(max_norm / norm);
    for (auto& p : params) {
      if (p.tensor.has_grad()) p.tensor.mutable_grad() *= scale;
    }
  }
  return norm;
}

template <typename Scalar>
void zero_grad(std::span<Parameter<Scalar>> params) {
  for (auto& p : params) p.tensor.zero_grad();
}

#define PFN_INSTANTIATE_OPTIM(S)                                                        \
  template void adam_step(std::span<Parameter<S>>, double, const AdamOptions&);         \
  template double clip_global_grad_norm(std::span<Parameter<S>>, double);               \
  template double global_grad_norm(std::span<const Parameter<S>>);                      \
  template void zero_grad(std::span<Parameter<S>>);

PFN_INSTANTIATE_OPTIM(float)
PFN_INSTANTIATE_OPTIM(double)

}  // namespace pfn
