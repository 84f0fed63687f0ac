#pragma once

#include "pfn/tensor.hpp"

#include <span>
#include <type_traits>
#include <vector>

namespace pfn {

/// Pass as `padding` to conv2d to request size-preserving padding (odd kernels only).
inline constexpr int kSamePadding = -1;

// --- Convolution and resampling -------------------------------------------

/// 2-D cross-correlation. weight is (Cout, Cin, k, k); bias is (1, Cout, 1, 1) or
/// an empty-channel tensor for no bias.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias, int stride = 1, int padding = kSamePadding);

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, int stride = 1,
                      int padding = kSamePadding);

/// 2x2 mean pooling, stride 2. Requires even H and W.
template <typename Scalar>
Tensor<Scalar> avg_pool2(const Tensor<Scalar>& input);

/// Bilinear resize with half-pixel centers, no corner alignment, clamped borders.
template <typename Scalar>
Tensor<Scalar> bilinear_resample(const Tensor<Scalar>& input, int out_h, int out_w);

/// Bilinear sampling of `source` at per-pixel coordinates (pixel units, pixel
/// centers at integers). Coordinates are clamped to the frame; the gradient with
/// respect to a clamped coordinate is zero. xs/ys are (N, 1, Ho, Wo).
template <typename Scalar>
Tensor<Scalar> grid_sample(const Tensor<Scalar>& source, const Tensor<Scalar>& xs,
                           const Tensor<Scalar>& ys);

/// Mean over a window x window neighbourhood, normalised by the number of
/// in-frame cells (no padding values enter the mean).
template <typename Scalar>
Tensor<Scalar> local_mean(const Tensor<Scalar>& input, int window);

enum class Axis { X, Y };

/// Forward difference along width (X: out[..., x] = in[..., x+1] - in[..., x],
/// W shrinks by one) or height (Y).
template <typename Scalar>
Tensor<Scalar> spatial_diff(const Tensor<Scalar>& input, Axis axis);

// --- Channel plumbing -------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> concat_channels(std::span<const Tensor<Scalar>> inputs);

template <typename Scalar>
Tensor<Scalar> concat_channels(std::initializer_list<Tensor<Scalar>> inputs) {
  std::vector<Tensor<Scalar>> v(inputs);
  return concat_channels(std::span<const Tensor<Scalar>>(v));
}

template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& input, int begin, int count);

/// out[:, c] = sum_i weights[i, c] * inputs[i][:, c]. weights is (sources, C, 1, 1).
template <typename Scalar>
Tensor<Scalar> channel_weighted_sum(std::span<const Tensor<Scalar>> inputs,
                                    const Tensor<Scalar>& weights);

// --- Pointwise --------------------------------------------------------------
// Binary ops broadcast dimensions of extent 1.

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, std::type_identity_t<Scalar> s);
template <typename Scalar>
Tensor<Scalar> mul_scalar(const Tensor<Scalar>& a, std::type_identity_t<Scalar> s);
/// s / a
template <typename Scalar>
Tensor<Scalar> rdiv_scalar(std::type_identity_t<Scalar> s, const Tensor<Scalar>& a);

template <typename Scalar>
Tensor<Scalar> abs(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x);
/// Gradient passes only where lo < x < hi.
template <typename Scalar>
Tensor<Scalar> clamp(const Tensor<Scalar>& x, std::type_identity_t<Scalar> lo, std::type_identity_t<Scalar> hi);
/// exp(-x)
template <typename Scalar>
Tensor<Scalar> exp_neg(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> sqrt(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> sin(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> cos(const Tensor<Scalar>& x);

// --- Reductions -------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sum_all(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> mean_all(const Tensor<Scalar>& x);
/// (N, C, H, W) -> (N, C, 1, 1)
template <typename Scalar>
Tensor<Scalar> mean_spatial(const Tensor<Scalar>& x);
/// (N, C, H, W) -> (N, 1, H, W)
template <typename Scalar>
Tensor<Scalar> mean_channels(const Tensor<Scalar>& x);

template <typename Scalar>
struct MinResult {
  Tensor<Scalar> value;
  std::vector<int> argmin;  // per element, index of the winning source
};

/// Per-element minimum across same-shape tensors. Ties go to the earliest
/// source; the gradient flows only to the winner.
template <typename Scalar>
MinResult<Scalar> min_over_list(std::span<const Tensor<Scalar>> inputs);

/// Mean pixel cross-entropy of channel-softmax(logits) against integer labels
/// (N*H*W, NCHW order without channel). Pixels equal to ignore_label are skipped.
template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels,
                                     int ignore_label);

// --- Operators --------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return div(a, b); }
template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, std::type_identity_t<Scalar> s) { return add_scalar(a, s); }
template <typename Scalar>
Tensor<Scalar> operator+(std::type_identity_t<Scalar> s, const Tensor<Scalar>& a) { return add_scalar(a, s); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, std::type_identity_t<Scalar> s) { return add_scalar(a, -s); }
template <typename Scalar>
Tensor<Scalar> operator-(std::type_identity_t<Scalar> s, const Tensor<Scalar>& a) { return add_scalar(mul_scalar(a, Scalar(-1)), s); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a) { return mul_scalar(a, Scalar(-1)); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, std::type_identity_t<Scalar> s) { return mul_scalar(a, s); }
template <typename Scalar>
Tensor<Scalar> operator*(std::type_identity_t<Scalar> s, const Tensor<Scalar>& a) { return mul_scalar(a, s); }
template <typename Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, std::type_identity_t<Scalar> s) { return mul_scalar(a, Scalar(1) / s); }
template <typename Scalar>
Tensor<Scalar> operator/(std::type_identity_t<Scalar> s, const Tensor<Scalar>& a) { return rdiv_scalar(s, a); }

}  // namespace pfn
