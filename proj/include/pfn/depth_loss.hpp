#pragma once

#include "pfn/tensor.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace pfn {

struct CameraIntrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;

  void validate() const;
  Eigen::Matrix3d matrix() const;
};

/// Maps target-camera coordinates into the source camera: P_src = R P_tgt + t.
struct RigidPose {
  Eigen::Vector3d rotation = Eigen::Vector3d::Zero();  // axis-angle, radians
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidPose identity() { return {}; }
  static RigidPose from_matrix(const Eigen::Matrix4d& m);
  Eigen::Matrix3d rotation_matrix() const;
  Eigen::Matrix4d matrix() const;
  RigidPose inverse() const;
  /// (this * other) applies `other` first.
  RigidPose operator*(const RigidPose& other) const;
};

struct DepthLossConfig {
  double alpha = 0.85;  // weight of the L1 term in the photometric loss
  double gamma = 1e-3;  // smoothness weight
  double min_depth = 0.1;
  double max_depth = 100.0;
  int ssim_window = 3;

  void validate() const;
};

/// Pose batch as an (N, 6, 1, 1) tensor: axis-angle then translation.
template <typename Scalar>
Tensor<Scalar> pose_tensor(std::span<const RigidPose> poses);

/// Row-major 3x3 rotation entries R[i][j] as (N, 1, 1, 1) tensors, from the
/// axis-angle part of a pose tensor. Uses the Rodrigues series, accurate to
/// ~1e-7 for |angle| <= pi/2 and exactly the identity at zero.
template <typename Scalar>
std::vector<Tensor<Scalar>> rotation_entries(const Tensor<Scalar>& pose);

/// Sigmoid output in (0, 1) -> disparity in [1/max_depth, 1/min_depth].
template <typename Scalar>
Tensor<Scalar> sigmoid_to_disparity(const Tensor<Scalar>& x, const DepthLossConfig& cfg);

template <typename Scalar>
Tensor<Scalar> sigmoid_to_depth(const Tensor<Scalar>& x, const DepthLossConfig& cfg);

template <typename Scalar>
struct Projection {
  Tensor<Scalar> xs, ys;  // source pixel coordinates, (N, 1, H, W)
  Tensor<Scalar> valid;   // 1 where the point is in front of the source camera and inside its frame
};

/// Where each target pixel lands in the source frame, given target depth.
template <typename Scalar>
Projection<Scalar> project_to_source(const Tensor<Scalar>& depth, const Tensor<Scalar>& pose,
                                     const CameraIntrinsics& k);

template <typename Scalar>
struct WarpResult {
  Tensor<Scalar> warped;
  Tensor<Scalar> valid;
};

/// Inverse warp of `source` into the target view. pose is (N, 6, 1, 1).
template <typename Scalar>
WarpResult<Scalar> warp(const Tensor<Scalar>& source, const Tensor<Scalar>& depth,
                        const Tensor<Scalar>& pose, const CameraIntrinsics& k);

template <typename Scalar>
WarpResult<Scalar> warp(const Tensor<Scalar>& source, const Tensor<Scalar>& depth, const RigidPose& pose,
                        const CameraIntrinsics& k);

/// Per-pixel, per-channel SSIM clipped to [-1, 1].
template <typename Scalar>
Tensor<Scalar> ssim(const Tensor<Scalar>& a, const Tensor<Scalar>& b, int window = 3);

/// alpha * |a - b| + (1 - alpha) * (1 - SSIM) / 2, averaged over channels: (N, 1, H, W).
template <typename Scalar>
Tensor<Scalar> photometric_loss(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const DepthLossConfig& cfg);

template <typename Scalar>
struct ReprojectionResult {
  Tensor<Scalar> loss_map;  // L_warp * automask * any-valid, (N, 1, H, W)
  Tensor<Scalar> automask;  // constant 0/1
  Tensor<Scalar> valid;     // constant 0/1: some source has a valid projection
  Tensor<Scalar> min_loss;  // unmasked min over sources (invalid samples at 1e3)
  std::vector<int> best_source;
};

/// Min over sources of warped losses, auto-masked against the unwarped ones.
/// `valid` may be empty (all pixels valid) or hold one mask per warped source.
template <typename Scalar>
ReprojectionResult<Scalar> min_reprojection_automask(const Tensor<Scalar>& target,
                                                     std::span<const Tensor<Scalar>> sources,
                                                     std::span<const Tensor<Scalar>> warped,
                                                     std::span<const Tensor<Scalar>> valid,
                                                     const DepthLossConfig& cfg);

/// Edge-aware smoothness of mean-normalised disparity, averaged over pixels.
template <typename Scalar>
Tensor<Scalar> smoothness_loss(const Tensor<Scalar>& disparity, const Tensor<Scalar>& image);

template <typename Scalar>
struct DepthLossResult {
  Tensor<Scalar> total;
  double appearance = 0;  // mean over scales of the masked reprojection term
  double smoothness = 0;  // mean over scales of the raw smoothness term
  double automask_fraction = 0;  // finest scale, fraction of pixels kept
  double photometric = 0;  // finest scale, unmasked min reprojection error over validly projected pixels
  std::vector<double> appearance_per_scale;
};

/// Multi-scale self-supervised objective. predictions are sigmoid outputs,
/// finest first; poses[i] is the (N, 6, 1, 1) target->sources[i] transform.
template <typename Scalar>
DepthLossResult<Scalar> total_loss(std::span<const Tensor<Scalar>> predictions, const Tensor<Scalar>& target,
                                   std::span<const Tensor<Scalar>> sources,
                                   std::span<const Tensor<Scalar>> poses, const CameraIntrinsics& k,
                                   const DepthLossConfig& cfg);

/// Small pose regressor over a concatenated (target, source) pair.
template <typename Scalar>
class PoseHead {
 public:
  PoseHead(int image_channels, std::vector<int> widths, std::uint64_t seed);

  std::vector<Parameter<Scalar>>& parameters() { return params_; }
  const std::vector<Parameter<Scalar>>& parameters() const { return params_; }
  /// (N, 6, 1, 1) axis-angle + translation.
  Tensor<Scalar> forward(const Tensor<Scalar>& target, const Tensor<Scalar>& source) const;

  static constexpr double kOutputScale = 0.01;

 private:
  std::vector<Parameter<Scalar>> params_;
};

extern template class PoseHead<float>;
extern template class PoseHead<double>;

}  // namespace pfn
