#include "pfn/depth_loss.hpp"

#include "pfn/init.hpp"
#include "pfn/ops.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <limits>

namespace pfn {

void CameraIntrinsics::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw ConfigError("intrinsics: focal lengths must be positive");
}

Eigen::Matrix3d CameraIntrinsics::matrix() const {
  Eigen::Matrix3d k;
  k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
  return k;
}

Eigen::Matrix3d RigidPose::rotation_matrix() const {
  const double angle = rotation.norm();
  if (angle == 0) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(angle, rotation / angle).toRotationMatrix();
}

Eigen::Matrix4d RigidPose::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation_matrix();
  m.topRightCorner<3, 1>() = translation;
  return m;
}

RigidPose RigidPose::from_matrix(const Eigen::Matrix4d& m) {
  RigidPose p;
  const Eigen::AngleAxisd aa(Eigen::Matrix3d(m.topLeftCorner<3, 3>()));
  p.rotation = aa.axis() * aa.angle();
  p.translation = m.topRightCorner<3, 1>();
  return p;
}

RigidPose RigidPose::inverse() const {
  const Eigen::Matrix3d rt = rotation_matrix().transpose();
  RigidPose p;
  p.rotation = -rotation;
  p.translation = -(rt * translation);
  return p;
}

RigidPose RigidPose::operator*(const RigidPose& other) const {
  return from_matrix(matrix() * other.matrix());
}

void DepthLossConfig::validate() const {
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("depth loss: alpha must lie in [0, 1]");
  if (!(gamma >= 0)) throw ConfigError("depth loss: gamma must be nonnegative");
  if (!(min_depth > 0 && min_depth < max_depth)) {
    throw ConfigError("depth loss: need 0 < min_depth < max_depth");
  }
  if (ssim_window < 1 || ssim_window % 2 == 0) throw ConfigError("depth loss: ssim_window must be odd");
}

template <typename Scalar>
Tensor<Scalar> pose_tensor(std::span<const RigidPose> poses) {
  Array<Scalar> v(Eigen::Index(poses.size() * 6));
  for (std::size_t i = 0; i < poses.size(); ++i) {
    for (int j = 0; j < 3; ++j) {
      v[Eigen::Index(i * 6 + j)] = Scalar(poses[i].rotation[j]);
      v[Eigen::Index(i * 6 + 3 + j)] = Scalar(poses[i].translation[j]);
    }
  }
  return Tensor<Scalar>(Shape{int(poses.size()), 6, 1, 1}, std::move(v));
}

namespace {

// c[0] + c[1] t + c[2] t^2 + ... by Horner.
template <typename Scalar>
Tensor<Scalar> poly(const Tensor<Scalar>& t, std::initializer_list<double> coeffs) {
  auto it = std::rbegin(coeffs);
  Tensor<Scalar> acc = Tensor<Scalar>::full(t.shape(), Scalar(*it));
  for (++it; it != std::rend(coeffs); ++it) acc = add_scalar(mul(acc, t), Scalar(*it));
  return acc;
}

}  // namespace

template <typename Scalar>
std::vector<Tensor<Scalar>> rotation_entries(const Tensor<Scalar>& pose) {
  if (pose.shape().c != 6 || pose.shape().h != 1 || pose.shape().w != 1) {
    throw ShapeError("pose tensor must be (N, 6, 1, 1), got " + pose.shape().str());
  }
  const Tensor<Scalar> x = slice_channels(pose, 0, 1), y = slice_channels(pose, 1, 1),
                       z = slice_channels(pose, 2, 1);
  const Tensor<Scalar> t2 = add(add(square(x), square(y)), square(z));
  // R = I + A K + B K^2 with A = sin(t)/t, B = (1 - cos t)/t^2 and K^2 = w w^T - t^2 I.
  const Tensor<Scalar> a =
      poly(t2, {1.0, -1.0 / 6, 1.0 / 120, -1.0 / 5040, 1.0 / 362880, -1.0 / 39916800});
  const Tensor<Scalar> b =
      poly(t2, {0.5, -1.0 / 24, 1.0 / 720, -1.0 / 40320, 1.0 / 3628800, -1.0 / 479001600});
  const Tensor<Scalar> diag = sub(Tensor<Scalar>::full(t2.shape(), Scalar(1)), mul(b, t2));
  auto bw = [&](const Tensor<Scalar>& u, const Tensor<Scalar>& v) { return mul(b, mul(u, v)); };
  return {add(diag, bw(x, x)),         sub(bw(x, y), mul(a, z)), add(bw(x, z), mul(a, y)),
          add(bw(x, y), mul(a, z)),    add(diag, bw(y, y)),      sub(bw(y, z), mul(a, x)),
          sub(bw(x, z), mul(a, y)),    add(bw(y, z), mul(a, x)), add(diag, bw(z, z))};
}

template <typename Scalar>
Tensor<Scalar> sigmoid_to_disparity(const Tensor<Scalar>& x, const DepthLossConfig& cfg) {
  const double lo = 1.0 / cfg.max_depth, hi = 1.0 / cfg.min_depth;
  return add_scalar(mul_scalar(x, Scalar(hi - lo)), Scalar(lo));
}

template <typename Scalar>
Tensor<Scalar> sigmoid_to_depth(const Tensor<Scalar>& x, const DepthLossConfig& cfg) {
  return rdiv_scalar(Scalar(1), sigmoid_to_disparity(x, cfg));
}

template <typename Scalar>
Projection<Scalar> project_to_source(const Tensor<Scalar>& depth, const Tensor<Scalar>& pose,
                                     const CameraIntrinsics& k) {
  k.validate();
  const Shape ds = depth.shape();
  if (ds.c != 1) throw ShapeError("depth must have one channel, got " + ds.str());
  if (pose.shape().n != ds.n && pose.shape().n != 1) {
    throw ShapeError("pose batch " + pose.shape().str() + " does not match depth " + ds.str());
  }
  if (!(depth.value() > Scalar(0)).all()) throw ConfigError("warp: depth must be positive");

  Array<Scalar> xn(Eigen::Index(ds.h) * ds.w), yn(xn.size());
  for (int v = 0; v < ds.h; ++v) {
    for (int u = 0; u < ds.w; ++u) {
      xn[Eigen::Index(v) * ds.w + u] = Scalar((u - k.cx) / k.fx);
      yn[Eigen::Index(v) * ds.w + u] = Scalar((v - k.cy) / k.fy);
    }
  }
  const Shape ray{1, 1, ds.h, ds.w};
  const Tensor<Scalar> px = mul(depth, Tensor<Scalar>(ray, std::move(xn)));
  const Tensor<Scalar> py = mul(depth, Tensor<Scalar>(ray, std::move(yn)));
  const Tensor<Scalar>& pz = depth;
  const auto r = rotation_entries(pose);
  auto row = [&](int i) {
    return add(add(add(mul(r[std::size_t(3 * i)], px), mul(r[std::size_t(3 * i + 1)], py)),
                   mul(r[std::size_t(3 * i + 2)], pz)),
               slice_channels(pose, 3 + i, 1));
  };
  const Tensor<Scalar> qx = row(0), qy = row(1), qz = row(2);

  // Points behind (or on) the source camera are invalid; keep their coordinates finite.
  const Scalar eps = Scalar(1e-6);
  const Tensor<Scalar> zs = clamp(qz, eps, std::numeric_limits<Scalar>::max());
  Projection<Scalar> out;
  out.xs = add_scalar(mul_scalar(div(qx, zs), Scalar(k.fx)), Scalar(k.cx));
  out.ys = add_scalar(mul_scalar(div(qy, zs), Scalar(k.fy)), Scalar(k.cy));
  // Sampling is exact inside [0, W-1] x [0, H-1]; the slack absorbs rounding
  // of points that project back onto the border pixel centres.
  Array<Scalar> valid(out.xs.size());
  const Scalar slack = Scalar(1e-3);
  const Scalar xmax = Scalar(ds.w - 1) + slack, ymax = Scalar(ds.h - 1) + slack;
  for (Eigen::Index i = 0; i < valid.size(); ++i) {
    const Scalar x = out.xs.value()[i], y = out.ys.value()[i];
    valid[i] = qz.value()[i] > eps && x >= -slack && x <= xmax && y >= -slack && y <= ymax ? 1 : 0;
  }
  out.valid = Tensor<Scalar>(out.xs.shape(), std::move(valid));
  return out;
}

template <typename Scalar>
WarpResult<Scalar> warp(const Tensor<Scalar>& source, const Tensor<Scalar>& depth, const Tensor<Scalar>& pose,
                        const CameraIntrinsics& k) {
  const Shape ss = source.shape(), ds = depth.shape();
  if (ss.n != ds.n || ss.h != ds.h || ss.w != ds.w) {
    throw ShapeError("warp: source " + ss.str() + " and depth " + ds.str() + " disagree");
  }
  Projection<Scalar> p = project_to_source(depth, pose, k);
  return {grid_sample(source, p.xs, p.ys), p.valid};
}

template <typename Scalar>
WarpResult<Scalar> warp(const Tensor<Scalar>& source, const Tensor<Scalar>& depth, const RigidPose& pose,
                        const CameraIntrinsics& k) {
  std::vector<RigidPose> batch(std::size_t(depth.shape().n), pose);
  return warp(source, depth, pose_tensor<Scalar>(batch), k);
}

template <typename Scalar>
Tensor<Scalar> ssim(const Tensor<Scalar>& a, const Tensor<Scalar>& b, int window) {
  const Scalar c1 = Scalar(0.01 * 0.01), c2 = Scalar(0.03 * 0.03);
  const Tensor<Scalar> mu_a = local_mean(a, window), mu_b = local_mean(b, window);
  const Tensor<Scalar> mu_ab = mul(mu_a, mu_b);
  const Tensor<Scalar> mu_aa = square(mu_a), mu_bb = square(mu_b);
  const Tensor<Scalar> var_a = sub(local_mean(square(a), window), mu_aa);
  const Tensor<Scalar> var_b = sub(local_mean(square(b), window), mu_bb);
  const Tensor<Scalar> cov = sub(local_mean(mul(a, b), window), mu_ab);
  const Tensor<Scalar> num = mul(add_scalar(mul_scalar(mu_ab, Scalar(2)), c1),
                                 add_scalar(mul_scalar(cov, Scalar(2)), c2));
  const Tensor<Scalar> den = mul(add_scalar(add(mu_aa, mu_bb), c1), add_scalar(add(var_a, var_b), c2));
  return clamp(div(num, den), Scalar(-1), Scalar(1));
}

template <typename Scalar>
Tensor<Scalar> photometric_loss(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const DepthLossConfig& cfg) {
  const Scalar alpha = Scalar(cfg.alpha);
  const Tensor<Scalar> l1 = abs(sub(a, b));
  const Tensor<Scalar> dssim = mul_scalar(sub(Tensor<Scalar>::full(Shape{1, 1, 1, 1}, Scalar(1)),
                                              ssim(a, b, cfg.ssim_window)),
                                          Scalar(0.5));
  return mean_channels(add(mul_scalar(l1, alpha), mul_scalar(dssim, Scalar(1) - alpha)));
}

template <typename Scalar>
ReprojectionResult<Scalar> min_reprojection_automask(const Tensor<Scalar>& target,
                                                     std::span<const Tensor<Scalar>> sources,
                                                     std::span<const Tensor<Scalar>> warped,
                                                     std::span<const Tensor<Scalar>> valid,
                                                     const DepthLossConfig& cfg) {
  if (sources.empty() || warped.empty()) throw ConfigError("min reprojection needs at least one source");
  if (!valid.empty() && valid.size() != warped.size()) {
    throw UsageError("min reprojection: one validity mask per warped source required");
  }
  // Out-of-frame samples lose every min; they are masked out afterwards.
  const Scalar invalid_loss = Scalar(1e3);
  std::vector<Tensor<Scalar>> warp_losses;
  for (std::size_t i = 0; i < warped.size(); ++i) {
    Tensor<Scalar> l = photometric_loss(target, warped[i], cfg);
    if (!valid.empty()) {
      const Tensor<Scalar>& m = valid[i];
      l = add(mul(l, m), mul_scalar(sub(Tensor<Scalar>::full(m.shape(), Scalar(1)), m), invalid_loss));
    }
    warp_losses.push_back(l);
  }
  MinResult<Scalar> best = min_over_list(std::span<const Tensor<Scalar>>(warp_losses));

  Array<Scalar> unwarped_min;
  {
    NoGradGuard no_grad;
    for (const auto& s : sources) {
      const Array<Scalar> l = photometric_loss(target, s, cfg).value();
      unwarped_min = unwarped_min.size() ? unwarped_min.min(l).eval() : l;
    }
  }
  const Shape ms = best.value.shape();
  Array<Scalar> any_valid = Array<Scalar>::Ones(ms.size());
  if (!valid.empty()) {
    any_valid.setZero();
    for (const auto& m : valid) any_valid = any_valid.max(m.value());
  }
  Array<Scalar> mask = (best.value.value() < unwarped_min).template cast<Scalar>();

  ReprojectionResult<Scalar> out;
  out.automask = Tensor<Scalar>(ms, mask);
  out.valid = Tensor<Scalar>(ms, any_valid);
  out.loss_map = mul(best.value, Tensor<Scalar>(ms, mask * any_valid));
  out.min_loss = best.value;
  out.best_source = std::move(best.argmin);
  return out;
}

template <typename Scalar>
Tensor<Scalar> smoothness_loss(const Tensor<Scalar>& disparity, const Tensor<Scalar>& image) {
  const Tensor<Scalar> mean =
      clamp(mean_spatial(disparity), Scalar(1e-7), std::numeric_limits<Scalar>::max());
  const Tensor<Scalar> norm = div(disparity, mean);
  auto term = [&](Axis axis) {
    const Tensor<Scalar> dd = abs(spatial_diff(norm, axis));
    const Tensor<Scalar> di = mean_channels(abs(spatial_diff(image, axis)));
    return mean_all(mul(dd, exp_neg(di)));
  };
  return add(term(Axis::X), term(Axis::Y));
}

template <typename Scalar>
DepthLossResult<Scalar> total_loss(std::span<const Tensor<Scalar>> predictions, const Tensor<Scalar>& target,
                                   std::span<const Tensor<Scalar>> sources,
                                   std::span<const Tensor<Scalar>> poses, const CameraIntrinsics& k,
                                   const DepthLossConfig& cfg) {
  cfg.validate();
  if (predictions.empty()) throw UsageError("total_loss: no predictions");
  if (sources.empty() || sources.size() != poses.size()) {
    throw UsageError("total_loss: " + std::to_string(sources.size()) + " source frames but " +
                     std::to_string(poses.size()) + " poses");
  }
  const Shape ts = target.shape();
  DepthLossResult<Scalar> out;
  Tensor<Scalar> total;
  Tensor<Scalar> image = target;
  for (std::size_t a = 0; a < predictions.size(); ++a) {
    const Tensor<Scalar>& pred = predictions[a];
    const Tensor<Scalar> disp = sigmoid_to_disparity(pred, cfg);
    const Tensor<Scalar> disp_full =
        pred.shape().h == ts.h && pred.shape().w == ts.w ? disp : bilinear_resample(disp, ts.h, ts.w);
    const Tensor<Scalar> depth = rdiv_scalar(Scalar(1), disp_full);
    std::vector<Tensor<Scalar>> warped, valid;
    for (std::size_t i = 0; i < sources.size(); ++i) {
      WarpResult<Scalar> w = warp(sources[i], depth, poses[i], k);
      warped.push_back(w.warped);
      valid.push_back(w.valid);
    }
    const ReprojectionResult<Scalar> rep = min_reprojection_automask(
        target, sources, std::span<const Tensor<Scalar>>(warped), std::span<const Tensor<Scalar>>(valid), cfg);
    const Tensor<Scalar> appearance = mean_all(rep.loss_map);

    while (image.shape().h > pred.shape().h) image = avg_pool2(image);
    const Tensor<Scalar> smooth = smoothness_loss(disp, image);
    const Tensor<Scalar> term = add(appearance, mul_scalar(smooth, Scalar(cfg.gamma / double(1 << a))));
    total = a == 0 ? term : add(total, term);

    out.appearance_per_scale.push_back(double(appearance.item()));
    out.appearance += double(appearance.item());
    out.smoothness += double(smooth.item());
    if (a == 0) {
      out.automask_fraction = double(rep.automask.value().mean());
      const auto& v = rep.valid.value();
      const double n_valid = double(v.sum());
      out.photometric = n_valid > 0 ? double((rep.min_loss.value() * v).sum()) / n_valid : 0.0;
    }
  }
  const double count = double(predictions.size());
  out.total = mul_scalar(total, Scalar(1.0 / count));
  out.appearance /= count;
  out.smoothness /= count;
  return out;
}

template <typename Scalar>
PoseHead<Scalar>::PoseHead(int image_channels, std::vector<int> widths, std::uint64_t seed) {
  if (widths.empty()) throw ConfigError("pose head needs at least one stage");
  std::mt19937_64 rng(seed);
  int cin = 2 * image_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::string base = "pose.stage" + std::to_string(i + 1);
    params_.emplace_back(base + ".weight", uniform_conv_weight<Scalar>(rng, widths[i], cin, 3));
    params_.emplace_back(base + ".bias", Tensor<Scalar>::zeros(Shape{1, widths[i], 1, 1}));
    cin = widths[i];
  }
  params_.emplace_back("pose.out.weight", uniform_conv_weight<Scalar>(rng, 6, cin, 1));
  params_.emplace_back("pose.out.bias", Tensor<Scalar>::zeros(Shape{1, 6, 1, 1}));
}

template <typename Scalar>
Tensor<Scalar> PoseHead<Scalar>::forward(const Tensor<Scalar>& target, const Tensor<Scalar>& source) const {
  Tensor<Scalar> x = concat_channels({target, source});
  const std::size_t stages = params_.size() / 2 - 1;
  for (std::size_t i = 0; i < stages; ++i) {
    x = relu(conv2d(x, params_[2 * i].tensor, params_[2 * i + 1].tensor, 2, 1));
  }
  x = conv2d(mean_spatial(x), params_[2 * stages].tensor, params_[2 * stages + 1].tensor);
  return mul_scalar(x, Scalar(kOutputScale));
}

#define PFN_INSTANTIATE_DEPTH(S)                                                                       \
  template Tensor<S> pose_tensor<S>(std::span<const RigidPose>);                                       \
  template std::vector<Tensor<S>> rotation_entries(const Tensor<S>&);                                  \
  template Tensor<S> sigmoid_to_disparity(const Tensor<S>&, const DepthLossConfig&);                   \
  template Tensor<S> sigmoid_to_depth(const Tensor<S>&, const DepthLossConfig&);                     \
  template Projection<S> project_to_source(const Tensor<S>&, const Tensor<S>&, const CameraIntrinsics&); \
  template WarpResult<S> warp(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,                    \
                              const CameraIntrinsics&);                                                \
  template WarpResult<S> warp(const Tensor<S>&, const Tensor<S>&, const RigidPose&,                    \
                              const CameraIntrinsics&);                                                \
  template Tensor<S> ssim(const Tensor<S>&, const Tensor<S>&, int);                                    \
  template Tensor<S> photometric_loss(const Tensor<S>&, const Tensor<S>&, const DepthLossConfig&);     \
  template ReprojectionResult<S> min_reprojection_automask(                                            \
      const Tensor<S>&, std::span<const Tensor<S>>, std::span<const Tensor<S>>,                        \
      std::span<const Tensor<S>>, const DepthLossConfig&);                                             \
  template Tensor<S> smoothness_loss(const Tensor<S>&, const Tensor<S>&);                              \
  template DepthLossResult<S> total_loss(std::span<const Tensor<S>>, const Tensor<S>&,                 \
                                         std::span<const Tensor<S>>, std::span<const Tensor<S>>,       \
                                         const CameraIntrinsics&, const DepthLossConfig&);             \
  template class PoseHead<S>;

PFN_INSTANTIATE_DEPTH(float)
PFN_INSTANTIATE_DEPTH(double)

}  // namespace pfn
