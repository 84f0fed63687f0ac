#include "pfn/grad_suite.hpp"

#include "pfn/depth_loss.hpp"
#include "pfn/model.hpp"
#include "pfn/ops.hpp"

#include <chrono>
#include <cmath>
#include <random>

namespace pfn {

namespace {

using T = Tensor<double>;

T uniform(Shape s, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  Array<double> v(s.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = d(rng);
  return T(s, std::move(v));
}

// Values bounded away from zero, for ops with a kink there.
T off_zero(Shape s, std::uint64_t seed) {
  T t = uniform(s, seed, 0.2, 1.0);
  std::mt19937_64 rng(seed + 7);
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    if (rng() & 1) t.mutable_value()[i] = -t.value()[i];
  }
  return t;
}

T textured(int c, int h, int w, double dx, double dy) {
  T t(Shape{1, c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double u = x + dx, v = y + dy;
        t.mutable_value()[t.shape().offset(0, ch, y, x)] =
            0.5 + 0.2 * std::sin(0.9 * u + 0.4 * ch) * std::cos(0.7 * v) + 0.1 * std::sin(0.3 * u * v);
      }
    }
  }
  return t;
}

T probed(const T& out, std::uint64_t seed) { return sum_all(mul(out, uniform(out.shape(), seed, 0.5, 1.5))); }

T pose_of(double tx, double ty, double tz, double rx, double ry, double rz) {
  return pose_tensor<double>(std::vector<RigidPose>{{Eigen::Vector3d(rx, ry, rz), Eigen::Vector3d(tx, ty, tz)}});
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(const std::function<void(const GradSuiteEntry&)>& on_entry) {
  std::vector<GradSuiteEntry> out;
  auto run = [&](const std::string& name, double tol, std::vector<T> leaves, auto&& fn,
                 GradCheckOptions opts = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    GradSuiteEntry e;
    e.name = name;
    e.tolerance = tol;
    e.result = check_gradients(std::span<T>(leaves), [&] { return fn(leaves); }, opts);
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_entry) on_entry(e);
    out.push_back(std::move(e));
  };
  constexpr double kOp = 1e-4, kNet = 1e-3;
  const CameraIntrinsics cam{12, 12, 3.5, 3.5};
  DepthLossConfig loss_cfg;

  run("conv2d", kOp, {uniform({2, 3, 6, 6}, 1, -1, 1), uniform({4, 3, 3, 3}, 2, -1, 1), uniform({1, 4, 1, 1}, 3, -1, 1)},
      [](auto& l) { return probed(conv2d(l[0], l[1], l[2]), 4); });
  run("conv2d stride 2", kOp,
      {uniform({1, 2, 7, 7}, 5, -1, 1), uniform({3, 2, 3, 3}, 6, -1, 1), uniform({1, 3, 1, 1}, 7, -1, 1)},
      [](auto& l) { return probed(conv2d(l[0], l[1], l[2], 2, 1), 8); });
  run("avg_pool2", kOp, {uniform({2, 2, 6, 4}, 9, -1, 1)}, [](auto& l) { return probed(avg_pool2(l[0]), 10); });
  run("bilinear_resample up", kOp, {uniform({1, 2, 4, 5}, 11, -1, 1)},
      [](auto& l) { return probed(bilinear_resample(l[0], 7, 9), 12); });
  run("bilinear_resample down", kOp, {uniform({1, 2, 8, 6}, 13, -1, 1)},
      [](auto& l) { return probed(bilinear_resample(l[0], 4, 3), 14); });
  {
    // Sample points away from integer coordinates, where bilinear weights kink.
    T xs = uniform({1, 1, 5, 5}, 15, 0.2, 0.8), ys = uniform({1, 1, 5, 5}, 16, 0.2, 0.8);
    std::mt19937_64 rng(17);
    for (Eigen::Index i = 0; i < xs.size(); ++i) {
      xs.mutable_value()[i] += double(rng() % 5);
      ys.mutable_value()[i] += double(rng() % 4);
    }
    run("grid_sample", kOp, {uniform({1, 2, 5, 6}, 18, -1, 1), xs, ys},
        [](auto& l) { return probed(grid_sample(l[0], l[1], l[2]), 19); });
  }
  run("local_mean", kOp, {uniform({1, 2, 5, 6}, 20, -1, 1)}, [](auto& l) { return probed(local_mean(l[0], 3), 21); });
  run("spatial_diff x", kOp, {uniform({1, 2, 4, 5}, 22, -1, 1)},
      [](auto& l) { return probed(spatial_diff(l[0], Axis::X), 23); });
  run("spatial_diff y", kOp, {uniform({1, 2, 4, 5}, 24, -1, 1)},
      [](auto& l) { return probed(spatial_diff(l[0], Axis::Y), 25); });
  run("concat_channels", kOp, {uniform({2, 2, 3, 3}, 26, -1, 1), uniform({2, 1, 3, 3}, 27, -1, 1)},
      [](auto& l) { return probed(concat_channels({l[0], l[1]}), 28); });
  run("slice_channels", kOp, {uniform({2, 5, 3, 3}, 29, -1, 1)},
      [](auto& l) { return probed(slice_channels(l[0], 1, 3), 30); });
  run("channel_weighted_sum", kOp,
      {uniform({1, 3, 4, 4}, 31, -1, 1), uniform({1, 3, 4, 4}, 32, -1, 1), uniform({2, 3, 1, 1}, 33, -1, 1)},
      [](auto& l) {
        const std::vector<T> in{l[0], l[1]};
        return probed(channel_weighted_sum(std::span<const T>(in), l[2]), 34);
      });
  run("add broadcast", kOp, {uniform({2, 3, 4, 4}, 35, -1, 1), uniform({1, 3, 1, 1}, 36, -1, 1)},
      [](auto& l) { return probed(add(l[0], l[1]), 37); });
  run("sub broadcast", kOp, {uniform({2, 3, 4, 4}, 38, -1, 1), uniform({2, 1, 4, 4}, 39, -1, 1)},
      [](auto& l) { return probed(sub(l[0], l[1]), 40); });
  run("mul broadcast", kOp, {uniform({2, 3, 4, 4}, 41, -1, 1), uniform({1, 1, 4, 4}, 42, -1, 1)},
      [](auto& l) { return probed(mul(l[0], l[1]), 43); });
  run("div broadcast", kOp, {uniform({2, 3, 4, 4}, 44, -1, 1), uniform({1, 3, 1, 1}, 45, 0.5, 2)},
      [](auto& l) { return probed(div(l[0], l[1]), 46); });
  run("scalar ops", kOp, {uniform({1, 2, 3, 3}, 47, 0.5, 2)},
      [](auto& l) { return probed(add(rdiv_scalar(2.0, l[0]), mul_scalar(add_scalar(l[0], 0.3), -1.7)), 48); });
  run("abs", kOp, {off_zero({1, 2, 4, 4}, 49)}, [](auto& l) { return probed(abs(l[0]), 50); });
  run("relu", kOp, {off_zero({1, 2, 4, 4}, 51)}, [](auto& l) { return probed(relu(l[0]), 52); });
  run("sigmoid", kOp, {uniform({1, 2, 4, 4}, 53, -3, 3)}, [](auto& l) { return probed(sigmoid(l[0]), 54); });
  run("clamp", kOp, {uniform({1, 2, 4, 4}, 55, -0.9, 0.9)},
      [](auto& l) { return probed(clamp(l[0], -0.5, 0.5), 56); }, GradCheckOptions{1e-6, 1e-6, 0});
  run("exp_neg", kOp, {uniform({1, 2, 4, 4}, 57, -2, 2)}, [](auto& l) { return probed(exp_neg(l[0]), 58); });
  run("square", kOp, {uniform({1, 2, 4, 4}, 59, -2, 2)}, [](auto& l) { return probed(square(l[0]), 60); });
  run("sqrt", kOp, {uniform({1, 2, 4, 4}, 61, 0.2, 3)}, [](auto& l) { return probed(sqrt(l[0]), 62); });
  run("sin", kOp, {uniform({1, 2, 4, 4}, 63, -3, 3)}, [](auto& l) { return probed(sin(l[0]), 64); });
  run("cos", kOp, {uniform({1, 2, 4, 4}, 65, -3, 3)}, [](auto& l) { return probed(cos(l[0]), 66); });
  run("sum_all", kOp, {uniform({2, 2, 3, 3}, 67, -1, 1)}, [](auto& l) { return mul_scalar(sum_all(l[0]), 1.3); });
  run("mean_all", kOp, {uniform({2, 2, 3, 3}, 68, -1, 1)},
      [](auto& l) { return mean_all(mul(l[0], uniform(l[0].shape(), 69, 0.5, 1.5))); });
  run("mean_spatial", kOp, {uniform({2, 3, 4, 4}, 70, -1, 1)},
      [](auto& l) { return probed(mean_spatial(l[0]), 71); });
  run("mean_channels", kOp, {uniform({2, 3, 4, 4}, 72, -1, 1)},
      [](auto& l) { return probed(mean_channels(l[0]), 73); });
  {
    T a = uniform({1, 1, 4, 4}, 74, 0, 1), b = uniform({1, 1, 4, 4}, 75, 0, 1);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      if (std::abs(a.value()[i] - b.value()[i]) < 0.05) b.mutable_value()[i] += 0.2;
    }
    run("min_over_list", kOp, {a, b}, [](auto& l) {
      const std::vector<T> in{l[0], l[1]};
      return probed(min_over_list(std::span<const T>(in)).value, 76);
    });
  }
  {
    std::vector<int> labels(2 * 4 * 4);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 7 == 3 ? 255 : int(i % 4);
    run("softmax_cross_entropy", kOp, {uniform({2, 4, 4, 4}, 77, -2, 2)},
        [labels](auto& l) { return softmax_cross_entropy(l[0], labels, 255); });
  }
  run("rotation_entries", kOp, {pose_of(0.1, 0.2, 0.3, 0.2, -0.3, 0.4)}, [](auto& l) {
    const auto r = rotation_entries(l[0]);
    T acc = mul_scalar(r[0], 1.0);
    for (std::size_t i = 1; i < r.size(); ++i) acc = add(acc, mul_scalar(r[i], 0.3 + 0.1 * double(i)));
    return sum_all(acc);
  });
  run("sigmoid_to_depth", kOp, {uniform({1, 1, 4, 4}, 78, 0.05, 0.95)},
      [loss_cfg](auto& l) { return probed(sigmoid_to_depth(l[0], loss_cfg), 79); });
  {
    T depth(Shape{1, 1, 8, 8}, 2.0);
    depth.mutable_value() += uniform({1, 1, 8, 8}, 80, -0.3, 0.3).value();
    run("warp", kOp, {textured(3, 8, 8, 0, 0), depth, pose_of(0.03, 0.02, 0.01, 0.01, -0.02, 0.015)},
        [cam](auto& l) { return probed(warp(l[0], l[1], l[2], cam).warped, 81); });
  }
  run("ssim", kOp, {uniform({1, 2, 6, 6}, 82, 0.1, 0.9), uniform({1, 2, 6, 6}, 83, 0.1, 0.9)},
      [](auto& l) { return probed(ssim(l[0], l[1]), 84); });
  run("photometric_loss", kOp, {uniform({1, 2, 6, 6}, 85, 0.1, 0.9), uniform({1, 2, 6, 6}, 86, 0.1, 0.9)},
      [loss_cfg](auto& l) { return probed(photometric_loss(l[0], l[1], loss_cfg), 87); });
  {
    const T target = uniform({1, 1, 6, 6}, 88, 0, 1);
    const T far(Shape{1, 1, 6, 6}, 5.0);
    run("min_reprojection_automask", kOp, {uniform({1, 1, 6, 6}, 89, 0, 1), uniform({1, 1, 6, 6}, 90, 0, 1)},
        [target, far, loss_cfg](auto& l) {
          const std::vector<T> sources{far, far};
          return sum_all(min_reprojection_automask<double>(target, sources, l, {}, loss_cfg).loss_map);
        });
  }
  run("smoothness_loss", kOp, {uniform({1, 1, 6, 6}, 91, 0.2, 1.0)},
      [img = textured(3, 6, 6, 0, 0)](auto& l) { return smoothness_loss(l[0], img); });
  {
    const T target = textured(3, 8, 8, 0, 0);
    const std::vector<T> sources{textured(3, 8, 8, 0.7, -0.2), textured(3, 8, 8, -0.6, 0.1)};
    run("total_loss", kNet,
        {pose_of(0.11, -0.03, 0.02, 0, 0, 0), pose_of(-0.09, 0.02, -0.01, 0, 0, 0),
         uniform({1, 1, 8, 8}, 92, 0.02, 0.08), uniform({1, 1, 4, 4}, 93, 0.02, 0.08)},
        [target, sources, cam, loss_cfg](auto& l) {
          const std::vector<T> poses{l[0], l[1]}, preds{l[2], l[3]};
          return total_loss<double>(preds, target, sources, poses, cam, loss_cfg).total;
        });
  }
  {
    PoseHead<double> pose(3, {4, 6, 8, 8}, 94);
    std::vector<T> leaves;
    for (auto& p : pose.parameters()) {
      if (p.name.ends_with(".bias")) p.tensor.mutable_value().setConstant(0.05);
      leaves.push_back(p.tensor);
    }
    const T a = textured(3, 16, 16, 0, 0), b = textured(3, 16, 16, 0.5, 0.2);
    GradCheckOptions opts;
    opts.floor = 1e-4;
    run("pose network", kNet, leaves, [&pose, a, b](auto&) { return probed(pose.forward(a, b), 95); }, opts);
  }
  {
    PfnConfig c;
    c.scales = 3;
    c.shared_channels = 2;
    c.private_channels = 4;
    c.output_scales = 3;
    PfnModel<double> m(c, 21);
    for (auto& p : m.parameters()) {
      if (p.name.ends_with(".bias")) p.tensor.mutable_value().setConstant(0.05);
    }
    const T img = uniform({1, 3, 16, 16}, 8, 0, 1);
    std::vector<T> probes;
    for (const auto& p : m.forward(img)) probes.push_back(uniform(p.shape(), 31 + probes.size(), 0.5, 1.5));
    std::vector<T> leaves;
    for (auto& p : m.parameters()) leaves.push_back(p.tensor);
    GradCheckOptions opts;
    opts.floor = 1e-4;
    run("network S=3 sc=2 pc=4", kNet, leaves,
        [&m, img, probes](auto&) {
          const auto preds = m.forward(img);
          T l = sum_all(mul(preds[0], probes[0]));
          for (std::size_t i = 1; i < preds.size(); ++i) l = add(l, sum_all(mul(preds[i], probes[i])));
          return l;
        },
        opts);
  }
  return out;
}

}  // namespace pfn
