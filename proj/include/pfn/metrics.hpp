#pragma once

#include "pfn/tensor.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfn {

/// Metric cannot be computed (e.g. no valid pixels).
class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using ArrayXd = Eigen::ArrayXd;
using MaskArray = Eigen::Array<bool, Eigen::Dynamic, 1>;

struct DepthEvalReport {
  double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0;
  double delta1 = 0, delta2 = 0, delta3 = 0;
  std::int64_t pixel_count = 0;

  static std::string csv_header();
  std::string csv_row() const;
  std::string table() const;
};

/// Depth metrics over valid pixels. An empty mask means every pixel is valid.
DepthEvalReport depth_metrics(const ArrayXd& pred, const ArrayXd& gt, const MaskArray& valid,
                              bool median_scaling, double cap = 80.0);

/// Mean of per-image reports (pixel_count is summed).
DepthEvalReport average(std::span<const DepthEvalReport> reports);

/// Per-pixel displacement from frame t to frame t+1, row-major H x W.
struct FlowField {
  int h = 0, w = 0;
  ArrayXd dx, dy;
  MaskArray valid;

  static FlowField zeros(int h, int w);
};

struct TemporalConsistency {
  double tac = 0, trc = 0;
  std::int64_t pixel_count = 0;
};

/// pred_t1 is warped into frame t by bilinear sampling at (x + dx, y + dy).
/// Pixels whose flow is invalid or leaves the frame are skipped.
TemporalConsistency tac_trc(const ArrayXd& pred_t, const ArrayXd& pred_t1, const FlowField& flow);

struct MiouReport {
  std::vector<double> per_class_iou;  // NaN for classes absent from both maps
  double miou = 0;
  std::vector<std::int64_t> confusion;  // row = ground truth, column = prediction
};

MiouReport miou(std::span<const int> pred, std::span<const int> gt, int num_classes, int ignore_label);

/// Flattened single-image view of a (1, C, H, W) tensor channel.
template <typename Scalar>
ArrayXd to_array(const Tensor<Scalar>& t, int n = 0, int c = 0) {
  const Shape s = t.shape();
  return t.value().segment(Eigen::Index(n) * s.c * s.plane() + Eigen::Index(c) * s.plane(), s.plane())
      .template cast<double>();
}

}  // namespace pfn
