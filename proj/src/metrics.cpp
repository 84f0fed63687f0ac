#include "pfn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace pfn {

namespace {

double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(mid), v.end());
  if (v.size() % 2 == 1) return v[mid];
  const double hi = v[mid];
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + std::ptrdiff_t(mid)));
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

std::string DepthEvalReport::csv_header() {
  return "abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,pixel_count";
}

std::string DepthEvalReport::csv_row() const {
  std::string s;
  for (double v : {abs_rel, sq_rel, rmse, rmse_log, delta1, delta2, delta3}) s += fmt("%.6f", v) + ",";
  return s + std::to_string(pixel_count);
}

std::string DepthEvalReport::table() const {
  std::string s = "  abs_rel   sq_rel     rmse rmse_log       d1       d2       d3\n";
  for (double v : {abs_rel, sq_rel, rmse, rmse_log, delta1, delta2, delta3}) s += fmt("%9.4f", v);
  return s + "\n";
}

DepthEvalReport depth_metrics(const ArrayXd& pred_in, const ArrayXd& gt, const MaskArray& valid_in,
                              bool median_scaling, double cap) {
  if (pred_in.size() != gt.size()) throw ShapeError("depth_metrics: prediction and ground truth sizes differ");
  const MaskArray valid = valid_in.size() ? valid_in : MaskArray::Constant(gt.size(), true);
  if (valid.size() != gt.size()) throw ShapeError("depth_metrics: mask size differs");

  std::vector<double> p, g;
  for (Eigen::Index i = 0; i < gt.size(); ++i) {
    if (!valid[i]) continue;
    if (!(gt[i] > 0)) throw EvalError("depth_metrics: ground truth must be positive where valid");
    p.push_back(pred_in[i]);
    g.push_back(gt[i]);
  }
  if (p.empty()) throw EvalError("depth_metrics: no valid pixels");
  if (median_scaling) {
    const double ratio = median(g) / median(p);
    for (double& v : p) v *= ratio;
  }
  DepthEvalReport r;
  const double n = double(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pv = std::clamp(p[i], 1e-3, cap), gv = g[i];
    const double d = pv - gv;
    r.abs_rel += std::abs(d) / gv;
    r.sq_rel += d * d / gv;
    r.rmse += d * d;
    const double dl = std::log(pv) - std::log(gv);
    r.rmse_log += dl * dl;
    const double ratio = std::max(pv / gv, gv / pv);
    r.delta1 += ratio < 1.25;
    r.delta2 += ratio < 1.25 * 1.25;
    r.delta3 += ratio < 1.25 * 1.25 * 1.25;
  }
  r.abs_rel /= n;
  r.sq_rel /= n;
  r.rmse = std::sqrt(r.rmse / n);
  r.rmse_log = std::sqrt(r.rmse_log / n);
  r.delta1 /= n;
  r.delta2 /= n;
  r.delta3 /= n;
  r.pixel_count = std::int64_t(p.size());
  return r;
}

DepthEvalReport average(std::span<const DepthEvalReport> reports) {
  if (reports.empty()) throw EvalError("average: no reports");
  DepthEvalReport r;
  for (const auto& x : reports) {
    r.abs_rel += x.abs_rel;
    r.sq_rel += x.sq_rel;
    r.rmse += x.rmse;
    r.rmse_log += x.rmse_log;
    r.delta1 += x.delta1;
    r.delta2 += x.delta2;
    r.delta3 += x.delta3;
    r.pixel_count += x.pixel_count;
  }
  const double n = double(reports.size());
  r.abs_rel /= n;
  r.sq_rel /= n;
  r.rmse /= n;
  r.rmse_log /= n;
  r.delta1 /= n;
  r.delta2 /= n;
  r.delta3 /= n;
  return r;
}

FlowField FlowField::zeros(int h, int w) {
  const Eigen::Index n = Eigen::Index(h) * w;
  return {h, w, ArrayXd::Zero(n), ArrayXd::Zero(n), MaskArray::Constant(n, true)};
}

TemporalConsistency tac_trc(const ArrayXd& pred_t, const ArrayXd& pred_t1, const FlowField& flow) {
  const Eigen::Index n = Eigen::Index(flow.h) * flow.w;
  if (pred_t.size() != n || pred_t1.size() != n || flow.dx.size() != n || flow.dy.size() != n ||
      flow.valid.size() != n) {
    throw ShapeError("tac_trc: predictions and flow must share H x W");
  }
  TemporalConsistency r;
  for (int y = 0; y < flow.h; ++y) {
    for (int x = 0; x < flow.w; ++x) {
      const Eigen::Index i = Eigen::Index(y) * flow.w + x;
      if (!flow.valid[i]) continue;
      const double sx = x + flow.dx[i], sy = y + flow.dy[i];
      if (!(sx >= 0 && sx <= flow.w - 1 && sy >= 0 && sy <= flow.h - 1)) continue;
      const int x0 = std::min(int(sx), flow.w - 2 < 0 ? 0 : flow.w - 2);
      const int y0 = std::min(int(sy), flow.h - 2 < 0 ? 0 : flow.h - 2);
      const int x1 = std::min(x0 + 1, flow.w - 1), y1 = std::min(y0 + 1, flow.h - 1);
      const double fx = sx - x0, fy = sy - y0;
      auto at = [&](int yy, int xx) { return pred_t1[Eigen::Index(yy) * flow.w + xx]; };
      const double warped = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                            fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
      const double diff = std::abs(pred_t[i] - warped);
      r.tac += diff;
      r.trc += diff / std::max(pred_t[i], warped);
      ++r.pixel_count;
    }
  }
  if (r.pixel_count == 0) throw EvalError("tac_trc: no valid pixels");
  r.tac /= double(r.pixel_count);
  r.trc /= double(r.pixel_count);
  return r;
}

MiouReport miou(std::span<const int> pred, std::span<const int> gt, int num_classes, int ignore_label) {
  if (pred.size() != gt.size()) throw ShapeError("miou: label maps differ in size");
  if (num_classes < 1) throw ConfigError("miou: num_classes must be positive");
  const std::size_t k = std::size_t(num_classes);
  MiouReport r;
  r.confusion.assign(k * k, 0);
  std::int64_t counted = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore_label) continue;
    if (gt[i] < 0 || gt[i] >= num_classes || pred[i] < 0 || pred[i] >= num_classes) {
      throw ConfigError("miou: label out of range at pixel " + std::to_string(i));
    }
    ++r.confusion[std::size_t(gt[i]) * k + std::size_t(pred[i])];
    ++counted;
  }
  if (counted == 0) throw EvalError("miou: every pixel is ignored");
  double sum = 0;
  int present = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::int64_t tp = r.confusion[c * k + c], fp = 0, fn = 0;
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += r.confusion[o * k + c];
      fn += r.confusion[c * k + o];
    }
    const std::int64_t denom = tp + fp + fn;
    if (denom == 0) {
      r.per_class_iou.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    r.per_class_iou.push_back(double(tp) / double(denom));
    sum += r.per_class_iou.back();
    ++present;
  }
  r.miou = sum / present;
  return r;
}

}  // namespace pfn
