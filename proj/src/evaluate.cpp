#include "pfn/evaluate.hpp"

#include "pfn/depth_loss.hpp"
#include "pfn/image_io.hpp"
#include "pfn/ops.hpp"
#include "pfn/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace pfn {

using nlohmann::json;

namespace {

ArrayXd resize(const ArrayXd& a, int h, int w, int out_h, int out_w) {
  if (h == out_h && w == out_w) return a;
  if (a.size() != Eigen::Index(h) * w) throw ShapeError("prediction size does not match its reported H x W");
  const Tensor<double> t(Shape{1, 1, h, w}, a);
  return bilinear_resample(t, out_h, out_w).value();
}

double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(mid), v.end());
  return v[mid];
}

MaskArray positive(const ArrayXd& gt) { return gt > 0.0; }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

json report_json(const DepthEvalReport& r) {
  return {{"abs_rel", r.abs_rel}, {"sq_rel", r.sq_rel}, {"rmse", r.rmse}, {"rmse_log", r.rmse_log},
          {"delta1", r.delta1},   {"delta2", r.delta2}, {"delta3", r.delta3}, {"pixel_count", r.pixel_count}};
}

}  // namespace

DepthPredictor model_depth_predictor(const PfnModel<float>& model, const DepthLossConfig& loss) {
  return [&model, loss](const FrameTriplet& t, int frame, int& h, int& w) {
    NoGradGuard guard;
    const Image& img = frame == 0 ? t.target : t.sources[1];
    const auto preds = model.forward(to_tensor<float>(img));
    const Tensor<float> depth = sigmoid_to_depth(preds.front(), loss);
    h = depth.shape().h;
    w = depth.shape().w;
    return to_array(depth);
  };
}

DepthPredictor ground_truth_depth_predictor() {
  return [](const FrameTriplet& t, int frame, int& h, int& w) {
    h = t.target.h;
    w = t.target.w;
    return frame == 0 ? t.gt_depth : t.source_depths[1];
  };
}

LabelPredictor model_label_predictor(const PfnModel<float>& model) {
  return [&model](const FrameTriplet& t, int& h, int& w) {
    NoGradGuard guard;
    const auto logits = model.forward(to_tensor<float>(t.target));
    const Tensor<float>& l = logits.front();
    const Shape s = l.shape();
    h = s.h;
    w = s.w;
    std::vector<int> out(std::size_t(s.plane()));
    for (Eigen::Index i = 0; i < s.plane(); ++i) {
      int best = 0;
      for (int c = 1; c < s.c; ++c) {
        if (l.value()[c * s.plane() + i] > l.value()[best * s.plane() + i]) best = c;
      }
      out[std::size_t(i)] = best;
    }
    return out;
  };
}

DepthEvaluation evaluate_depth(std::span<const FrameTriplet> data, const DepthPredictor& predict,
                               const EvalOptions& opts) {
  if (data.empty()) throw EvalError("evaluate_depth: no frames");
  DepthEvaluation out;
  double tac = 0, trc = 0;
  std::int64_t tpix = 0;
  for (const FrameTriplet& t : data) {
    if (t.gt_depth.size() == 0) throw EvalError("evaluate_depth: frame without ground-truth depth");
    const int gh = t.target.h, gw = t.target.w;
    int h = 0, w = 0;
    ArrayXd pred = predict(t, 0, h, w);
    pred = resize(pred, h, w, gh, gw);
    const MaskArray valid = positive(t.gt_depth);
    out.per_image.push_back(depth_metrics(pred, t.gt_depth, valid, opts.median_scaling, opts.cap));

    const bool flow = t.gt_flow.h == gh && t.gt_flow.w == gw && t.gt_flow.dx.size() > 0;
    if (opts.temporal && flow) {
      ArrayXd next = predict(t, 1, h, w);
      next = resize(next, h, w, gh, gw);
      if (opts.median_scaling) {
        std::vector<double> g, p;
        for (Eigen::Index i = 0; i < valid.size(); ++i) {
          if (valid[i]) {
            g.push_back(t.gt_depth[i]);
            p.push_back(pred[i]);
          }
        }
        const double ratio = median(g) / median(p);
        pred *= ratio;
        next *= ratio;
      }
      pred = pred.cwiseMax(1e-3).cwiseMin(opts.cap);
      next = next.cwiseMax(1e-3).cwiseMin(opts.cap);
      try {
        const TemporalConsistency tc = tac_trc(pred, next, t.gt_flow);
        tac += tc.tac * double(tc.pixel_count);
        trc += tc.trc * double(tc.pixel_count);
        tpix += tc.pixel_count;
      } catch (const EvalError&) {
        // every flow vector of this frame leaves the image
      }
    }
  }
  out.mean = average(out.per_image);
  if (tpix > 0) out.temporal = TemporalConsistency{tac / double(tpix), trc / double(tpix), tpix};
  return out;
}

MiouReport evaluate_segmentation(std::span<const FrameTriplet> data, const LabelPredictor& predict,
                                 int num_classes, int ignore_label) {
  std::vector<int> all_pred, all_gt;
  for (const FrameTriplet& t : data) {
    if (t.gt_labels.empty()) throw EvalError("evaluate_segmentation: frame without labels");
    int h = 0, w = 0;
    std::vector<int> p = predict(t, h, w);
    if (h != t.target.h || w != t.target.w) {
      p = downsample_labels(p, 1, h, w, t.target.h, t.target.w);
    }
    all_pred.insert(all_pred.end(), p.begin(), p.end());
    all_gt.insert(all_gt.end(), t.gt_labels.begin(), t.gt_labels.end());
  }
  return miou(all_pred, all_gt, num_classes, ignore_label);
}

void check_compatible(const PfnConfig& expected, const PfnConfig& found) {
  const auto fields = differing_fields(expected, found);
  if (fields.empty()) return;
  std::string list;
  for (const auto& f : fields) list += (list.empty() ? "" : ", ") + f;
  throw CheckpointError("checkpoint is incompatible with the requested model; differing fields: " + list);
}

EvalRun evaluate_checkpoint(const std::filesystem::path& checkpoint, std::span<const FrameTriplet> data,
                            const EvalOptions& opts, const std::optional<PfnConfig>& expected) {
  EvalRun run;
  run.config = read_checkpoint_config(checkpoint);
  if (expected) check_compatible(*expected, run.config.model);
  const PfnModel<float> model = load_model(checkpoint);
  if (run.config.task == Task::Depth) {
    run.depth = evaluate_depth(data, model_depth_predictor(model, run.config.loss), opts);
  } else {
    run.segmentation = evaluate_segmentation(data, model_label_predictor(model), run.config.model.output_channels,
                                             run.config.ignore_label);
  }
  return run;
}

void write_eval_report(const std::filesystem::path& dir, const EvalRun& run, const EvalOptions& opts) {
  std::filesystem::create_directories(dir);
  json j{{"task", to_string(run.config.task)}, {"config_hash", config_hash(run.config)}};
  std::ofstream csv(dir / "eval.csv");
  if (run.depth) {
    const DepthEvaluation& d = *run.depth;
    csv << "image," << DepthEvalReport::csv_header() << "\n";
    for (std::size_t i = 0; i < d.per_image.size(); ++i) csv << i << "," << d.per_image[i].csv_row() << "\n";
    csv << "mean," << d.mean.csv_row() << "\n";
    j["median_scaling"] = opts.median_scaling;
    j["cap"] = opts.cap;
    j["images"] = d.per_image.size();
    j["depth"] = report_json(d.mean);
    if (d.temporal) {
      j["temporal"] = {{"tac", d.temporal->tac}, {"trc", d.temporal->trc}, {"pixel_count", d.temporal->pixel_count}};
    }
  }
  if (run.segmentation) {
    const MiouReport& m = *run.segmentation;
    csv << "class,iou\n";
    json ious = json::array();
    for (std::size_t c = 0; c < m.per_class_iou.size(); ++c) {
      const double v = m.per_class_iou[c];
      csv << c << "," << (std::isnan(v) ? std::string("") : fmt("%.6f", v)) << "\n";
      ious.push_back(std::isnan(v) ? json(nullptr) : json(v));
    }
    csv << "mean," << fmt("%.6f", m.miou) << "\n";
    j["miou"] = m.miou;
    j["per_class_iou"] = ious;
    j["confusion"] = m.confusion;
  }
  std::ofstream(dir / "eval.json") << j.dump(2) << "\n";
}

std::string eval_summary(const EvalRun& run) {
  std::ostringstream s;
  if (run.depth) {
    s << run.depth->mean.table();
    if (run.depth->temporal) {
      s << "  TAC " << fmt("%.4f", run.depth->temporal->tac) << "  TRC " << fmt("%.4f", run.depth->temporal->trc)
        << "\n";
    }
  }
  if (run.segmentation) {
    s << "  mIoU " << fmt("%.4f", run.segmentation->miou) << "\n";
    for (std::size_t c = 0; c < run.segmentation->per_class_iou.size(); ++c) {
      s << "  class " << c << "  " << fmt("%.4f", run.segmentation->per_class_iou[c]) << "\n";
    }
  }
  return s.str();
}

std::string inspect_table(const PfnConfig& cfg) {
  cfg.validate();
  const PfnModel<float> model(cfg, 0);
  const GraphStats st = model.stats();
  std::ostringstream s;
  s << "scale  sa_modules\n";
  for (std::size_t i = 0; i < st.sa_count_per_scale.size(); ++i) {
    s << fmt("%5.0f", double(i + 1)) << "  " << st.sa_count_per_scale[i] << "\n";
  }
  s << "fusion blocks        " << st.fusion_count << "\n"
    << "parameters           " << st.param_count << "\n"
    << "analytic parameters  " << analytic_parameter_count(cfg) << "\n"
    << "input reach (convs)  " << st.max_conv_depth_input_to_output << "\n"
    << "longest path (convs) " << st.longest_conv_path << "\n";
  return s.str();
}

std::string inspect_json(const PfnConfig& cfg) {
  cfg.validate();
  const PfnModel<float> model(cfg, 0);
  const GraphStats st = model.stats();
  const json j{{"model", json::parse(to_json_string(cfg))},
               {"sa_count_per_scale", st.sa_count_per_scale},
               {"fusion_count", st.fusion_count},
               {"param_count", st.param_count},
               {"analytic_param_count", analytic_parameter_count(cfg)},
               {"max_conv_depth_input_to_output", st.max_conv_depth_input_to_output},
               {"longest_conv_path", st.longest_conv_path}};
  return j.dump(2);
}

}  // namespace pfn
