#pragma once

#include "pfn/config.hpp"
#include "pfn/metrics.hpp"
#include "pfn/model.hpp"
#include "pfn/synth.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pfn {

/// Depth for a triplet frame: 0 = target, 1 = next source. Row-major, at any
/// resolution; it is resized to the ground truth before scoring.
using DepthPredictor = std::function<ArrayXd(const FrameTriplet&, int frame, int& h, int& w)>;
/// Label map for the target frame, at any resolution.
using LabelPredictor = std::function<std::vector<int>(const FrameTriplet&, int& h, int& w)>;

DepthPredictor model_depth_predictor(const PfnModel<float>& model, const DepthLossConfig& loss);
/// Returns the rendered depths themselves.
DepthPredictor ground_truth_depth_predictor();
LabelPredictor model_label_predictor(const PfnModel<float>& model);

struct EvalOptions {
  bool median_scaling = true;
  double cap = 80.0;
  bool temporal = true;  // TAC/TRC between target and next frame using gt_flow
};

struct DepthEvaluation {
  DepthEvalReport mean;
  std::vector<DepthEvalReport> per_image;
  std::optional<TemporalConsistency> temporal;  // pixel-weighted over images
};

DepthEvaluation evaluate_depth(std::span<const FrameTriplet> data, const DepthPredictor& predict,
                               const EvalOptions& opts = {});

/// Confusion accumulated over every image, then reduced once.
MiouReport evaluate_segmentation(std::span<const FrameTriplet> data, const LabelPredictor& predict,
                                 int num_classes, int ignore_label);

/// Throws CheckpointError naming every model field where `found` differs.
void check_compatible(const PfnConfig& expected, const PfnConfig& found);

struct EvalRun {
  TrainConfig config;  // as stored in the checkpoint
  std::optional<DepthEvaluation> depth;
  std::optional<MiouReport> segmentation;
};

/// Scores a checkpoint on `data` with the task stored in the checkpoint. If
/// `expected` is given, the checkpoint's model config must equal it.
EvalRun evaluate_checkpoint(const std::filesystem::path& checkpoint, std::span<const FrameTriplet> data,
                            const EvalOptions& opts = {}, const std::optional<PfnConfig>& expected = std::nullopt);

/// eval.csv and eval.json under `dir`.
void write_eval_report(const std::filesystem::path& dir, const EvalRun& run, const EvalOptions& opts);
std::string eval_summary(const EvalRun& run);

/// Graph statistics as a text table and as JSON.
std::string inspect_table(const PfnConfig& cfg);
std::string inspect_json(const PfnConfig& cfg);

}  // namespace pfn
