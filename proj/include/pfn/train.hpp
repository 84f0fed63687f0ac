#pragma once

#include "pfn/config.hpp"
#include "pfn/depth_loss.hpp"
#include "pfn/model.hpp"
#include "pfn/synth.hpp"

#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfn {

/// Loss or gradient became NaN/inf. what() names the offending tensors.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint does not match the model it is loaded into.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// base_lr * (1 - iter / max_iter)^power; 0 once iter >= max_iter.
double poly_lr(double base_lr, int iter, int max_iter, double power = 0.9);

/// Nearest-neighbour downsampling of an (N, H, W) label map.
std::vector<int> downsample_labels(std::span<const int> labels, int n, int h, int w, int out_h, int out_w);

/// Mean over scales of the pixel cross-entropy; labels are (N, H, W) at full
/// resolution and are resized to each scale. Scales whose resized labels are
/// all ignored are skipped; if every scale is, throws UsageError.
template <typename Scalar>
Tensor<Scalar> segmentation_loss(std::span<const Tensor<Scalar>> logits_per_scale, std::span<const int> labels,
                                 int h, int w, int ignore_label);

Image flip_horizontal(const Image& image);
std::vector<int> flip_horizontal(std::span<const int> labels, int h, int w);

/// Training and held-out triplets for a config: generated from data.synth or
/// loaded from data.path, split by index parity.
struct TripletData {
  std::vector<FrameTriplet> train, held_out;
};
TripletData load_data(const DataConfig& data);

struct StepLog {
  int step = 0;  // 1-based iteration that produced this row
  double lr = 0;
  double loss = 0;
  double appearance = 0, photometric = 0, smoothness = 0, automask_fraction = 0;  // depth
  double pixel_accuracy = 0;                                     // segmentation
  double grad_norm = 0;  // before clipping
  bool clipped = false;
  double seconds = 0;
};

std::string metrics_csv_header(Task task);
std::string metrics_csv_row(Task task, const StepLog& log);

struct TrainSummary {
  int steps = 0;
  double final_loss = 0;
  double clip_fraction = 0;
  double seconds = 0;
};

/// Model, optional pose network and optimiser state for one run.
class Trainer {
 public:
  /// Fresh initialisation from cfg.seed.
  explicit Trainer(TrainConfig cfg);
  /// Uses already-loaded data instead of reading cfg.data.
  Trainer(TrainConfig cfg, std::shared_ptr<const TripletData> data);

  const TrainConfig& config() const { return cfg_; }
  int iteration() const { return iteration_; }
  PfnModel<float>& model() { return *model_; }
  const PfnModel<float>& model() const { return *model_; }
  PoseHead<float>* pose_head() { return pose_.get(); }
  const TripletData& data() const { return *data_; }

  /// Every trainable parameter: PFN first, then the pose network.
  std::vector<Parameter<float>*> parameters();

  /// One optimisation step on the next batch.
  StepLog step();

  /// Steps until max_iter. With a run directory: writes config.json,
  /// metrics.csv, timing.csv, summary.json and checkpoints under it.
  TrainSummary run(const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                   const std::function<void(const StepLog&)>& on_step = {});

  /// Dataset indices used by iteration `iter` (0-based).
  std::vector<std::size_t> batch_indices(int iter) const;

  void save_checkpoint(const std::filesystem::path& dir, const StepLog* last = nullptr) const;
  /// Restores parameters, Adam state and iteration count.
  void load_checkpoint(const std::filesystem::path& dir);
  /// Rebuilds a trainer from a checkpoint's own config.
  static Trainer resume(const std::filesystem::path& dir);

 private:
  StepLog depth_step(const std::vector<std::size_t>& batch, double lr);
  StepLog segmentation_step(const std::vector<std::size_t>& batch, double lr);
  double finish_step(const Tensor<float>& loss, double lr, StepLog& log);

  TrainConfig cfg_;
  std::shared_ptr<const TripletData> data_;
  std::unique_ptr<PfnModel<float>> model_;
  std::unique_ptr<PoseHead<float>> pose_;
  int iteration_ = 0;
};

/// Reads a checkpoint manifest's stored training config.
TrainConfig read_checkpoint_config(const std::filesystem::path& dir);

/// Loads only the PFN weights from a checkpoint into a model built from its config.
PfnModel<float> load_model(const std::filesystem::path& dir, TrainConfig* cfg_out = nullptr);

}  // namespace pfn
