#pragma once

#include "pfn/depth_loss.hpp"
#include "pfn/model.hpp"
#include "pfn/optim.hpp"
#include "pfn/synth.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace pfn {

enum class Task { Depth, Segmentation };
enum class PoseSource { Learned, GroundTruth };
enum class LrSchedule { Constant, Poly };

std::string to_string(Task t);
std::string to_string(PoseSource p);
std::string to_string(LrSchedule s);

struct DataConfig {
  std::string path;          // exported triplet directory; empty = generate
  int scenes = 64;           // training scenes; as many held-out scenes are generated
  std::uint64_t seed = 1;
  SynthConfig synth;
};

struct TrainConfig {
  Task task = Task::Depth;
  double lr = 1e-4;
  LrSchedule schedule = LrSchedule::Constant;
  double poly_power = 0.9;
  int max_iter = 500;
  int batch_size = 2;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 = final checkpoint only
  bool hflip = false;        // segmentation only
  int ignore_label = 255;
  PoseSource pose_source = PoseSource::GroundTruth;
  std::vector<int> pose_widths{16, 32, 64, 128};
  PfnConfig model;
  DepthLossConfig loss;
  AdamOptions adam;
  DataConfig data;

  /// Recipe defaults: depth uses constant 1e-4 and sigmoid disparity outputs;
  /// segmentation uses poly 1e-2, raw logits and horizontal flips.
  static TrainConfig defaults(Task task);

  void validate() const;
};

std::string to_json_string(const TrainConfig& cfg);
TrainConfig train_config_from_json(std::string_view text);
std::string to_json_string(const PfnConfig& cfg);
PfnConfig pfn_config_from_json(std::string_view text);

/// Sets one option by dotted key, e.g. "model.scales" = "3" or
/// "pose_widths" = "8,16". Unknown keys and malformed values throw ConfigError.
void set_option(TrainConfig& cfg, std::string_view key, std::string_view value);

/// Applies "key = value" lines; '#' starts a comment.
void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path);

/// Every settable key with its current value, one "key = value" per line.
std::string describe_options(const TrainConfig& cfg);

/// Dotted names of fields whose values differ.
std::vector<std::string> differing_fields(const PfnConfig& a, const PfnConfig& b);

/// FNV-1a over the canonical JSON form, as 16 hex digits.
std::string config_hash(const TrainConfig& cfg);

}  // namespace pfn
