#pragma once

#include "pfn/tensor.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pfn {

enum class FusionMode { CWS, CTC };
enum class OutputActivation { Sigmoid, None };

std::string to_string(FusionMode mode);
FusionMode parse_fusion_mode(std::string_view text);
std::string to_string(OutputActivation act);
OutputActivation parse_output_activation(std::string_view text);

/// Hyper-parameters of a fractal pyramid network.
struct PfnConfig {
  int scales = 5;
  /// Uniform composition count n_s for every fractal level.
  int composition = 2;
  /// Optional per-level counts n_1..n_S (n_S composes the outermost fractal).
  std::vector<int> composition_override;
  int shared_channels = 18;
  int private_channels = 54;
  int kernel = 3;
  int input_channels = 3;
  FusionMode fusion_inner = FusionMode::CWS;
  FusionMode fusion_output = FusionMode::CTC;
  /// false: CWS uses fixed 1/sources weights (not trainable).
  bool cws_weighted = true;
  double clamp_hi = 1e4;
  int output_scales = 4;
  int output_channels = 1;
  OutputActivation output_activation = OutputActivation::Sigmoid;

  /// Number of times f_s is composed (inside f_{s+1}, or in the network for s = S).
  int compositions(int s) const;
  /// Input H and W must be multiples of this.
  int required_multiple() const { return 1 << (scales - 1); }
  /// Throws ConfigError on invalid settings.
  void validate() const;

  friend bool operator==(const PfnConfig&, const PfnConfig&) = default;
};

template <typename Scalar>
struct ScaleFeature {
  int scale = 1;  // 1 = full resolution
  Tensor<Scalar> shared;
  Tensor<Scalar> priv;
};

/// Z_S: one ScaleFeature per scale, finest first.
template <typename Scalar>
struct FeaturePyramid {
  std::vector<ScaleFeature<Scalar>> features;

  int scales() const { return int(features.size()); }
  ScaleFeature<Scalar>& at_scale(int s) { return features.at(std::size_t(s - 1)); }
  const ScaleFeature<Scalar>& at_scale(int s) const { return features.at(std::size_t(s - 1)); }
};

/// One node of the expanded recursion, in execution order.
struct GraphStep {
  enum class Kind { SA, Fusion };
  Kind kind = Kind::SA;
  int scale = 1;   // SA: scale it runs on; Fusion: number of scales fused (1..scale)
  int module = 0;  // index into SA modules or fusion blocks
};

struct GraphStats {
  std::vector<int> sa_count_per_scale;  // index 0 = scale 1
  int fusion_count = 0;                 // fractal fusion blocks (output fusion excluded)
  std::int64_t param_count = 0;
  /// Largest shortest-path distance, in convolution layers, from the input
  /// image to any feature of the network (the "reachable in O(scales)" depth).
  int max_conv_depth_input_to_output = 0;
  /// Longest input-to-output path in convolution layers.
  int longest_conv_path = 0;
};

/// Expanded recursion for the whole network: p_S = f_S^{n_S}.
std::vector<GraphStep> fractal_plan(const PfnConfig& config);

/// Closed-form trainable parameter count for a config.
std::int64_t analytic_parameter_count(const PfnConfig& config);

template <typename Scalar>
struct ForwardOptions {
  /// Called after every fractal step with the current pyramid.
  std::function<void(const GraphStep&, const FeaturePyramid<Scalar>&)> observer;
  /// (fusion block, target scale) outputs whose gradient is cut.
  std::vector<std::pair<int, int>> detach_fusion_outputs;
};

/// Fractal pyramid network: input head, recursive SA/fusion body, output head.
template <typename Scalar>
class PfnModel {
 public:
  PfnModel(PfnConfig config, std::uint64_t seed);

  const PfnConfig& config() const { return config_; }
  std::vector<Parameter<Scalar>>& parameters() { return params_; }
  const std::vector<Parameter<Scalar>>& parameters() const { return params_; }
  Parameter<Scalar>& parameter(std::string_view name);
  const Parameter<Scalar>& parameter(std::string_view name) const;
  bool has_parameter(std::string_view name) const;
  const std::vector<GraphStep>& plan() const { return plan_; }
  GraphStats stats() const;

  FeaturePyramid<Scalar> input_head(const Tensor<Scalar>& image) const;
  ScaleFeature<Scalar> sa_module(int module, const ScaleFeature<Scalar>& z) const;
  /// Fuses shared features at scales 1..L into new shared features at 1..L.
  std::vector<Tensor<Scalar>> fusion_block(int block, std::span<const Tensor<Scalar>> shared) const;
  /// Runs the expanded recursion over a pyramid.
  FeaturePyramid<Scalar> build_fractal(FeaturePyramid<Scalar> pyramid,
                                       const ForwardOptions<Scalar>& opts = {}) const;
  /// Predictions at the `output_scales` finest scales.
  std::vector<Tensor<Scalar>> output_head(const FeaturePyramid<Scalar>& pyramid) const;
  std::vector<Tensor<Scalar>> forward(const Tensor<Scalar>& image,
                                      const ForwardOptions<Scalar>& opts = {}) const;

 private:
  struct Conv {
    int weight = -1;  // parameter indices, -1 when the conv has no outputs
    int bias = -1;
    int out_channels = 0;
  };
  struct SaModule {
    int scale;
    Conv shared, priv;
  };
  struct FusionBlock {
    int level;
    FusionMode mode;
    int channels;
    std::vector<int> cws;   // per target: weight parameter (-1 when un-weighted)
    std::vector<Conv> ctc;  // per target
  };

  Conv add_conv(std::mt19937_64& rng, const std::string& name, int in_channels, int out_channels);
  int add_param(const std::string& name, Tensor<Scalar> t);
  FusionBlock make_fusion(std::mt19937_64& rng, const std::string& name, int level, int targets,
                          int channels, FusionMode mode);
  Tensor<Scalar> run_conv(const Conv& conv, const Tensor<Scalar>& x) const;
  Tensor<Scalar> activate(const Tensor<Scalar>& x) const;
  std::vector<Tensor<Scalar>> run_fusion(const FusionBlock& block,
                                         std::span<const Tensor<Scalar>> inputs) const;

  PfnConfig config_;
  std::vector<Parameter<Scalar>> params_;
  std::map<std::string, int, std::less<>> index_;
  std::vector<GraphStep> plan_;
  Conv head_shared_, head_priv_;
  std::vector<SaModule> sa_;
  std::vector<FusionBlock> fusions_;
  FusionBlock output_fusion_;
  std::vector<Conv> predictors_;
};

extern template class PfnModel<float>;
extern template class PfnModel<double>;

}  // namespace pfn
