#include "pfn/model.hpp"

#include "pfn/init.hpp"
#include "pfn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>

namespace pfn {

std::string to_string(FusionMode mode) { return mode == FusionMode::CWS ? "cws" : "ctc"; }

FusionMode parse_fusion_mode(std::string_view text) {
  std::string t(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "cws") return FusionMode::CWS;
  if (t == "ctc") return FusionMode::CTC;
  throw ConfigError("unknown fusion mode '" + std::string(text) + "' (expected cws or ctc)");
}

std::string to_string(OutputActivation act) {
  return act == OutputActivation::Sigmoid ? "sigmoid" : "none";
}

OutputActivation parse_output_activation(std::string_view text) {
  if (text == "sigmoid") return OutputActivation::Sigmoid;
  if (text == "none") return OutputActivation::None;
  throw ConfigError("unknown output activation '" + std::string(text) + "'");
}

int PfnConfig::compositions(int s) const {
  if (s < 1 || s > scales) throw ConfigError("compositions: scale " + std::to_string(s) + " out of range");
  if (std::size_t(s) <= composition_override.size()) return composition_override[std::size_t(s - 1)];
  return composition;
}

void PfnConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("PfnConfig: " + m); };
  if (scales < 1) fail("scales must be >= 1");
  if (scales > 16) fail("scales must be <= 16");
  if (composition < 1) fail("composition must be >= 1");
  if (!composition_override.empty() && composition_override.size() != std::size_t(scales) &&
      composition_override.size() != std::size_t(scales - 1)) {
    fail("composition override needs S or S-1 entries, got " +
         std::to_string(composition_override.size()));
  }
  for (int n : composition_override) {
    if (n < 1) fail("composition counts must be >= 1");
  }
  if (shared_channels < 1) fail("shared_channels must be >= 1");
  if (private_channels < 0) fail("private_channels must be >= 0");
  if (kernel < 1 || kernel % 2 == 0) fail("kernel must be odd and positive");
  if (input_channels < 1) fail("input_channels must be >= 1");
  if (!(clamp_hi > 0)) fail("clamp_hi must be positive");
  if (output_scales < 1 || output_scales > scales) {
    fail("output_scales " + std::to_string(output_scales) + " must lie in [1, " +
         std::to_string(scales) + "]");
  }
  if (output_channels < 1) fail("output_channels must be >= 1");
}

namespace {

void expand(const PfnConfig& c, int s, std::vector<GraphStep>& plan, int& sa, int& fu) {
  if (s == 1) {
    plan.push_back({GraphStep::Kind::SA, 1, sa++});
    return;
  }
  for (int i = 0; i < c.compositions(s - 1); ++i) expand(c, s - 1, plan, sa, fu);
  plan.push_back({GraphStep::Kind::SA, s, sa++});
  plan.push_back({GraphStep::Kind::Fusion, s, fu++});
}

std::int64_t conv_params(std::int64_t k, std::int64_t cin, std::int64_t cout) {
  return k * k * cin * cout + cout;
}

}  // namespace

std::vector<GraphStep> fractal_plan(const PfnConfig& config) {
  config.validate();
  std::vector<GraphStep> plan;
  int sa = 0, fu = 0;
  for (int i = 0; i < config.compositions(config.scales); ++i) expand(config, config.scales, plan, sa, fu);
  return plan;
}

std::int64_t analytic_parameter_count(const PfnConfig& c) {
  c.validate();
  const std::int64_t k = c.kernel, sc = c.shared_channels, pc = c.private_channels;
  const std::int64_t S = c.scales, O = c.output_scales, wide = sc + pc;
  // calls[s] = number of applications of f_s.
  std::vector<std::int64_t> calls(std::size_t(S + 1), 0);
  calls[std::size_t(S)] = c.compositions(int(S));
  for (std::int64_t s = S - 1; s >= 1; --s) {
    calls[std::size_t(s)] = c.compositions(int(s)) * calls[std::size_t(s + 1)];
  }
  std::int64_t total = conv_params(k, c.input_channels, sc) + (pc > 0 ? conv_params(k, c.input_channels, pc) : 0);
  const std::int64_t sa_each = conv_params(k, wide, sc) + (pc > 0 ? conv_params(k, wide, pc) : 0);
  for (std::int64_t s = 1; s <= S; ++s) total += calls[std::size_t(s)] * sa_each;
  for (std::int64_t L = 2; L <= S; ++L) {
    std::int64_t block = 0;
    if (c.fusion_inner == FusionMode::CTC) block = L * conv_params(k, L * sc, sc);
    else if (c.cws_weighted) block = L * (L * sc);
    total += calls[std::size_t(L)] * block;
  }
  if (c.fusion_output == FusionMode::CTC) total += O * conv_params(k, S * wide, wide);
  else if (c.cws_weighted) total += O * S * wide;
  total += O * conv_params(k, wide, c.output_channels);
  return total;
}

template <typename Scalar>
PfnModel<Scalar>::PfnModel(PfnConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int sc = config_.shared_channels, pc = config_.private_channels;
  const int wide = sc + pc;
  plan_ = fractal_plan(config_);

  head_shared_ = add_conv(rng, "head.shared", config_.input_channels, sc);
  head_priv_ = add_conv(rng, "head.private", config_.input_channels, pc);

  std::vector<int> sa_per_scale(std::size_t(config_.scales), 0);
  std::vector<int> fu_per_level(std::size_t(config_.scales + 1), 0);
  char buf[64];
  for (const GraphStep& step : plan_) {
    if (step.kind == GraphStep::Kind::SA) {
      std::snprintf(buf, sizeof buf, "fractal.sa.s%d.i%03d", step.scale,
                    sa_per_scale[std::size_t(step.scale - 1)]++);
      const std::string base(buf);
      SaModule m{step.scale, add_conv(rng, base + ".shared", wide, sc),
                 add_conv(rng, base + ".private", wide, pc)};
      sa_.push_back(m);
    } else {
      std::snprintf(buf, sizeof buf, "fractal.fuse.l%d.i%03d", step.scale,
                    fu_per_level[std::size_t(step.scale)]++);
      fusions_.push_back(make_fusion(rng, buf, step.scale, step.scale, sc, config_.fusion_inner));
    }
  }

  output_fusion_ = make_fusion(rng, "output.fuse", config_.scales, config_.output_scales, wide,
                               config_.fusion_output);
  for (int a = 1; a <= config_.output_scales; ++a) {
    predictors_.push_back(add_conv(rng, "output.pred.s" + std::to_string(a), wide, config_.output_channels));
  }
}

template <typename Scalar>
int PfnModel<Scalar>::add_param(const std::string& name, Tensor<Scalar> t) {
  if (index_.count(name)) throw UsageError("duplicate parameter name " + name);
  const int idx = int(params_.size());
  params_.emplace_back(name, std::move(t));
  index_.emplace(name, idx);
  return idx;
}

template <typename Scalar>
typename PfnModel<Scalar>::Conv PfnModel<Scalar>::add_conv(std::mt19937_64& rng, const std::string& name,
                                                           int in_channels, int out_channels) {
  Conv conv;
  conv.out_channels = out_channels;
  if (out_channels == 0) return conv;
  conv.weight = add_param(name + ".weight",
                          uniform_conv_weight<Scalar>(rng, out_channels, in_channels, config_.kernel));
  conv.bias = add_param(name + ".bias", Tensor<Scalar>::zeros(Shape{1, out_channels, 1, 1}));
  return conv;
}

template <typename Scalar>
typename PfnModel<Scalar>::FusionBlock PfnModel<Scalar>::make_fusion(std::mt19937_64& rng,
                                                                     const std::string& name, int level,
                                                                     int targets, int channels,
                                                                     FusionMode mode) {
  FusionBlock b{level, mode, channels, {}, {}};
  for (int a = 1; a <= targets; ++a) {
    const std::string tname = name + ".t" + std::to_string(a);
    if (mode == FusionMode::CWS) {
      int idx = -1;
      if (config_.cws_weighted) {
        idx = add_param(tname + ".weight",
                        Tensor<Scalar>::full(Shape{level, channels, 1, 1}, Scalar(1) / Scalar(level)));
      }
      b.cws.push_back(idx);
    } else {
      b.ctc.push_back(add_conv(rng, tname, level * channels, channels));
    }
  }
  return b;
}

template <typename Scalar>
Parameter<Scalar>& PfnModel<Scalar>::parameter(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named " + std::string(name));
  return params_[std::size_t(it->second)];
}

template <typename Scalar>
const Parameter<Scalar>& PfnModel<Scalar>::parameter(std::string_view name) const {
  return const_cast<PfnModel*>(this)->parameter(name);
}

template <typename Scalar>
bool PfnModel<Scalar>::has_parameter(std::string_view name) const {
  return index_.find(name) != index_.end();
}

template <typename Scalar>
Tensor<Scalar> PfnModel<Scalar>::run_conv(const Conv& conv, const Tensor<Scalar>& x) const {
  if (conv.out_channels == 0) {
    const Shape s = x.shape();
    return Tensor<Scalar>(Shape{s.n, 0, s.h, s.w});
  }
  return conv2d(x, params_[std::size_t(conv.weight)].tensor, params_[std::size_t(conv.bias)].tensor);
}

template <typename Scalar>
Tensor<Scalar> PfnModel<Scalar>::activate(const Tensor<Scalar>& x) const {
  return clamp(relu(x), Scalar(0), Scalar(config_.clamp_hi));
}

namespace {

// Moves x from pyramid scale `from` to scale `to` with target spatial size (h, w).
template <typename Scalar>
Tensor<Scalar> rescale(const Tensor<Scalar>& x, int from, int to, int h, int w) {
  if (from == to) return x;
  if (from < to) {
    Tensor<Scalar> y = x;
    for (int i = from; i < to; ++i) y = avg_pool2(y);
    return y;
  }
  return bilinear_resample(x, h, w);
}

}  // namespace

template <typename Scalar>
std::vector<Tensor<Scalar>> PfnModel<Scalar>::run_fusion(const FusionBlock& block,
                                                         std::span<const Tensor<Scalar>> inputs) const {
  if (int(inputs.size()) != block.level) {
    throw ShapeError("fusion block expects " + std::to_string(block.level) + " scales, got " +
                     std::to_string(inputs.size()));
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].shape().c != block.channels) {
      throw ShapeError("fusion input at scale " + std::to_string(i + 1) + " has " +
                       std::to_string(inputs[i].shape().c) + " channels, expected " +
                       std::to_string(block.channels));
    }
    if (i > 0 && (inputs[i].shape().h * 2 != inputs[i - 1].shape().h ||
                  inputs[i].shape().w * 2 != inputs[i - 1].shape().w)) {
      throw ShapeError("fusion inputs must halve in resolution from scale to scale");
    }
  }
  const int targets = int(block.mode == FusionMode::CWS ? block.cws.size() : block.ctc.size());
  std::vector<Tensor<Scalar>> out;
  out.reserve(std::size_t(targets));
  for (int a = 1; a <= targets; ++a) {
    const Shape ts = inputs[std::size_t(a - 1)].shape();
    std::vector<Tensor<Scalar>> moved;
    moved.reserve(inputs.size());
    for (int b = 1; b <= block.level; ++b) {
      moved.push_back(rescale(inputs[std::size_t(b - 1)], b, a, ts.h, ts.w));
    }
    const std::span<const Tensor<Scalar>> mv(moved);
    if (block.mode == FusionMode::CWS) {
      const int idx = block.cws[std::size_t(a - 1)];
      const Tensor<Scalar> weights =
          idx >= 0 ? params_[std::size_t(idx)].tensor
                   : Tensor<Scalar>::full(Shape{block.level, block.channels, 1, 1},
                                          Scalar(1) / Scalar(block.level));
      out.push_back(channel_weighted_sum(mv, weights));
    } else {
      out.push_back(activate(run_conv(block.ctc[std::size_t(a - 1)], concat_channels(mv))));
    }
  }
  return out;
}

template <typename Scalar>
FeaturePyramid<Scalar> PfnModel<Scalar>::input_head(const Tensor<Scalar>& image) const {
  const Shape s = image.shape();
  const int m = config_.required_multiple();
  if (s.h % m != 0 || s.w % m != 0) {
    throw ConfigError("input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                      " must have height and width divisible by " + std::to_string(m) + " for " +
                      std::to_string(config_.scales) + " scales");
  }
  if (s.c != config_.input_channels) {
    throw ConfigError("input has " + std::to_string(s.c) + " channels, model expects " +
                      std::to_string(config_.input_channels));
  }
  FeaturePyramid<Scalar> pyr;
  ScaleFeature<Scalar> z{1, activate(run_conv(head_shared_, image)), {}};
  z.priv = config_.private_channels > 0 ? activate(run_conv(head_priv_, image))
                                        : run_conv(head_priv_, image);
  pyr.features.push_back(z);
  for (int sidx = 2; sidx <= config_.scales; ++sidx) {
    const auto& prev = pyr.features.back();
    pyr.features.push_back({sidx, avg_pool2(prev.shared), avg_pool2(prev.priv)});
  }
  return pyr;
}

template <typename Scalar>
ScaleFeature<Scalar> PfnModel<Scalar>::sa_module(int module, const ScaleFeature<Scalar>& z) const {
  const SaModule& m = sa_.at(std::size_t(module));
  const Tensor<Scalar> joint = concat_channels({z.shared, z.priv});
  ScaleFeature<Scalar> out{z.scale, activate(run_conv(m.shared, joint)), run_conv(m.priv, joint)};
  if (m.priv.out_channels > 0) out.priv = activate(out.priv);
  return out;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> PfnModel<Scalar>::fusion_block(int block,
                                                           std::span<const Tensor<Scalar>> shared) const {
  return run_fusion(fusions_.at(std::size_t(block)), shared);
}

template <typename Scalar>
FeaturePyramid<Scalar> PfnModel<Scalar>::build_fractal(FeaturePyramid<Scalar> pyr,
                                                       const ForwardOptions<Scalar>& opts) const {
  if (pyr.scales() != config_.scales) {
    throw ShapeError("pyramid has " + std::to_string(pyr.scales()) + " scales, model expects " +
                     std::to_string(config_.scales));
  }
  const std::set<std::pair<int, int>> cut(opts.detach_fusion_outputs.begin(),
                                          opts.detach_fusion_outputs.end());
  for (const GraphStep& step : plan_) {
    if (step.kind == GraphStep::Kind::SA) {
      pyr.at_scale(step.scale) = sa_module(step.module, pyr.at_scale(step.scale));
    } else {
      std::vector<Tensor<Scalar>> shared;
      for (int a = 1; a <= step.scale; ++a) shared.push_back(pyr.at_scale(a).shared);
      std::vector<Tensor<Scalar>> fused = fusion_block(step.module, shared);
      for (int a = 1; a <= step.scale; ++a) {
        Tensor<Scalar> t = fused[std::size_t(a - 1)];
        pyr.at_scale(a).shared = cut.count({step.module, a}) ? t.detach() : t;
      }
    }
    if (opts.observer) opts.observer(step, pyr);
  }
  return pyr;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> PfnModel<Scalar>::output_head(const FeaturePyramid<Scalar>& pyr) const {
  if (pyr.scales() != config_.scales) throw ShapeError("output_head: pyramid scale count mismatch");
  std::vector<Tensor<Scalar>> joint;
  for (const auto& f : pyr.features) joint.push_back(concat_channels({f.shared, f.priv}));
  std::vector<Tensor<Scalar>> fused = run_fusion(output_fusion_, joint);
  std::vector<Tensor<Scalar>> preds;
  for (int a = 1; a <= config_.output_scales; ++a) {
    Tensor<Scalar> p = run_conv(predictors_[std::size_t(a - 1)], fused[std::size_t(a - 1)]);
    if (config_.output_activation == OutputActivation::Sigmoid) p = sigmoid(p);
    preds.push_back(p);
  }
  return preds;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> PfnModel<Scalar>::forward(const Tensor<Scalar>& image,
                                                      const ForwardOptions<Scalar>& opts) const {
  return output_head(build_fractal(input_head(image), opts));
}

template <typename Scalar>
GraphStats PfnModel<Scalar>::stats() const {
  GraphStats st;
  st.sa_count_per_scale.assign(std::size_t(config_.scales), 0);
  for (const auto& p : params_) st.param_count += p.tensor.size();

  // Conv-layer distances from the input image: shortest (lo) and longest (hi).
  struct Depth {
    int lo, hi;
  };
  const bool has_priv = config_.private_channels > 0;
  std::vector<Depth> sh(std::size_t(config_.scales), Depth{1, 1});
  std::vector<Depth> pv = sh;
  int reach = 1;
  auto joint = [&](int i) {
    return has_priv ? Depth{std::min(sh[i].lo, pv[i].lo), std::max(sh[i].hi, pv[i].hi)} : sh[i];
  };
  // A trainable CWS is a depthwise 1x1 convolution over the stacked sources;
  // the fixed-average variant is not a layer.
  auto fuse = [&](const std::vector<Depth>& src, FusionMode mode) {
    Depth d{std::numeric_limits<int>::max(), 0};
    for (const Depth& x : src) d = {std::min(d.lo, x.lo), std::max(d.hi, x.hi)};
    const int c = mode == FusionMode::CTC || config_.cws_weighted ? 1 : 0;
    return Depth{d.lo + c, d.hi + c};
  };

  for (const GraphStep& step : plan_) {
    if (step.kind == GraphStep::Kind::SA) {
      ++st.sa_count_per_scale[std::size_t(step.scale - 1)];
      const std::size_t i = std::size_t(step.scale - 1);
      const Depth in = joint(int(i));
      sh[i] = pv[i] = Depth{in.lo + 1, in.hi + 1};
      reach = std::max(reach, in.lo + 1);
    } else {
      ++st.fusion_count;
      const Depth d = fuse({sh.begin(), sh.begin() + step.scale}, config_.fusion_inner);
      for (int a = 0; a < step.scale; ++a) sh[std::size_t(a)] = d;
      reach = std::max(reach, d.lo);
    }
  }
  std::vector<Depth> heads;
  for (int i = 0; i < config_.scales; ++i) heads.push_back(joint(i));
  const Depth out = fuse(heads, config_.fusion_output);
  st.max_conv_depth_input_to_output = std::max(reach, out.lo + 1);
  st.longest_conv_path = out.hi + 1;
  return st;
}

template class PfnModel<float>;
template class PfnModel<double>;

}  // namespace pfn
