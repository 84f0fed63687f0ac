#include "pfn/train.hpp"

#include "pfn/ops.hpp"
#include "pfn/optim.hpp"
#include "pfn/serialize.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

namespace pfn {

using nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

template <typename T>
std::vector<const T*> pointers(const std::vector<T>& items, const std::vector<std::size_t>& idx) {
  std::vector<const T*> out;
  for (std::size_t i : idx) out.push_back(&items[i]);
  return out;
}

bool finite(const Array<float>& a) { return a.size() == 0 || a.isFinite().all(); }

}  // namespace

double poly_lr(double base_lr, int iter, int max_iter, double power) {
  if (max_iter <= 0 || iter >= max_iter) return 0.0;
  if (iter <= 0) return base_lr;
  return base_lr * std::pow(1.0 - double(iter) / double(max_iter), power);
}

std::vector<int> downsample_labels(std::span<const int> labels, int n, int h, int w, int out_h, int out_w) {
  if (labels.size() != std::size_t(n) * std::size_t(h) * std::size_t(w)) {
    throw ShapeError("downsample_labels: label count does not match N x H x W");
  }
  std::vector<int> out(std::size_t(n) * std::size_t(out_h) * std::size_t(out_w));
  std::size_t k = 0;
  for (int b = 0; b < n; ++b) {
    for (int y = 0; y < out_h; ++y) {
      const int sy = std::min(h - 1, int((std::int64_t(2 * y + 1) * h) / (2 * out_h)));
      for (int x = 0; x < out_w; ++x) {
        const int sx = std::min(w - 1, int((std::int64_t(2 * x + 1) * w) / (2 * out_w)));
        out[k++] = labels[(std::size_t(b) * h + std::size_t(sy)) * std::size_t(w) + std::size_t(sx)];
      }
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> segmentation_loss(std::span<const Tensor<Scalar>> logits_per_scale, std::span<const int> labels,
                                 int h, int w, int ignore_label) {
  if (logits_per_scale.empty()) throw UsageError("segmentation_loss: no logits");
  const int n = logits_per_scale[0].shape().n;
  std::vector<Tensor<Scalar>> terms;
  for (const auto& logits : logits_per_scale) {
    const Shape s = logits.shape();
    if (s.n != n) throw ShapeError("segmentation_loss: batch sizes differ across scales");
    std::vector<int> lab = downsample_labels(labels, n, h, w, s.h, s.w);
    if (std::all_of(lab.begin(), lab.end(), [&](int l) { return l == ignore_label; })) continue;
    terms.push_back(softmax_cross_entropy(logits, std::span<const int>(lab), ignore_label));
  }
  if (terms.empty()) throw UsageError("segmentation_loss: every label is ignored");
  Tensor<Scalar> total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return mul_scalar(total, Scalar(1.0 / double(terms.size())));
}

template Tensor<float> segmentation_loss(std::span<const Tensor<float>>, std::span<const int>, int, int, int);
template Tensor<double> segmentation_loss(std::span<const Tensor<double>>, std::span<const int>, int, int, int);

Image flip_horizontal(const Image& image) {
  Image out(image.c, image.h, image.w);
  for (int c = 0; c < image.c; ++c) {
    for (int y = 0; y < image.h; ++y) {
      for (int x = 0; x < image.w; ++x) out.at(c, y, x) = image.at(c, y, image.w - 1 - x);
    }
  }
  return out;
}

std::vector<int> flip_horizontal(std::span<const int> labels, int h, int w) {
  if (labels.size() != std::size_t(h) * std::size_t(w)) throw ShapeError("flip_horizontal: label size mismatch");
  std::vector<int> out(labels.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) out[std::size_t(y * w + x)] = labels[std::size_t(y * w + w - 1 - x)];
  }
  return out;
}

TripletData load_data(const DataConfig& data) {
  TripletData out;
  if (!data.path.empty()) {
    std::vector<FrameTriplet> all = load_triplets(data.path);
    for (std::size_t i = 0; i < all.size(); ++i) {
      (SyntheticDataset::is_train(i) ? out.train : out.held_out).push_back(std::move(all[i]));
    }
  } else {
    const SyntheticDataset ds(data.synth, 2 * std::size_t(data.scenes), data.seed);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      (SyntheticDataset::is_train(i) ? out.train : out.held_out).push_back(ds[i]);
    }
  }
  if (out.train.empty()) throw ConfigError("dataset has no training triplets");
  return out;
}

std::string metrics_csv_header(Task task) {
  return task == Task::Depth ? "step,lr,loss,appearance,photometric,smoothness,automask_fraction,grad_norm,clipped"
                             : "step,lr,loss,pixel_accuracy,grad_norm,clipped";
}

std::string metrics_csv_row(Task task, const StepLog& l) {
  std::string s = std::to_string(l.step) + "," + fmt("%.9g", l.lr) + "," + fmt("%.9g", l.loss) + ",";
  if (task == Task::Depth) {
    s += fmt("%.9g", l.appearance) + "," + fmt("%.9g", l.photometric) + "," + fmt("%.9g", l.smoothness) + "," + fmt("%.9g", l.automask_fraction) + ",";
  } else {
    s += fmt("%.9g", l.pixel_accuracy) + ",";
  }
  return s + fmt("%.9g", l.grad_norm) + "," + (l.clipped ? "1" : "0");
}

Trainer::Trainer(TrainConfig cfg) : Trainer(cfg, nullptr) {}

Trainer::Trainer(TrainConfig cfg, std::shared_ptr<const TripletData> data) : cfg_(std::move(cfg)), data_(std::move(data)) {
  cfg_.validate();
  if (!data_) data_ = std::make_shared<const TripletData>(load_data(cfg_.data));
  if (data_->train.empty()) throw ConfigError("dataset has no training triplets");
  model_ = std::make_unique<PfnModel<float>>(cfg_.model, cfg_.seed);
  if (cfg_.task == Task::Depth && cfg_.pose_source == PoseSource::Learned) {
    pose_ = std::make_unique<PoseHead<float>>(cfg_.model.input_channels, cfg_.pose_widths, mix(cfg_.seed + 1));
  }
}

std::vector<Parameter<float>*> Trainer::parameters() {
  std::vector<Parameter<float>*> out;
  for (auto& p : model_->parameters()) out.push_back(&p);
  if (pose_) {
    for (auto& p : pose_->parameters()) out.push_back(&p);
  }
  return out;
}

std::vector<std::size_t> Trainer::batch_indices(int iter) const {
  const std::size_t t = data_->train.size(), b = std::size_t(cfg_.batch_size);
  std::vector<std::size_t> out;
  std::size_t cached_epoch = std::size_t(-1);
  std::vector<std::size_t> perm(t);
  for (std::size_t j = 0; j < b; ++j) {
    const std::size_t pos = std::size_t(iter) * b + j;
    const std::size_t epoch = pos / t;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t(0));
      std::mt19937_64 rng(mix(cfg_.seed ^ mix(epoch + 0x5eed)));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % t]);
  }
  return out;
}

StepLog Trainer::step() {
  const double lr = cfg_.schedule == LrSchedule::Poly ? poly_lr(cfg_.lr, iteration_, cfg_.max_iter, cfg_.poly_power)
                                                      : cfg_.lr;
  const auto batch = batch_indices(iteration_);
  const auto start = std::chrono::steady_clock::now();
  for (Parameter<float>* p : parameters()) p->tensor.zero_grad();
  StepLog log = cfg_.task == Task::Depth ? depth_step(batch, lr) : segmentation_step(batch, lr);
  ++iteration_;
  log.step = iteration_;
  log.lr = lr;
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

StepLog Trainer::depth_step(const std::vector<std::size_t>& batch, double lr) {
  const auto items = pointers(data_->train, batch);
  std::vector<const Image*> tgt_im, src_im[2];
  std::vector<RigidPose> gt[2];
  for (const FrameTriplet* t : items) {
    if (t->intrinsics.fx != items[0]->intrinsics.fx || t->intrinsics.fy != items[0]->intrinsics.fy ||
        t->intrinsics.cx != items[0]->intrinsics.cx || t->intrinsics.cy != items[0]->intrinsics.cy) {
      throw ConfigError("batch mixes camera intrinsics");
    }
    tgt_im.push_back(&t->target);
    for (int s = 0; s < 2; ++s) {
      src_im[s].push_back(&t->sources[std::size_t(s)]);
      gt[s].push_back(t->gt_poses[std::size_t(s)]);
    }
  }
  const Tensor<float> target = to_tensor<float>(std::span<const Image* const>(tgt_im));
  std::vector<Tensor<float>> sources, poses;
  for (int s = 0; s < 2; ++s) {
    sources.push_back(to_tensor<float>(std::span<const Image* const>(src_im[s])));
    poses.push_back(pose_ ? pose_->forward(target, sources.back())
                          : pose_tensor<float>(std::span<const RigidPose>(gt[s])));
  }
  const std::vector<Tensor<float>> preds = model_->forward(target);
  const auto offending = [&](const std::string& what, const std::string& extra) {
    std::string names;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (!finite(preds[i].value())) names += " prediction.scale" + std::to_string(i + 1);
    }
    for (std::size_t i = 0; i < poses.size(); ++i) {
      if (!finite(poses[i].value())) names += " pose.source" + std::to_string(i);
    }
    for (Parameter<float>* p : parameters()) {
      if (!finite(p->tensor.value())) names += " " + p->name;
    }
    names += extra;
    return NonFiniteError("non-finite " + what + " at step " + std::to_string(iteration_ + 1) +
                          "; offending tensors:" + (names.empty() ? std::string(" (none isolated)") : names));
  };
  const bool inputs_finite =
      std::all_of(preds.begin(), preds.end(), [](const Tensor<float>& t) { return finite(t.value()); }) &&
      std::all_of(poses.begin(), poses.end(), [](const Tensor<float>& t) { return finite(t.value()); });
  if (!inputs_finite) throw offending("depth prediction", "");
  const auto res = total_loss<float>(preds, target, sources, poses, items[0]->intrinsics, cfg_.loss);

  StepLog log;
  log.loss = double(res.total.item());
  log.appearance = res.appearance;
  log.photometric = res.photometric;
  log.smoothness = res.smoothness;
  log.automask_fraction = res.automask_fraction;
  if (!std::isfinite(log.loss)) {
    std::string extra;
    if (!std::isfinite(res.appearance)) extra += " loss.appearance";
    if (!std::isfinite(res.smoothness)) extra += " loss.smoothness";
    throw offending("depth loss", extra);
  }
  finish_step(res.total, lr, log);
  return log;
}

StepLog Trainer::segmentation_step(const std::vector<std::size_t>& batch, double lr) {
  const auto items = pointers(data_->train, batch);
  std::vector<Image> images;
  std::vector<int> labels;
  const int h = items[0]->target.h, w = items[0]->target.w;
  for (std::size_t j = 0; j < items.size(); ++j) {
    const FrameTriplet& t = *items[j];
    if (t.gt_labels.size() != std::size_t(h) * std::size_t(w) || t.target.h != h || t.target.w != w) {
      throw ConfigError("segmentation batch needs label maps of one resolution");
    }
    const bool flip = cfg_.hflip && (mix(cfg_.seed ^ mix(std::uint64_t(iteration_) * 131 + j)) & 1);
    if (flip) {
      images.push_back(flip_horizontal(t.target));
      const auto l = flip_horizontal(t.gt_labels, h, w);
      labels.insert(labels.end(), l.begin(), l.end());
    } else {
      images.push_back(t.target);
      labels.insert(labels.end(), t.gt_labels.begin(), t.gt_labels.end());
    }
  }
  std::vector<const Image*> ptrs;
  for (const Image& im : images) ptrs.push_back(&im);
  const std::vector<Tensor<float>> logits = model_->forward(to_tensor<float>(std::span<const Image* const>(ptrs)));
  const Tensor<float> loss = segmentation_loss<float>(logits, labels, h, w, cfg_.ignore_label);

  StepLog log;
  log.loss = double(loss.item());
  const Tensor<float>& fine = logits[0];
  const Shape s = fine.shape();
  const auto lab = downsample_labels(labels, s.n, h, w, s.h, s.w);
  std::int64_t hit = 0, counted = 0;
  for (int b = 0; b < s.n; ++b) {
    for (Eigen::Index i = 0; i < s.plane(); ++i) {
      const int truth = lab[std::size_t(b * s.plane() + i)];
      if (truth == cfg_.ignore_label) continue;
      int best = 0;
      for (int c = 1; c < s.c; ++c) {
        if (fine.value()[(Eigen::Index(b) * s.c + c) * s.plane() + i] >
            fine.value()[(Eigen::Index(b) * s.c + best) * s.plane() + i]) {
          best = c;
        }
      }
      hit += best == truth;
      ++counted;
    }
  }
  log.pixel_accuracy = counted ? double(hit) / double(counted) : 0.0;
  if (!std::isfinite(log.loss)) {
    std::string names;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      if (!finite(logits[i].value())) names += " logits.scale" + std::to_string(i + 1);
    }
    for (Parameter<float>* p : parameters()) {
      if (!finite(p->tensor.value())) names += " " + p->name;
    }
    throw NonFiniteError("non-finite segmentation loss at step " + std::to_string(iteration_ + 1) +
                         "; offending tensors:" + (names.empty() ? std::string(" (none isolated)") : names));
  }
  finish_step(loss, lr, log);
  return log;
}

double Trainer::finish_step(const Tensor<float>& loss, double lr, StepLog& log) {
  loss.backward();
  std::string bad;
  for (Parameter<float>* p : parameters()) {
    if (p->tensor.has_grad() && !finite(p->tensor.grad())) bad += " " + p->name + ".grad";
  }
  if (!bad.empty()) {
    throw NonFiniteError("non-finite gradient at step " + std::to_string(iteration_ + 1) + "; offending tensors:" + bad);
  }
  // One joint norm over the PFN and the pose network.
  const double m = global_grad_norm<float>(model_->parameters());
  const double q = pose_ ? global_grad_norm<float>(pose_->parameters()) : 0.0;
  log.grad_norm = std::sqrt(m * m + q * q);
  log.clipped = log.grad_norm > cfg_.grad_clip;
  if (log.clipped) {
    const float scale = float(cfg_.grad_clip / log.grad_norm);
    for (Parameter<float>* p : parameters()) {
      if (p->tensor.has_grad()) p->tensor.mutable_grad() *= scale;
    }
  }
  adam_step<float>(model_->parameters(), lr, cfg_.adam);
  if (pose_) adam_step<float>(pose_->parameters(), lr, cfg_.adam);
  return log.grad_norm;
}

TrainSummary Trainer::run(const std::optional<std::filesystem::path>& run_dir,
                          const std::function<void(const StepLog&)>& on_step) {
  namespace fs = std::filesystem;
  std::ofstream metrics, timing;
  if (run_dir) {
    fs::create_directories(*run_dir / "checkpoints");
    std::ofstream(*run_dir / "config.json") << to_json_string(cfg_) << "\n";
    const bool fresh = iteration_ == 0 || !fs::exists(*run_dir / "metrics.csv");
    const auto mode = fresh ? std::ios::trunc : std::ios::app;
    metrics.open(*run_dir / "metrics.csv", std::ios::out | mode);
    timing.open(*run_dir / "timing.csv", std::ios::out | mode);
    if (!metrics || !timing) throw std::runtime_error("cannot write logs under " + run_dir->string());
    if (fresh) {
      metrics << metrics_csv_header(cfg_.task) << "\n";
      timing << "step,seconds\n";
    }
  }
  TrainSummary summary;
  int clipped = 0;
  StepLog last;
  const auto start = std::chrono::steady_clock::now();
  while (iteration_ < cfg_.max_iter) {
    last = step();
    ++summary.steps;
    clipped += last.clipped;
    if (run_dir) {
      metrics << metrics_csv_row(cfg_.task, last) << "\n" << std::flush;
      timing << last.step << "," << fmt("%.6f", last.seconds) << "\n";
      if (cfg_.checkpoint_every > 0 && iteration_ % cfg_.checkpoint_every == 0 && iteration_ < cfg_.max_iter) {
        char name[32];
        std::snprintf(name, sizeof name, "iter_%06d", iteration_);
        save_checkpoint(*run_dir / "checkpoints" / name, &last);
      }
    }
    if (on_step) on_step(last);
  }
  summary.final_loss = last.loss;
  summary.clip_fraction = summary.steps ? double(clipped) / summary.steps : 0.0;
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (run_dir) {
    save_checkpoint(*run_dir / "checkpoints" / "final", summary.steps ? &last : nullptr);
    const json s = {{"steps", summary.steps},
                    {"iteration", iteration_},
                    {"step_budget", cfg_.max_iter},
                    {"final_loss", summary.final_loss},
                    {"clip_fraction", summary.clip_fraction},
                    {"seconds", summary.seconds},
                    {"config_hash", config_hash(cfg_)}};
    std::ofstream(*run_dir / "summary.json") << s.dump(2) << "\n";
  }
  return summary;
}

void Trainer::save_checkpoint(const std::filesystem::path& dir, const StepLog* last) const {
  std::filesystem::create_directories(dir);
  auto* self = const_cast<Trainer*>(this);
  json params = json::array();
  std::ofstream values(dir / "params.bin", std::ios::binary), adam(dir / "adam.bin", std::ios::binary);
  if (!values || !adam) throw std::runtime_error("cannot write checkpoint under " + dir.string());
  for (Parameter<float>* p : self->parameters()) {
    const Shape s = p->tensor.shape();
    params.push_back({{"name", p->name}, {"shape", {s.n, s.c, s.h, s.w}}, {"adam_steps", p->step_count}});
    write_tensor(values, p->tensor);
    write_array(adam, p->adam_m);
    write_array(adam, p->adam_v);
  }
  json manifest = {{"format", "pfn-checkpoint"},
                   {"version", 1},
                   {"config", json::parse(to_json_string(cfg_))},
                   {"config_hash", config_hash(cfg_)},
                   {"iteration", iteration_},
                   {"step_budget", cfg_.max_iter},
                   {"parameters", params},
                   {"metrics", nullptr}};
  if (last) {
    manifest["metrics"] = {{"step", last->step},         {"lr", last->lr},
                           {"loss", last->loss},         {"appearance", last->appearance}, {"photometric", last->photometric},
                           {"smoothness", last->smoothness}, {"automask_fraction", last->automask_fraction},
                           {"pixel_accuracy", last->pixel_accuracy}, {"grad_norm", last->grad_norm}};
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

namespace {

json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw CheckpointError("cannot read " + (dir / "manifest.json").string());
  json m = json::parse(in, nullptr, false);
  if (m.is_discarded() || m.value("format", "") != "pfn-checkpoint") {
    throw CheckpointError((dir / "manifest.json").string() + " is not a checkpoint manifest");
  }
  return m;
}

// Loads stored tensors into `params` (matched by position and checked by name
// and shape). Returns the number of stored entries consumed.
void restore(const std::filesystem::path& dir, const json& manifest, std::vector<Parameter<float>*> params,
             bool with_adam) {
  const json& stored = manifest.at("parameters");
  if (stored.size() < params.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(stored.size()) + " parameters, model needs " +
                          std::to_string(params.size()));
  }
  std::ifstream values(dir / "params.bin", std::ios::binary), adam(dir / "adam.bin", std::ios::binary);
  if (!values) throw CheckpointError("cannot read " + (dir / "params.bin").string());
  if (with_adam && !adam) throw CheckpointError("cannot read " + (dir / "adam.bin").string());
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<float>& p = *params[i];
    const std::string name = stored[i].at("name").get<std::string>();
    const Shape s = p.tensor.shape();
    const std::vector<int> shape = stored[i].at("shape").get<std::vector<int>>();
    if (name != p.name || shape != std::vector<int>{s.n, s.c, s.h, s.w}) {
      throw CheckpointError("checkpoint parameter " + std::to_string(i) + " is " + name + " " +
                            stored[i].at("shape").dump() + ", model expects " + p.name + " " + s.str());
    }
    const Tensor<float> t = read_tensor<float>(values);
    if (t.shape() != s) throw CheckpointError("params.bin: shape of " + name + " disagrees with the manifest");
    p.tensor.mutable_value() = t.value();
    if (with_adam) {
      p.adam_m = read_array<float>(adam);
      p.adam_v = read_array<float>(adam);
      if (p.adam_m.size() != t.size() || p.adam_v.size() != t.size()) {
        throw CheckpointError("adam.bin: state size of " + name + " is wrong");
      }
      p.step_count = stored[i].at("adam_steps").get<std::int64_t>();
    }
  }
}

}  // namespace

void Trainer::load_checkpoint(const std::filesystem::path& dir) {
  const json m = read_manifest(dir);
  const TrainConfig stored = train_config_from_json(m.at("config").dump());
  const auto fields = differing_fields(stored.model, cfg_.model);
  if (!fields.empty()) {
    std::string list;
    for (const auto& f : fields) list += (list.empty() ? "" : ", ") + f;
    throw CheckpointError("checkpoint model config differs in: " + list);
  }
  if (m.at("parameters").size() != parameters().size()) {
    throw CheckpointError("checkpoint has " + std::to_string(m.at("parameters").size()) + " parameters, trainer has " +
                          std::to_string(parameters().size()) + " (pose_source differs?)");
  }
  restore(dir, m, parameters(), true);
  iteration_ = m.at("iteration").get<int>();
}

TrainConfig read_checkpoint_config(const std::filesystem::path& dir) {
  return train_config_from_json(read_manifest(dir).at("config").dump());
}

Trainer Trainer::resume(const std::filesystem::path& dir) {
  Trainer t(read_checkpoint_config(dir));
  t.load_checkpoint(dir);
  return t;
}

PfnModel<float> load_model(const std::filesystem::path& dir, TrainConfig* cfg_out) {
  const json m = read_manifest(dir);
  const TrainConfig cfg = train_config_from_json(m.at("config").dump());
  PfnModel<float> model(cfg.model, cfg.seed);
  std::vector<Parameter<float>*> params;
  for (auto& p : model.parameters()) params.push_back(&p);
  restore(dir, m, params, false);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

}  // namespace pfn
