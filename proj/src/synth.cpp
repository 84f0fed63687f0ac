#include "pfn/synth.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

namespace pfn {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double lattice(std::uint64_t seed, std::int64_t ix, std::int64_t iy) {
  const std::uint64_t h = splitmix(seed ^ splitmix(std::uint64_t(ix) * 0x632be59bd9b4e019ull ^ splitmix(std::uint64_t(iy))));
  return double(h >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * (3 - 2 * t); }

double value_noise(std::uint64_t seed, double u, double v) {
  const double fu = std::floor(u), fv = std::floor(v);
  const auto iu = std::int64_t(fu), iv = std::int64_t(fv);
  const double a = smooth(u - fu), b = smooth(v - fv);
  const double n00 = lattice(seed, iu, iv), n10 = lattice(seed, iu + 1, iv);
  const double n01 = lattice(seed, iu, iv + 1), n11 = lattice(seed, iu + 1, iv + 1);
  return (1 - b) * ((1 - a) * n00 + a * n10) + b * ((1 - a) * n01 + a * n11);
}

// Octaves finer than about a pixel are replaced by their mean so distant
// surfaces do not alias.
double texture(std::uint64_t seed, double u, double v, double units_per_pixel, double cell) {
  constexpr int kOctaves = 3;
  double amp = 1, sum = 0, norm = 0;
  for (int o = 0; o < kOctaves; ++o) {
    const double px = cell / units_per_pixel;
    const double lod = smooth(std::clamp((px - 1.0) / 2.0, 0.0, 1.0));
    const double n = value_noise(splitmix(seed + std::uint64_t(o)), u / cell, v / cell);
    sum += amp * (lod * n + (1 - lod) * 0.5);
    norm += amp;
    cell *= 0.5;
    amp *= 0.55;
  }
  return sum / norm;
}

Eigen::Vector3d class_tint(int label) {
  static const Eigen::Vector3d kPalette[] = {
      {0.45, 0.55, 0.80}, {0.55, 0.45, 0.30}, {0.85, 0.20, 0.20}, {0.20, 0.75, 0.25},
      {0.95, 0.80, 0.20}, {0.60, 0.25, 0.80}, {0.15, 0.70, 0.80}, {0.90, 0.50, 0.15},
  };
  if (label >= 0 && label < 8) return kPalette[label];
  const double hue = std::fmod(label * 0.618033988749895, 1.0) * 6.0;
  const double f = hue - std::floor(hue);
  switch (int(hue)) {
    case 0: return {0.9, 0.2 + 0.7 * f, 0.2};
    case 1: return {0.9 - 0.7 * f, 0.9, 0.2};
    case 2: return {0.2, 0.9, 0.2 + 0.7 * f};
    case 3: return {0.2, 0.9 - 0.7 * f, 0.9};
    case 4: return {0.2 + 0.7 * f, 0.2, 0.9};
    default: return {0.9, 0.2, 0.9 - 0.7 * f};
  }
}

struct Hit {
  double depth = std::numeric_limits<double>::infinity();
  int plane = -1;
  Eigen::Vector3d point;
};

struct FrameCamera {
  Eigen::Matrix3d rotation;
  Eigen::Vector3d center;
};

Hit cast(const SyntheticScene& scene, const FrameCamera& cam, double px, double py) {
  const auto& k = scene.intrinsics;
  const Eigen::Vector3d dir = cam.rotation * Eigen::Vector3d((px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0);
  Hit best;
  for (std::size_t i = 0; i < scene.planes.size(); ++i) {
    const PlanePatch& p = scene.planes[i];
    const double denom = p.normal.dot(dir);
    if (std::abs(denom) < 1e-12) continue;
    const double t = (p.offset - p.normal.dot(cam.center)) / denom;
    if (!(t > 1e-9) || t >= best.depth) continue;
    const Eigen::Vector3d x = cam.center + t * dir;
    const Eigen::Vector3d r = p.region_frame * x;
    if (!(r.z() > 0)) continue;
    const double xn = r.x() / r.z(), yn = r.y() / r.z();
    if (xn < p.region[0] || xn > p.region[1] || yn < p.region[2] || yn > p.region[3]) continue;
    best = {t, int(i), x};
  }
  return best;
}

Eigen::Vector3d shade(const SyntheticScene& scene, const Hit& hit) {
  const PlanePatch& p = scene.planes[std::size_t(hit.plane)];
  const Eigen::Vector3d n = p.normal.normalized();
  Eigen::Vector3d e1 = n.cross(Eigen::Vector3d::UnitY());
  if (e1.norm() < 1e-6) e1 = n.cross(Eigen::Vector3d::UnitX());
  e1.normalize();
  const Eigen::Vector3d e2 = n.cross(e1);
  const double footprint = hit.depth / scene.intrinsics.fx;
  const double u = hit.point.dot(e1), v = hit.point.dot(e2);
  const double cell = scene.texture_cell;
  const double t = std::clamp(0.5 + 2.0 * (texture(p.texture_seed, u, v, footprint, cell) - 0.5), 0.0, 1.0);
  const double hue_shift = texture(splitmix(p.texture_seed ^ 0xabcdefull), u, v, footprint, 2 * cell) - 0.5;
  Eigen::Vector3d c = class_tint(p.label) * (0.15 + 0.85 * t);
  c += 0.15 * hue_shift * Eigen::Vector3d(1.0, -0.5, -0.5);
  if (scene.haze_distance > 0) {
    const double keep = std::exp(-hit.depth / scene.haze_distance);
    c = keep * c + (1 - keep) * scene.haze_color;
  }
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

FrameCamera camera(const SyntheticScene& scene, int frame) {
  const RigidPose& p = scene.camera_track[std::size_t(frame)];
  FrameCamera cam{p.rotation_matrix(), p.translation};
  for (const PlanePatch& plane : scene.planes) {
    if (std::abs(plane.normal.dot(cam.center) - plane.offset) < 1e-9) {
      throw GenerationError("camera " + std::to_string(frame) + " lies on a scene plane");
    }
  }
  return cam;
}

}  // namespace

PlanePatch PlanePatch::fronto_parallel(double depth, std::uint64_t seed, int label) {
  PlanePatch p;
  p.normal = Eigen::Vector3d::UnitZ();
  p.offset = depth;
  p.depth = depth;
  p.texture_seed = seed;
  p.label = label;
  return p;
}

RenderedFrame render_frame(const SyntheticScene& scene, int frame) {
  if (frame < 0 || std::size_t(frame) >= scene.camera_track.size()) {
    throw UsageError("render_frame: frame " + std::to_string(frame) + " outside the camera track");
  }
  if (scene.height < 1 || scene.width < 1) throw ConfigError("render_frame: empty resolution");
  scene.intrinsics.validate();
  const FrameCamera cam = camera(scene, frame);
  const int h = scene.height, w = scene.width;
  RenderedFrame out{Image(3, h, w), ArrayXd(Eigen::Index(h) * w), std::vector<int>(std::size_t(h) * std::size_t(w))};
  constexpr double kSub[2] = {-0.25, 0.25};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Hit centre = cast(scene, cam, x, y);
      if (centre.plane < 0) {
        throw GenerationError("pixel (" + std::to_string(x) + ", " + std::to_string(y) + ") hits no plane");
      }
      const Eigen::Index i = Eigen::Index(y) * w + x;
      out.depth[i] = centre.depth;
      out.labels[std::size_t(i)] = scene.planes[std::size_t(centre.plane)].label;
      Eigen::Vector3d colour = Eigen::Vector3d::Zero();
      for (double oy : kSub) {
        for (double ox : kSub) {
          const Hit s = cast(scene, cam, x + ox, y + oy);
          colour += shade(scene, s.plane < 0 ? centre : s);
        }
      }
      colour *= 0.25;
      for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = float(colour[c]);
    }
  }
  return out;
}

FlowField analytic_flow(const ArrayXd& depth, int h, int w, const RigidPose& target_to_other,
                        const CameraIntrinsics& k) {
  if (depth.size() != Eigen::Index(h) * w) throw ShapeError("analytic_flow: depth size differs from H x W");
  const Eigen::Matrix3d r = target_to_other.rotation_matrix();
  const Eigen::Vector3d t = target_to_other.translation;
  FlowField f{h, w, ArrayXd::Zero(depth.size()), ArrayXd::Zero(depth.size()), MaskArray::Constant(depth.size(), false)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Eigen::Index i = Eigen::Index(y) * w + x;
      const double d = depth[i];
      const Eigen::Vector3d p(d * (x - k.cx) / k.fx, d * (y - k.cy) / k.fy, d);
      const Eigen::Vector3d q = r * p + t;
      if (!(q.z() > 1e-9)) continue;
      f.dx[i] = k.fx * q.x() / q.z() + k.cx - x;
      f.dy[i] = k.fy * q.y() / q.z() + k.cy - y;
      f.valid[i] = true;
    }
  }
  return f;
}

FrameTriplet render_scene(const SyntheticScene& scene, int frame_index) {
  if (frame_index < 1 || std::size_t(frame_index) + 1 >= scene.camera_track.size()) {
    throw UsageError("render_scene: frame " + std::to_string(frame_index) + " needs a neighbour on each side (track length " +
                     std::to_string(scene.camera_track.size()) + ")");
  }
  RenderedFrame tgt = render_frame(scene, frame_index);
  RenderedFrame prev = render_frame(scene, frame_index - 1);
  RenderedFrame next = render_frame(scene, frame_index + 1);
  const RigidPose& cam_t = scene.camera_track[std::size_t(frame_index)];
  FrameTriplet out;
  out.gt_poses = {scene.camera_track[std::size_t(frame_index - 1)].inverse() * cam_t,
                  scene.camera_track[std::size_t(frame_index + 1)].inverse() * cam_t};
  out.gt_flow = analytic_flow(tgt.depth, scene.height, scene.width, out.gt_poses[1], scene.intrinsics);
  out.target = std::move(tgt.image);
  out.sources = {std::move(prev.image), std::move(next.image)};
  out.gt_depth = std::move(tgt.depth);
  out.source_depths = {std::move(prev.depth), std::move(next.depth)};
  out.gt_labels = std::move(tgt.labels);
  out.intrinsics = scene.intrinsics;
  return out;
}

void SynthConfig::validate() const {
  if (height < 1 || width < 1) throw ConfigError("synth: resolution must be positive");
  if (!(focal > 0)) throw ConfigError("synth: focal must be positive");
  if (!(min_depth > 0) || !(max_depth > 4 * min_depth)) {
    throw ConfigError("synth: need 0 < min_depth and max_depth > 4 * min_depth");
  }
  if (num_classes < 3 || num_classes > 255) throw ConfigError("synth: num_classes must be in 3..255");
  if (min_objects < 0 || max_objects < min_objects) throw ConfigError("synth: bad object count range");
  if (!(min_speed >= 0) || max_speed < min_speed) throw ConfigError("synth: bad speed range");
  if (!(std::abs(pitch) < 1.0)) throw ConfigError("synth: pitch must be below 1 radian");
}

CameraIntrinsics SynthConfig::intrinsics() const {
  return {focal * width, focal * width, (width - 1) / 2.0, (height - 1) / 2.0};
}

SyntheticScene make_scene(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  auto pick = [&](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };
  auto tex = [&] { return std::uint64_t(rng()); };

  SyntheticScene s;
  s.height = cfg.height;
  s.width = cfg.width;
  s.intrinsics = cfg.intrinsics();
  s.haze_distance = cfg.haze_distance;
  const double unit = cfg.min_depth / 1.25;
  s.texture_cell = 0.5 * unit;
  const auto& k = s.intrinsics;

  // The layout is built in a level frame (y down, gravity aligned); the
  // reference camera is pitched towards the ground: x_cam = tilt * x_level.
  const double cp = std::cos(cfg.pitch), sp = std::sin(cfg.pitch);
  Eigen::Matrix3d tilt;
  tilt << 1, 0, 0, 0, cp, -sp, 0, sp, cp;
  auto place = [&](PlanePatch p) {
    p.normal = tilt * p.normal;
    p.region_frame = tilt.transpose();
    return p;
  };

  const double wall = uni(0.6, 1.0) * cfg.max_depth;
  s.planes.push_back(place(PlanePatch::fronto_parallel(wall, tex(), 0)));

  // The bottom image row must see the ground no closer than min_depth.
  const double lowest_ray = cp * (cfg.height - 1 - k.cy + 0.5) / k.fy + sp;
  const double cam_height = std::max(uni(0.9, 1.2) * unit, 1.05 * cfg.min_depth * lowest_ray);
  PlanePatch ground;
  ground.normal = Eigen::Vector3d::UnitY();
  ground.offset = cam_height;
  ground.depth = cam_height / std::max(lowest_ray, 1e-6);
  ground.texture_seed = tex();
  ground.label = 1;
  s.planes.push_back(place(ground));

  const double half_fov = 0.5 * cfg.width / k.fx;
  const double zmin = 1.6 * cfg.min_depth, zmax = 0.5 * cfg.max_depth;
  const int objects = pick(cfg.min_objects, cfg.max_objects);
  for (int o = 0; o < objects; ++o) {
    const double z = std::exp(uni(std::log(zmin), std::log(zmax)));
    const double width = uni(0.5, 1.8) * unit, height = uni(0.6, 2.2) * unit;
    const double xc = uni(-0.9, 0.9) * half_fov * z;
    PlanePatch p;
    p.depth = z;
    p.texture_seed = tex();
    p.label = pick(2, cfg.num_classes - 1);
    if (uni(0, 1) < cfg.slanted_fraction) {
      const double a = (uni(0, 1) < 0.5 ? -1 : 1) * uni(0.3, 0.7);
      p.normal = Eigen::Vector3d(std::sin(a), 0, std::cos(a));
    }
    p.offset = p.normal.dot(Eigen::Vector3d(xc, 0, z));
    p.region = Eigen::Vector4d((xc - width / 2) / z, (xc + width / 2) / z, (cam_height - height) / z, cam_height / z);
    s.planes.push_back(place(p));
  }

  Eigen::Vector3d velocity = Eigen::Vector3d::Zero(), spin = Eigen::Vector3d::Zero();
  if (!cfg.static_camera) {
    const double sign = cfg.random_direction && uni(0, 1) < 0.5 ? -1.0 : 1.0;
    velocity = tilt * Eigen::Vector3d(sign * uni(cfg.min_speed, cfg.max_speed),
                                      uni(-0.03, 0.03) * unit, uni(-0.1, 0.25) * unit);
    spin = {uni(-0.005, 0.005), uni(-0.015, 0.015), 0.0};
  }
  for (int f = -1; f <= 1; ++f) s.camera_track.push_back({f * spin, f * velocity});
  return s;
}

SyntheticDataset::SyntheticDataset(SynthConfig config, std::size_t count, std::uint64_t seed)
    : config_(std::move(config)), count_(count), seed_(seed) {
  config_.validate();
}

SyntheticScene SyntheticDataset::scene(std::size_t index) const {
  if (index >= count_) throw UsageError("dataset index " + std::to_string(index) + " out of range");
  return make_scene(config_, splitmix(seed_ ^ splitmix(index + 0x51ed27ull)));
}

FrameTriplet SyntheticDataset::operator[](std::size_t index) const { return render_scene(scene(index), 1); }

std::vector<std::size_t> SyntheticDataset::split(bool train) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < count_; ++i) {
    if (is_train(i) == train) out.push_back(i);
  }
  return out;
}

namespace {

using nlohmann::json;

Image depth_image(const ArrayXd& d, int h, int w) {
  Image im(1, h, w);
  im.data = d.cast<float>();
  return im;
}

json pose_json(const RigidPose& p) {
  return {{"rotation", {p.rotation.x(), p.rotation.y(), p.rotation.z()}},
          {"translation", {p.translation.x(), p.translation.y(), p.translation.z()}}};
}

RigidPose pose_from_json(const json& j) {
  RigidPose p;
  for (int i = 0; i < 3; ++i) {
    p.rotation[i] = j.at("rotation").at(std::size_t(i)).get<double>();
    p.translation[i] = j.at("translation").at(std::size_t(i)).get<double>();
  }
  return p;
}

ArrayXd read_depth(const std::filesystem::path& path, int h, int w) {
  const Image im = read_pfm(path);
  if (im.c != 1 || im.h != h || im.w != w) throw ShapeError(path.string() + ": depth map shape differs from images");
  return im.data.cast<double>();
}

}  // namespace

void export_triplets(const std::filesystem::path& dir, std::span<const FrameTriplet> triplets) {
  std::filesystem::create_directories(dir);
  json list = json::array();
  for (std::size_t n = 0; n < triplets.size(); ++n) {
    const FrameTriplet& t = triplets[n];
    const int h = t.target.h, w = t.target.w;
    char stem[32];
    std::snprintf(stem, sizeof stem, "%06zu", n);
    const std::string s = stem;
    write_pnm(dir / (s + "_target.ppm"), t.target);
    write_pnm(dir / (s + "_prev.ppm"), t.sources[0]);
    write_pnm(dir / (s + "_next.ppm"), t.sources[1]);
    json entry = {{"target", s + "_target.ppm"},
                  {"sources", {s + "_prev.ppm", s + "_next.ppm"}},
                  {"poses", {pose_json(t.gt_poses[0]), pose_json(t.gt_poses[1])}},
                  {"intrinsics", {{"fx", t.intrinsics.fx}, {"fy", t.intrinsics.fy}, {"cx", t.intrinsics.cx}, {"cy", t.intrinsics.cy}}}};
    if (t.gt_depth.size()) {
      write_pfm(dir / (s + "_depth.pfm"), depth_image(t.gt_depth, h, w));
      entry["depth"] = s + "_depth.pfm";
    }
    if (t.source_depths[0].size() && t.source_depths[1].size()) {
      write_pfm(dir / (s + "_prev_depth.pfm"), depth_image(t.source_depths[0], h, w));
      write_pfm(dir / (s + "_next_depth.pfm"), depth_image(t.source_depths[1], h, w));
      entry["source_depths"] = {s + "_prev_depth.pfm", s + "_next_depth.pfm"};
    }
    if (t.gt_flow.dx.size()) {
      Image flow(3, h, w);
      for (Eigen::Index i = 0; i < t.gt_flow.dx.size(); ++i) {
        flow.data[i] = float(t.gt_flow.dx[i]);
        flow.data[i + flow.data.size() / 3] = float(t.gt_flow.dy[i]);
        flow.data[i + 2 * flow.data.size() / 3] = t.gt_flow.valid[i] ? 1.f : 0.f;
      }
      write_pfm(dir / (s + "_flow.pfm"), flow);
      entry["flow"] = s + "_flow.pfm";
    }
    if (!t.gt_labels.empty()) {
      write_labels(dir / (s + "_labels.pgm"), h, w, t.gt_labels);
      entry["labels"] = s + "_labels.pgm";
    }
    list.push_back(std::move(entry));
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << json{{"format", "pfn-triplets"}, {"version", 1}, {"triplets", list}}.dump(2) << "\n";
}

std::vector<FrameTriplet> load_triplets(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("cannot read " + (dir / "manifest.json").string());
  const json manifest = json::parse(in);
  if (manifest.value("format", "") != "pfn-triplets") throw std::runtime_error("manifest.json: unknown format");
  std::vector<FrameTriplet> out;
  for (const json& e : manifest.at("triplets")) {
    FrameTriplet t;
    t.target = read_pnm(dir / e.at("target").get<std::string>());
    const int h = t.target.h, w = t.target.w;
    for (int i = 0; i < 2; ++i) {
      t.sources[std::size_t(i)] = read_pnm(dir / e.at("sources").at(std::size_t(i)).get<std::string>());
      const Image& src = t.sources[std::size_t(i)];
      if (src.c != t.target.c || src.h != h || src.w != w) throw ShapeError("load_triplets: source image shape differs");
      t.gt_poses[std::size_t(i)] = pose_from_json(e.at("poses").at(std::size_t(i)));
    }
    const json& k = e.at("intrinsics");
    t.intrinsics = {k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(), k.at("cy").get<double>()};
    if (e.contains("depth")) t.gt_depth = read_depth(dir / e["depth"].get<std::string>(), h, w);
    if (e.contains("source_depths")) {
      for (int i = 0; i < 2; ++i) {
        t.source_depths[std::size_t(i)] = read_depth(dir / e["source_depths"][std::size_t(i)].get<std::string>(), h, w);
      }
    }
    if (e.contains("flow")) {
      const Image f = read_pfm(dir / e["flow"].get<std::string>());
      if (f.c != 3 || f.h != h || f.w != w) throw ShapeError("load_triplets: flow shape differs from images");
      const Eigen::Index n = Eigen::Index(h) * w;
      t.gt_flow = {h, w, f.data.segment(0, n).cast<double>(), f.data.segment(n, n).cast<double>(),
                   f.data.segment(2 * n, n) > 0.5f};
    }
    if (e.contains("labels")) {
      int lh = 0, lw = 0;
      t.gt_labels = read_labels(dir / e["labels"].get<std::string>(), lh, lw);
      if (lh != h || lw != w) throw ShapeError("load_triplets: label map shape differs from images");
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace pfn
