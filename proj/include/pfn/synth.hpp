#pragma once

#include "pfn/depth_loss.hpp"
#include "pfn/image_io.hpp"
#include "pfn/metrics.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <iterator>
#include <limits>
#include <stdexcept>
#include <vector>

namespace pfn {

/// Scene cannot be rendered (camera on a plane, ray that hits nothing, ...).
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Textured planar patch, expressed in the reference camera frame: points X
/// with normal . X = offset such that Y = region_frame X has normalized
/// coordinates (Y.x / Y.z, Y.y / Y.z) inside `region` = (x0, x1, y0, y1).
struct PlanePatch {
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();
  double offset = 1.0;
  Eigen::Vector4d region = Eigen::Vector4d(-kUnbounded, kUnbounded, -kUnbounded, kUnbounded);
  Eigen::Matrix3d region_frame = Eigen::Matrix3d::Identity();
  double depth = 1.0;  // depth of the patch at its region center, for bookkeeping
  std::uint64_t texture_seed = 0;
  int label = 0;

  static constexpr double kUnbounded = std::numeric_limits<double>::infinity();

  static PlanePatch fronto_parallel(double depth, std::uint64_t seed, int label);
};

struct SyntheticScene {
  std::vector<PlanePatch> planes;        // nearest hit wins
  std::vector<RigidPose> camera_track;   // camera-to-reference transform per frame
  CameraIntrinsics intrinsics;
  int height = 64, width = 64;
  double haze_distance = 3.0;            // 0 disables haze
  double texture_cell = 0.05;            // coarsest texture cell, scene units
  Eigen::Vector3d haze_color{0.72, 0.78, 0.86};
};

struct RenderedFrame {
  Image image;                 // (3, H, W), values in [0, 1]
  ArrayXd depth;               // row-major H x W, z in the frame's camera
  std::vector<int> labels;
};

struct FrameTriplet {
  Image target;
  std::array<Image, 2> sources;       // previous, next frame
  ArrayXd gt_depth;
  std::array<ArrayXd, 2> source_depths;
  std::array<RigidPose, 2> gt_poses;  // target camera -> source camera
  FlowField gt_flow;                  // target -> next
  std::vector<int> gt_labels;
  CameraIntrinsics intrinsics;
};

RenderedFrame render_frame(const SyntheticScene& scene, int frame);

/// Target is `frame_index`, sources are its neighbours on the track.
FrameTriplet render_scene(const SyntheticScene& scene, int frame_index);

/// Displacement of each target pixel into `other`, from target depth and the
/// target -> other pose. Invalid where the point lands behind the other camera.
FlowField analytic_flow(const ArrayXd& depth, int h, int w, const RigidPose& target_to_other,
                        const CameraIntrinsics& k);

/// Lengths are in scene units; object sizes, camera height and texture scale
/// follow min_depth.
struct SynthConfig {
  int height = 64, width = 64;
  double focal = 0.8;          // fx = fy = focal * width
  double min_depth = 0.125, max_depth = 2.4;
  int num_classes = 8;         // 0 = far wall, 1 = ground, the rest are objects
  int min_objects = 2, max_objects = 4;
  double slanted_fraction = 0.4;
  double pitch = 0.25;         // camera tilt towards the ground, radians
  double min_speed = 0.02, max_speed = 0.045;  // lateral motion per frame
  bool random_direction = false;  // false: the camera always travels towards +x
  double haze_distance = 3.0;
  bool static_camera = false;

  void validate() const;
  CameraIntrinsics intrinsics() const;
};

/// Random scene with a three-frame track centred on the reference camera.
SyntheticScene make_scene(const SynthConfig& config, std::uint64_t seed);

/// Lazily rendered, reproducible sequence of triplets. Index i comes from
/// scene seed mix(seed, i); even indices are training data, odd are held out.
class SyntheticDataset {
 public:
  SyntheticDataset(SynthConfig config, std::size_t count, std::uint64_t seed);

  std::size_t size() const { return count_; }
  bool empty() const { return count_ == 0; }
  SyntheticScene scene(std::size_t index) const;
  FrameTriplet operator[](std::size_t index) const;
  static bool is_train(std::size_t index) { return index % 2 == 0; }
  std::vector<std::size_t> split(bool train) const;
  const SynthConfig& config() const { return config_; }

  class iterator {
   public:
    using iterator_category = std::input_iterator_tag;
    using value_type = FrameTriplet;
    using difference_type = std::ptrdiff_t;
    using pointer = void;
    using reference = FrameTriplet;
    iterator(const SyntheticDataset* d, std::size_t i) : d_(d), i_(i) {}
    FrameTriplet operator*() const { return (*d_)[i_]; }
    iterator& operator++() { ++i_; return *this; }
    iterator operator++(int) { iterator old = *this; ++i_; return old; }
    bool operator==(const iterator& o) const { return i_ == o.i_; }
   private:
    const SyntheticDataset* d_;
    std::size_t i_;
  };
  iterator begin() const { return {this, 0}; }
  iterator end() const { return {this, count_}; }

 private:
  SynthConfig config_;
  std::size_t count_;
  std::uint64_t seed_;
};

/// Writes images (PPM), depth and flow (PFM), labels (PGM) and manifest.json.
void export_triplets(const std::filesystem::path& dir, std::span<const FrameTriplet> triplets);

/// Reads a directory written by export_triplets. Depth, flow and labels are
/// optional in the manifest; missing ones come back empty.
std::vector<FrameTriplet> load_triplets(const std::filesystem::path& dir);

}  // namespace pfn
