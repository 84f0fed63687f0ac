#pragma once

#include "pfn/tensor.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace pfn {

/// Planar float image, channel-major (C, H, W).
struct Image {
  int c = 0, h = 0, w = 0;
  Eigen::ArrayXf data;

  Image() = default;
  Image(int channels, int height, int width, float fill = 0.f)
      : c(channels), h(height), w(width), data(Eigen::ArrayXf::Constant(Eigen::Index(channels) * height * width, fill)) {}

  float& at(int ch, int y, int x) { return data[(Eigen::Index(ch) * h + y) * w + x]; }
  float at(int ch, int y, int x) const { return data[(Eigen::Index(ch) * h + y) * w + x]; }
};

/// Stacks same-shape images into an (N, C, H, W) tensor.
template <typename Scalar>
Tensor<Scalar> to_tensor(std::span<const Image* const> images);

template <typename Scalar>
Tensor<Scalar> to_tensor(const Image& image) {
  const Image* p = &image;
  return to_tensor<Scalar>(std::span<const Image* const>(&p, 1));
}

/// 8-bit binary PPM (3 channels) or PGM (1 channel); values are clamped to [0, 1].
void write_pnm(const std::filesystem::path& path, const Image& image);
Image read_pnm(const std::filesystem::path& path);

/// Raw 8-bit label map as binary PGM.
void write_labels(const std::filesystem::path& path, int h, int w, std::span<const int> labels);
std::vector<int> read_labels(const std::filesystem::path& path, int& h, int& w);

/// Portable float map: 1 channel ("Pf") or 3 channels ("PF"), little-endian.
void write_pfm(const std::filesystem::path& path, const Image& image);
Image read_pfm(const std::filesystem::path& path);

}  // namespace pfn
