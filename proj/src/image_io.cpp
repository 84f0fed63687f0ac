#include "pfn/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace pfn {

template <typename Scalar>
Tensor<Scalar> to_tensor(std::span<const Image* const> images) {
  if (images.empty()) throw UsageError("to_tensor: no images");
  const Image& first = *images[0];
  Array<Scalar> v(Eigen::Index(images.size()) * first.data.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& im = *images[i];
    if (im.c != first.c || im.h != first.h || im.w != first.w) throw ShapeError("to_tensor: image shapes differ");
    v.segment(Eigen::Index(i) * im.data.size(), im.data.size()) = im.data.cast<Scalar>();
  }
  return Tensor<Scalar>(Shape{int(images.size()), first.c, first.h, first.w}, std::move(v));
}

template Tensor<float> to_tensor<float>(std::span<const Image* const>);
template Tensor<double> to_tensor<double>(std::span<const Image* const>);

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return in;
}

// Reads the next header token, skipping '#' comments.
std::string token(std::istream& in) {
  std::string t;
  while (in >> t) {
    if (t[0] != '#') return t;
    std::string rest;
    std::getline(in, rest);
  }
  throw std::runtime_error("truncated image header");
}

std::uint8_t to_byte(float v) {
  return std::uint8_t(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
}

}  // namespace

void write_pnm(const std::filesystem::path& path, const Image& image) {
  if (image.c != 1 && image.c != 3) throw ShapeError("write_pnm: need 1 or 3 channels");
  auto out = open_out(path);
  out << (image.c == 3 ? "P6" : "P5") << "\n" << image.w << " " << image.h << "\n255\n";
  std::vector<std::uint8_t> buf(std::size_t(image.data.size()));
  std::size_t k = 0;
  for (int y = 0; y < image.h; ++y) {
    for (int x = 0; x < image.w; ++x) {
      for (int c = 0; c < image.c; ++c) buf[k++] = to_byte(image.at(c, y, x));
    }
  }
  out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
}

Image read_pnm(const std::filesystem::path& path) {
  auto in = open_in(path);
  const std::string magic = token(in);
  if (magic != "P6" && magic != "P5") throw std::runtime_error(path.string() + ": not a binary PPM/PGM");
  const int w = std::stoi(token(in)), h = std::stoi(token(in)), maxval = std::stoi(token(in));
  if (maxval != 255) throw std::runtime_error(path.string() + ": only 8-bit images supported");
  in.get();
  Image im(magic == "P6" ? 3 : 1, h, w);
  std::vector<std::uint8_t> buf(std::size_t(im.data.size()));
  if (!in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()))) {
    throw std::runtime_error(path.string() + ": truncated pixel data");
  }
  std::size_t k = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < im.c; ++c) im.at(c, y, x) = float(buf[k++]) / 255.f;
    }
  }
  return im;
}

void write_labels(const std::filesystem::path& path, int h, int w, std::span<const int> labels) {
  if (labels.size() != std::size_t(h) * std::size_t(w)) throw ShapeError("write_labels: size mismatch");
  auto out = open_out(path);
  out << "P5\n" << w << " " << h << "\n255\n";
  for (int l : labels) {
    if (l < 0 || l > 255) throw ConfigError("write_labels: label outside 0..255");
    out.put(char(std::uint8_t(l)));
  }
}

std::vector<int> read_labels(const std::filesystem::path& path, int& h, int& w) {
  auto in = open_in(path);
  if (token(in) != "P5") throw std::runtime_error(path.string() + ": not a binary PGM");
  w = std::stoi(token(in));
  h = std::stoi(token(in));
  token(in);
  in.get();
  std::vector<std::uint8_t> buf(std::size_t(h) * std::size_t(w));
  if (!in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()))) {
    throw std::runtime_error(path.string() + ": truncated label data");
  }
  return {buf.begin(), buf.end()};
}

void write_pfm(const std::filesystem::path& path, const Image& image) {
  if (image.c != 1 && image.c != 3) throw ShapeError("write_pfm: need 1 or 3 channels");
  auto out = open_out(path);
  out << (image.c == 3 ? "PF" : "Pf") << "\n" << image.w << " " << image.h << "\n-1.0\n";
  // PFM rows run bottom to top.
  std::vector<float> row(std::size_t(image.w) * std::size_t(image.c));
  for (int y = image.h - 1; y >= 0; --y) {
    for (int x = 0; x < image.w; ++x) {
      for (int c = 0; c < image.c; ++c) row[std::size_t(x * image.c + c)] = image.at(c, y, x);
    }
    out.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size() * sizeof(float)));
  }
}

Image read_pfm(const std::filesystem::path& path) {
  auto in = open_in(path);
  const std::string magic = token(in);
  if (magic != "PF" && magic != "Pf") throw std::runtime_error(path.string() + ": not a PFM file");
  const int w = std::stoi(token(in)), h = std::stoi(token(in));
  const double scale = std::stod(token(in));
  if (scale >= 0) throw std::runtime_error(path.string() + ": big-endian PFM not supported");
  in.get();
  Image im(magic == "PF" ? 3 : 1, h, w);
  std::vector<float> row(std::size_t(w) * std::size_t(im.c));
  for (int y = h - 1; y >= 0; --y) {
    if (!in.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size() * sizeof(float)))) {
      throw std::runtime_error(path.string() + ": truncated PFM data");
    }
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < im.c; ++c) im.at(c, y, x) = row[std::size_t(x * im.c + c)];
    }
  }
  return im;
}

}  // namespace pfn
