#include "pfn/serialize.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

namespace pfn {

namespace {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    std::memcpy(&v, bytes, sizeof(T));
  }
  return v;
}

template <typename T>
void put(std::ostream& os, T v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("tensor stream truncated");
  return to_little(v);
}

template <typename Scalar>
constexpr DType dtype_of() {
  return sizeof(Scalar) == 4 ? DType::Float32 : DType::Float64;
}

template <typename Stored, typename Scalar>
void read_values(std::istream& is, Array<Scalar>& out) {
  for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = Scalar(get<Stored>(is));
}

template <typename Scalar>
void write_header(std::ostream& os, const Shape& s) {
  put(os, static_cast<std::uint32_t>(dtype_of<Scalar>()));
  put(os, std::uint32_t{4});
  for (int d : {s.n, s.c, s.h, s.w}) put(os, static_cast<std::uint64_t>(d));
}

template <typename Scalar>
std::pair<DType, Shape> read_header(std::istream& is) {
  const auto dtype = static_cast<DType>(get<std::uint32_t>(is));
  if (dtype != DType::Float32 && dtype != DType::Float64) {
    throw std::runtime_error("unknown tensor dtype code " + std::to_string(std::uint32_t(dtype)));
  }
  const auto rank = get<std::uint32_t>(is);
  if (rank != 4) throw std::runtime_error("unsupported tensor rank " + std::to_string(rank));
  Shape s;
  s.n = int(get<std::uint64_t>(is));
  s.c = int(get<std::uint64_t>(is));
  s.h = int(get<std::uint64_t>(is));
  s.w = int(get<std::uint64_t>(is));
  return {dtype, s};
}

}  // namespace

template <typename Scalar>
void write_tensor(std::ostream& os, const Tensor<Scalar>& t) {
  write_header<Scalar>(os, t.shape());
  for (Eigen::Index i = 0; i < t.size(); ++i) put(os, t.value()[i]);
}

template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& is) {
  const auto [dtype, shape] = read_header<Scalar>(is);
  Array<Scalar> values(shape.size());
  if (dtype == DType::Float32) {
    read_values<float>(is, values);
  } else {
    read_values<double>(is, values);
  }
  return Tensor<Scalar>(shape, std::move(values));
}

template <typename Scalar>
void write_array(std::ostream& os, const Array<Scalar>& values) {
  write_header<Scalar>(os, Shape{1, 1, 1, int(values.size())});
  for (Eigen::Index i = 0; i < values.size(); ++i) put(os, values[i]);
}

template <typename Scalar>
Array<Scalar> read_array(std::istream& is) {
  return read_tensor<Scalar>(is).value();
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);
template void write_array(std::ostream&, const Array<float>&);
template void write_array(std::ostream&, const Array<double>&);
template Array<float> read_array(std::istream&);
template Array<double> read_array(std::istream&);

}  // namespace pfn
