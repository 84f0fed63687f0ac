#pragma once

#include "pfn/tensor.hpp"

#include <iosfwd>

namespace pfn {

// Binary tensor layout, all fields little-endian:
//   u32 dtype   (1 = float32, 2 = float64)
//   u32 rank    (always 4)
//   u64 dims[rank]  (N, C, H, W)
//   dtype values[N*C*H*W]

enum class DType : std::uint32_t { Float32 = 1, Float64 = 2 };

template <typename Scalar>
void write_tensor(std::ostream& os, const Tensor<Scalar>& t);

/// Reads a tensor, converting from the stored dtype to Scalar if needed.
template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& is);

/// Raw values with the same encoding, used for optimizer state.
template <typename Scalar>
void write_array(std::ostream& os, const Array<Scalar>& values);
template <typename Scalar>
Array<Scalar> read_array(std::istream& is);

}  // namespace pfn
