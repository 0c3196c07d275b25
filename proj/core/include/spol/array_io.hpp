#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "spol/tensor.hpp"

namespace spol::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType { kF32, kF64, kU8, kI32 };

const char* dtype_name(DType dtype);

/// Portable dense array: an ASCII header line "v1 <dtype> <ndims> <d0> ..."
/// followed by the row-major little-endian payload.
struct DenseArray {
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<std::uint8_t> payload;

  std::size_t numel() const { return shape_numel(shape); }

  static DenseArray from_f32(Shape shape, const std::vector<float>& values);
  static DenseArray from_f64(Shape shape, const std::vector<double>& values);
  static DenseArray from_u8(Shape shape, std::vector<std::uint8_t> values);
  static DenseArray from_i32(Shape shape, const std::vector<std::int32_t>& values);

  // Conversions check the stored dtype and throw FormatError on mismatch,
  // except to_f64 which widens f32.
  std::vector<float> to_f32() const;
  std::vector<double> to_f64() const;
  std::vector<std::uint8_t> to_u8() const;
  std::vector<std::int32_t> to_i32() const;
};

std::string encode(const DenseArray& array);
DenseArray decode(const std::string& bytes);

void write_array(const std::filesystem::path& path, const DenseArray& array);
DenseArray read_array(const std::filesystem::path& path);

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& tensor);
/// Reads f32 or f64 payloads into a tensor of the requested precision.
template <typename T>
Tensor<T> read_tensor(const std::filesystem::path& path);

}  // namespace spol::io
