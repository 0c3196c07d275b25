#include "spol/array_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace spol::io {

namespace {

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kF32:
    case DType::kI32:
      return 4;
    case DType::kF64:
      return 8;
    case DType::kU8:
      return 1;
  }
  return 0;
}

DType parse_dtype(const std::string& name) {
  if (name == "f32") return DType::kF32;
  if (name == "f64") return DType::kF64;
  if (name == "u8") return DType::kU8;
  if (name == "i32") return DType::kI32;
  throw FormatError("unknown dtype '" + name + "'");
}

void check_count(const Shape& shape, std::size_t n) {
  if (shape_numel(shape) != n) {
    throw std::invalid_argument("array shape " + shape_to_string(shape) + " needs " +
                                std::to_string(shape_numel(shape)) + " values, got " + std::to_string(n));
  }
}

template <typename V>
std::vector<std::uint8_t> pack(const std::vector<V>& values) {
  std::vector<std::uint8_t> out(values.size() * sizeof(V));
  std::memcpy(out.data(), values.data(), out.size());
  if constexpr (std::endian::native == std::endian::big && sizeof(V) > 1) {
    for (std::size_t i = 0; i < out.size(); i += sizeof(V)) {
      std::reverse(out.begin() + i, out.begin() + i + sizeof(V));
    }
  }
  return out;
}

template <typename V>
std::vector<V> unpack(const std::vector<std::uint8_t>& bytes) {
  std::vector<std::uint8_t> copy = bytes;
  if constexpr (std::endian::native == std::endian::big && sizeof(V) > 1) {
    for (std::size_t i = 0; i < copy.size(); i += sizeof(V)) {
      std::reverse(copy.begin() + i, copy.begin() + i + sizeof(V));
    }
  }
  std::vector<V> out(copy.size() / sizeof(V));
  std::memcpy(out.data(), copy.data(), out.size() * sizeof(V));
  return out;
}

void expect(const DenseArray& a, DType dtype) {
  if (a.dtype != dtype) {
    throw FormatError(std::string("dense array holds ") + dtype_name(a.dtype) + ", expected " +
                      dtype_name(dtype));
  }
}

}  // namespace

const char* dtype_name(DType dtype) {
  switch (dtype) {
    case DType::kF32:
      return "f32";
    case DType::kF64:
      return "f64";
    case DType::kU8:
      return "u8";
    case DType::kI32:
      return "i32";
  }
  return "?";
}

DenseArray DenseArray::from_f32(Shape shape, const std::vector<float>& values) {
  check_count(shape, values.size());
  return {DType::kF32, std::move(shape), pack(values)};
}
DenseArray DenseArray::from_f64(Shape shape, const std::vector<double>& values) {
  check_count(shape, values.size());
  return {DType::kF64, std::move(shape), pack(values)};
}
DenseArray DenseArray::from_u8(Shape shape, std::vector<std::uint8_t> values) {
  check_count(shape, values.size());
  return {DType::kU8, std::move(shape), std::move(values)};
}
DenseArray DenseArray::from_i32(Shape shape, const std::vector<std::int32_t>& values) {
  check_count(shape, values.size());
  return {DType::kI32, std::move(shape), pack(values)};
}

std::vector<float> DenseArray::to_f32() const {
  expect(*this, DType::kF32);
  return unpack<float>(payload);
}

std::vector<double> DenseArray::to_f64() const {
  if (dtype == DType::kF32) {
    const auto f = unpack<float>(payload);
    return {f.begin(), f.end()};
  }
  expect(*this, DType::kF64);
  return unpack<double>(payload);
}

std::vector<std::uint8_t> DenseArray::to_u8() const {
  expect(*this, DType::kU8);
  return payload;
}

std::vector<std::int32_t> DenseArray::to_i32() const {
  expect(*this, DType::kI32);
  return unpack<std::int32_t>(payload);
}

std::string encode(const DenseArray& array) {
  if (array.payload.size() != array.numel() * dtype_size(array.dtype)) {
    throw FormatError("dense array payload size does not match shape " +
                      shape_to_string(array.shape));
  }
  std::ostringstream header;
  header << "v1 " << dtype_name(array.dtype) << ' ' << array.shape.size();
  for (std::size_t d : array.shape) header << ' ' << d;
  header << '\n';
  std::string out = header.str();
  out.append(reinterpret_cast<const char*>(array.payload.data()), array.payload.size());
  return out;
}

DenseArray decode(const std::string& bytes) {
  const auto eol = bytes.find('\n');
  if (eol == std::string::npos) throw FormatError("dense array: missing header line");
  std::istringstream header(bytes.substr(0, eol));
  std::string version, dtype_str;
  std::size_t ndims = 0;
  if (!(header >> version >> dtype_str >> ndims) || version != "v1") {
    throw FormatError("dense array: malformed header '" + bytes.substr(0, eol) + "'");
  }
  DenseArray a;
  a.dtype = parse_dtype(dtype_str);
  a.shape.resize(ndims);
  for (auto& d : a.shape) {
    if (!(header >> d)) throw FormatError("dense array: header lists fewer dims than declared");
  }
  std::string extra;
  if (header >> extra) throw FormatError("dense array: trailing header tokens");
  const std::size_t expected = a.numel() * dtype_size(a.dtype);
  if (bytes.size() - eol - 1 != expected) {
    throw FormatError("dense array: payload has " + std::to_string(bytes.size() - eol - 1) +
                      " bytes, header implies " + std::to_string(expected));
  }
  a.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(eol) + 1, bytes.end());
  return a;
}

void write_array(const std::filesystem::path& path, const DenseArray& array) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  const std::string bytes = encode(array);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

DenseArray read_array(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& tensor) {
  std::vector<T> values(tensor.data().begin(), tensor.data().end());
  if constexpr (std::is_same_v<T, float>) {
    write_array(path, DenseArray::from_f32(tensor.shape(), values));
  } else {
    write_array(path, DenseArray::from_f64(tensor.shape(), values));
  }
}

template <typename T>
Tensor<T> read_tensor(const std::filesystem::path& path) {
  const DenseArray a = read_array(path);
  if (a.dtype == DType::kF32) {
    const auto v = a.to_f32();
    return Tensor<T>(a.shape, std::vector<T>(v.begin(), v.end()));
  }
  const auto v = a.to_f64();
  return Tensor<T>(a.shape, std::vector<T>(v.begin(), v.end()));
}

template void write_tensor(const std::filesystem::path&, const Tensor<float>&);
template void write_tensor(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> read_tensor(const std::filesystem::path&);
template Tensor<double> read_tensor(const std::filesystem::path&);

}  // namespace spol::io
