#include <gtest/gtest.h>
#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "spol/array_io.hpp"
#include "spol/png.hpp"

namespace {

using namespace spol;
using namespace spol::io;

TEST(ArrayIo, HeaderFormat) {
  const auto bytes = encode(DenseArray::from_f32(Shape{2, 3}, {1, 2, 3, 4, 5, 6}));
  const std::string header = bytes.substr(0, bytes.find('\n'));
  EXPECT_EQ(header, "v1 f32 2 2 3");
  EXPECT_EQ(bytes.size(), header.size() + 1 + 6 * 4);
  // Little-endian 1.0f = 00 00 80 3f.
  EXPECT_EQ(static_cast<unsigned char>(bytes[header.size() + 1 + 3]), 0x3f);
  EXPECT_EQ(static_cast<unsigned char>(bytes[header.size() + 1 + 2]), 0x80);
}

TEST(ArrayIo, RoundTripAllDtypes) {
  const std::vector<double> d{-1.5, 0.0, std::numeric_limits<double>::max(), 1e-300};
  EXPECT_EQ(decode(encode(DenseArray::from_f64(Shape{4}, d))).to_f64(), d);
  const std::vector<float> f{0.25f, -7.0f};
  EXPECT_EQ(decode(encode(DenseArray::from_f32(Shape{1, 2}, f))).to_f32(), f);
  EXPECT_EQ(decode(encode(DenseArray::from_f32(Shape{1, 2}, f))).to_f64(), (std::vector<double>{0.25, -7.0}));
  const std::vector<std::uint8_t> u{0, 128, 255};
  EXPECT_EQ(decode(encode(DenseArray::from_u8(Shape{3}, u))).to_u8(), u);
  const std::vector<std::int32_t> i{-3, 0, 2147483647};
  const auto back = decode(encode(DenseArray::from_i32(Shape{3, 1}, i)));
  EXPECT_EQ(back.to_i32(), i);
  EXPECT_EQ(back.shape, (Shape{3, 1}));
}

TEST(ArrayIo, Rejections) {
  EXPECT_THROW(decode("v2 f32 1 1\n0000"), FormatError);
  EXPECT_THROW(decode("v1 f16 1 1\n00"), FormatError);
  EXPECT_THROW(decode("v1 f32 1 2\n0000"), FormatError);  // short payload
  EXPECT_THROW(decode("no newline"), FormatError);
  EXPECT_THROW(decode(encode(DenseArray::from_u8(Shape{1}, {1}))).to_f32(), FormatError);
  EXPECT_THROW(DenseArray::from_f32(Shape{2, 2}, {1, 2, 3}), std::invalid_argument);
  EXPECT_THROW(read_array("/nonexistent/file.arr"), std::runtime_error);
}

TEST(ArrayIo, TensorFiles) {
  const auto path = std::filesystem::temp_directory_path() / "spol_tensor_test.arr";
  Tensor<float> t(Shape{1, 2, 2}, {1, 2, 3, 4});
  write_tensor(path, t);
  const auto back = read_tensor<double>(path);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(back.data()[3], 4.0);
  std::filesystem::remove(path);
}

std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::string& s, std::size_t at) {
  return (std::uint32_t(std::uint8_t(s[at])) << 24) | (std::uint32_t(std::uint8_t(s[at + 1])) << 16) |
         (std::uint32_t(std::uint8_t(s[at + 2])) << 8) | std::uint32_t(std::uint8_t(s[at + 3]));
}

TEST(Png, DecodesBackToPixels) {
  const auto path = std::filesystem::temp_directory_path() / "spol_png_test.png";
  const std::size_t w = 5, h = 3;
  std::vector<std::uint8_t> px(w * h * 3);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(i * 7);
  write_png(path, px, w, h, 3);
  const std::string s = read_all(path);
  ASSERT_EQ(s.substr(0, 8), std::string("\x89PNG\r\n\x1a\n", 8));
  EXPECT_EQ(s.substr(12, 4), "IHDR");
  EXPECT_EQ(be32(s, 16), w);
  EXPECT_EQ(be32(s, 20), h);
  // Walk chunks, verify CRCs, collect IDAT.
  std::string idat;
  std::size_t pos = 8;
  bool saw_end = false;
  while (pos < s.size()) {
    const std::uint32_t len = be32(s, pos);
    const std::string type = s.substr(pos + 4, 4);
    const auto crc = crc32(crc32(0, nullptr, 0), reinterpret_cast<const Bytef*>(s.data() + pos + 4), len + 4);
    EXPECT_EQ(crc, be32(s, pos + 8 + len)) << type;
    if (type == "IDAT") idat += s.substr(pos + 8, len);
    if (type == "IEND") saw_end = true;
    pos += 12 + len;
  }
  EXPECT_TRUE(saw_end);
  std::vector<std::uint8_t> raw(h * (1 + w * 3));
  uLongf raw_len = raw.size();
  ASSERT_EQ(uncompress(raw.data(), &raw_len, reinterpret_cast<const Bytef*>(idat.data()), idat.size()), Z_OK);
  ASSERT_EQ(raw_len, raw.size());
  for (std::size_t y = 0; y < h; ++y) {
    EXPECT_EQ(raw[y * (1 + w * 3)], 0);  // filter type none
    EXPECT_EQ(0, std::memcmp(&raw[y * (1 + w * 3) + 1], &px[y * w * 3], w * 3));
  }
  EXPECT_THROW(write_png(path, px, w, h, 2), std::invalid_argument);
  EXPECT_THROW(write_png(path, px, w + 1, h, 3), std::invalid_argument);
  std::filesystem::remove(path);
}

}  // namespace
