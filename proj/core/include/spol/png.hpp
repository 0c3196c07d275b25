#pragma once

#include <cstdint>
#include <filesystem>
#include <span>

namespace spol::io {

/// Writes an 8-bit PNG. channels is 1 (grayscale) or 3 (RGB, interleaved).
void write_png(const std::filesystem::path& path, std::span<const std::uint8_t> pixels,
               std::size_t width, std::size_t height, int channels);

}  // namespace spol::io
