#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace spol {

/// Single-channel map in [0, 1], row-major, indexed (row, col).
struct CamMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  int source_class = -1;

  CamMap() = default;
  CamMap(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}
  CamMap(std::size_t h, std::size_t w, std::vector<double> v) : height(h), width(w), values(std::move(v)) {}

  double& at(std::size_t row, std::size_t col) { return values[row * width + col]; }
  double at(std::size_t row, std::size_t col) const { return values[row * width + col]; }
  std::size_t size() const { return values.size(); }
};

/// Per-pixel foreground probability, clamped into (0, 1).
struct ProbMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double at(std::size_t row, std::size_t col) const { return values[row * width + col]; }
};

/// Binary plane (0/1), row-major.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  std::uint8_t at(std::size_t row, std::size_t col) const { return values[row * width + col]; }
};

}  // namespace spol
