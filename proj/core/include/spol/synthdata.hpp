#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spol/localization.hpp"
#include "spol/tensor.hpp"

namespace spol::synthdata {

enum class ShapeKind : int { kCircle = 0, kSquare = 1, kTriangle = 2, kCross = 3 };
inline constexpr int kNumClasses = 4;

const char* shape_name(ShapeKind kind);

struct DataConfig {
  std::size_t image_size = 64;
  double min_area_frac = 0.05;
  double max_area_frac = 0.50;
  int min_speckles = 4;
  int max_speckles = 10;
  int max_speckle_size = 4;
  /// Amplitude of the low-frequency background noise.
  double background_noise = 0.15;

  void validate() const;
};

struct Sample {
  std::size_t index = 0;
  std::vector<float> image;            // 3 x H x W, values in [0, 1]
  int label = 0;                       // ShapeKind as int
  localization::BBox gt_box;           // evaluation only
  std::vector<std::uint8_t> shape_mask;  // H x W, 1 on shape pixels; evaluation only
};

/// Sample `index` of the dataset defined by (seed, config). Depends on
/// nothing but those three values.
Sample generate_one(std::size_t index, std::uint64_t seed, const DataConfig& config);

/// Samples first_index .. first_index + n - 1.
std::vector<Sample> generate(std::size_t n, std::uint64_t seed, const DataConfig& config,
                             std::size_t first_index = 0);

/// Stacks images into (N, 3, H, W).
Tensor<float> stack_images(const std::vector<Sample>& samples);

/// Manifest lines "index,label,x_min,y_min,x_max,y_max".
std::string format_manifest(const std::vector<Sample>& samples);

struct ManifestEntry {
  std::size_t index = 0;
  int label = 0;
  localization::BBox box;
};
std::vector<ManifestEntry> parse_manifest(const std::string& text);

/// Writes one RGB PNG per sample plus manifest.csv into dir.
void dump_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples);

}  // namespace spol::synthdata
