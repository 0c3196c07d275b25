#include "spol/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "spol/ops.hpp"
#include "spol/png.hpp"
#include "spol/rng.hpp"

namespace spol::synthdata {

namespace {

constexpr int kMaxPlacementAttempts = 200;

// Classes are stratified: each aligned block of kNumClasses indices holds a
// seeded permutation of all classes.
int stratified_label(std::size_t index, std::uint64_t seed) {
  const std::size_t k = static_cast<std::size_t>(kNumClasses);
  Rng rng(mix_seed(seed, 0x6c6162656cULL), index / k);
  std::array<int, kNumClasses> order{};
  for (std::size_t i = 0; i < k; ++i) order[i] = static_cast<int>(i);
  for (std::size_t i = k - 1; i > 0; --i) {
    std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);
  }
  return order[index % k];
}

bool inside(ShapeKind kind, double px, double py, double cx, double cy, double r) {
  const double dx = std::abs(px - cx), dy = std::abs(py - cy);
  switch (kind) {
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::kSquare:
      return dx <= r && dy <= r;
    case ShapeKind::kTriangle: {
      const double down = py - (cy - r);  // distance below the apex
      return down >= 0 && py <= cy + r && dx <= down / 2.0;
    }
    case ShapeKind::kCross: {
      const double arm = r / 3.0;
      return (dx <= arm && dy <= r) || (dy <= arm && dx <= r);
    }
  }
  return false;
}

// Smooth field in [-amplitude, amplitude]: a coarse random grid upsampled
// bilinearly to the image size.
std::vector<double> low_frequency_noise(std::size_t size, double amplitude, Rng& rng) {
  constexpr std::size_t kGrid = 4;
  std::vector<double> grid(kGrid * kGrid);
  for (auto& g : grid) g = rng.uniform(-amplitude, amplitude);
  NoGradGuard guard;
  const auto up = ops::upsample_bilinear(Tensor<double>(Shape{1, 1, kGrid, kGrid}, grid), size, size);
  return {up.data().begin(), up.data().end()};
}

struct Texture {
  std::array<double, 3> color;
  double cos_t, sin_t, period, phase, amplitude;

  double at(int channel, double x, double y) const {
    const double wave = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * (x * cos_t + y * sin_t) / period + phase);
    return color[static_cast<std::size_t>(channel)] * (1.0 - amplitude * wave);
  }
};

}  // namespace

const char* shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kCircle:
      return "circle";
    case ShapeKind::kSquare:
      return "square";
    case ShapeKind::kTriangle:
      return "triangle";
    case ShapeKind::kCross:
      return "cross";
  }
  return "?";
}

void DataConfig::validate() const {
  if (image_size < 16) throw std::invalid_argument("image_size must be at least 16");
  if (!(0 < min_area_frac && min_area_frac < max_area_frac && max_area_frac <= 1)) {
    throw std::invalid_argument("area fractions must satisfy 0 < min < max <= 1");
  }
  // The largest shape must fit with a one-pixel margin; the smallest must
  // still cover min_area_frac of the image for every kind.
  const double s = static_cast<double>(image_size);
  const double max_r = (s - 3.0) / 2.0;
  if (0.5 * (2 * max_r) * (2 * max_r) < min_area_frac * s * s) {
    throw std::invalid_argument("min_area_frac too large: triangles cannot be placed in a " +
                                std::to_string(image_size) + "px image");
  }
  if (min_speckles < 0 || max_speckles < min_speckles || max_speckle_size < 1) {
    throw std::invalid_argument("invalid speckle settings");
  }
}

Sample generate_one(std::size_t index, std::uint64_t seed, const DataConfig& config) {
  config.validate();
  Rng rng(seed, index);
  const int size = static_cast<int>(config.image_size);
  const double total = static_cast<double>(size) * size;

  Sample s;
  s.index = index;
  s.label = stratified_label(index, seed);
  const auto kind = static_cast<ShapeKind>(s.label);

  std::vector<std::uint8_t> mask(static_cast<std::size_t>(size * size));
  bool placed = false;
  const double max_r = (size - 3.0) / 2.0;
  for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed; ++attempt) {
    const double r = rng.uniform(4.0, max_r);
    const double cx = rng.uniform(r + 1.0, size - 2.0 - r);
    const double cy = rng.uniform(r + 1.0, size - 2.0 - r);
    std::size_t area = 0;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const bool in = inside(kind, x, y, cx, cy, r);
        mask[static_cast<std::size_t>(y * size + x)] = in ? 1 : 0;
        area += in ? 1 : 0;
      }
    }
    const double frac = static_cast<double>(area) / total;
    placed = frac >= config.min_area_frac && frac <= config.max_area_frac;
  }
  if (!placed) {
    throw std::invalid_argument("sample " + std::to_string(index) + ": could not place a " + shape_name(kind) +
                                " within the configured area range");
  }

  localization::BBox box{size, size, -1, -1};
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      if (!mask[static_cast<std::size_t>(y * size + x)]) continue;
      box.x_min = std::min(box.x_min, x);
      box.x_max = std::max(box.x_max, x);
      box.y_min = std::min(box.y_min, y);
      box.y_max = std::max(box.y_max, y);
    }
  }

  Texture tex;
  for (auto& c : tex.color) c = rng.uniform(0.55, 1.0);
  const double theta = rng.uniform(0.0, std::numbers::pi);
  tex.cos_t = std::cos(theta);
  tex.sin_t = std::sin(theta);
  tex.period = rng.uniform(3.0, 6.0);
  tex.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  tex.amplitude = rng.uniform(0.05, 0.2);

  std::array<double, 3> bg_base;
  for (auto& b : bg_base) b = rng.uniform(0.05, 0.4);

  // Distractor speckles: small patches in the object's texture, kept at
  // least three pixels away from the object's box so they never touch it.
  std::vector<std::uint8_t> speckle(mask.size(), 0);
  const int n_speckles = rng.uniform_int(config.min_speckles, config.max_speckles);
  for (int k = 0; k < n_speckles; ++k) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const int w = rng.uniform_int(1, config.max_speckle_size);
      const int h = rng.uniform_int(1, config.max_speckle_size);
      const int x0 = rng.uniform_int(0, size - w);
      const int y0 = rng.uniform_int(0, size - h);
      const bool clear = x0 + w - 1 < box.x_min - 3 || x0 > box.x_max + 3 || y0 + h - 1 < box.y_min - 3 ||
                         y0 > box.y_max + 3;
      if (!clear) continue;
      for (int y = y0; y < y0 + h; ++y) {
        for (int x = x0; x < x0 + w; ++x) speckle[static_cast<std::size_t>(y * size + x)] = 1;
      }
      break;
    }
  }

  s.image.resize(3 * mask.size());
  for (int ch = 0; ch < 3; ++ch) {
    const auto noise = low_frequency_noise(config.image_size, config.background_noise, rng);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const std::size_t p = static_cast<std::size_t>(y * size + x);
        double v;
        if (mask[p] || speckle[p]) {
          v = tex.at(ch, x, y);
        } else {
          v = bg_base[static_cast<std::size_t>(ch)] + noise[p];
        }
        s.image[static_cast<std::size_t>(ch) * mask.size() + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  s.gt_box = box;
  s.shape_mask = std::move(mask);
  return s;
}

std::vector<Sample> generate(std::size_t n, std::uint64_t seed, const DataConfig& config, std::size_t first_index) {
  if (n == 0) throw std::invalid_argument("generate: n must be positive");
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_one(first_index + i, seed, config));
  return out;
}

Tensor<float> stack_images(const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("stack_images: no samples");
  const std::size_t per = samples.front().image.size();
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(per / 3))));
  std::vector<float> data;
  data.reserve(per * samples.size());
  for (const auto& s : samples) data.insert(data.end(), s.image.begin(), s.image.end());
  return Tensor<float>(Shape{samples.size(), 3, side, side}, std::move(data));
}

std::string format_manifest(const std::vector<Sample>& samples) {
  std::ostringstream os;
  os << "index,label,x_min,y_min,x_max,y_max\n";
  for (const auto& s : samples) {
    os << s.index << ',' << s.label << ',' << s.gt_box.x_min << ',' << s.gt_box.y_min << ',' << s.gt_box.x_max
       << ',' << s.gt_box.y_max << '\n';
  }
  return os.str();
}

std::vector<ManifestEntry> parse_manifest(const std::string& text) {
  std::vector<ManifestEntry> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.rfind("index", 0) == 0) continue;
    std::istringstream ls(line);
    std::string f;
    std::vector<std::string> fields;
    while (std::getline(ls, f, ',')) fields.push_back(f);
    if (fields.size() != 6) {
      throw std::invalid_argument("manifest line " + std::to_string(line_no) + ": expected 6 fields");
    }
    out.push_back({std::stoul(fields[0]), std::stoi(fields[1]),
                   {std::stoi(fields[2]), std::stoi(fields[3]), std::stoi(fields[4]), std::stoi(fields[5])}});
  }
  return out;
}

void dump_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir);
  for (const auto& s : samples) {
    const std::size_t hw = s.image.size() / 3;
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(hw))));
    std::vector<std::uint8_t> rgb(3 * hw);
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t c = 0; c < 3; ++c) {
        rgb[p * 3 + c] = static_cast<std::uint8_t>(std::lround(s.image[c * hw + p] * 255.0f));
      }
    }
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.png", s.index);
    io::write_png(dir / name, rgb, side, side, 3);
  }
  std::ofstream(dir / "manifest.csv") << format_manifest(samples);
}

}  // namespace spol::synthdata
