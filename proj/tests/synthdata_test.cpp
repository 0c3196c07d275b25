#include <gtest/gtest.h>

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "spol/synthdata.hpp"

namespace {

using namespace spol;
using namespace spol::synthdata;

TEST(Generate, SameSeedAndIndexAreBitIdentical) {
  const DataConfig cfg;
  for (std::size_t i : {0u, 7u, 1234u}) {
    const auto a = generate_one(i, 42, cfg), b = generate_one(i, 42, cfg);
    EXPECT_EQ(a.label, b.label);
    EXPECT_EQ(a.gt_box, b.gt_box);
    ASSERT_EQ(a.image.size(), b.image.size());
    EXPECT_EQ(0, std::memcmp(a.image.data(), b.image.data(), a.image.size() * sizeof(float)));
  }
  // Batch generation matches one-at-a-time generation.
  const auto batch = generate(5, 42, cfg, 3);
  EXPECT_EQ(batch[2].image, generate_one(5, 42, cfg).image);
  EXPECT_NE(generate_one(0, 42, cfg).image, generate_one(0, 43, cfg).image);
}

TEST(Generate, ClassHistogramNearUniform) {
  const auto samples = generate(1000, 5, DataConfig{});
  std::array<int, kNumClasses> hist{};
  for (const auto& s : samples) ++hist[static_cast<std::size_t>(s.label)];
  for (int h : hist) {
    EXPECT_GE(h, 225);
    EXPECT_LE(h, 275);
  }
  // Stratified draws: any multiple of the class count is exactly balanced.
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    std::array<int, kNumClasses> exact{};
    for (const auto& s : generate(40, seed, DataConfig{})) ++exact[static_cast<std::size_t>(s.label)];
    for (int h : exact) EXPECT_EQ(h, 10);
  }
}

TEST(Generate, BoxesAreTightAndAreasInRange) {
  const DataConfig cfg;
  const auto samples = generate(1000, 6, cfg);
  const int s = static_cast<int>(cfg.image_size);
  for (const auto& smp : samples) {
    const auto& b = smp.gt_box;
    ASSERT_LE(b.x_min, b.x_max);
    ASSERT_LE(b.y_min, b.y_max);
    ASSERT_GE(b.x_min, 0);
    ASSERT_LT(b.x_max, s);
    auto on = [&](int x, int y) { return smp.shape_mask[static_cast<std::size_t>(y * s + x)] != 0; };
    bool top = false, bottom = false, left = false, right = false;
    std::size_t area = 0;
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        if (!on(x, y)) continue;
        ++area;
        ASSERT_TRUE(x >= b.x_min && x <= b.x_max && y >= b.y_min && y <= b.y_max);
        top |= y == b.y_min;
        bottom |= y == b.y_max;
        left |= x == b.x_min;
        right |= x == b.x_max;
      }
    }
    EXPECT_TRUE(top && bottom && left && right) << "sample " << smp.index;
    const double frac = static_cast<double>(area) / (s * s);
    EXPECT_GE(frac, cfg.min_area_frac);
    EXPECT_LE(frac, cfg.max_area_frac);
    for (float v : smp.image) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

TEST(Generate, ObjectTextureStandsOutFromBackground) {
  // Every sample: mean shape brightness exceeds mean brightness far from the box.
  const DataConfig cfg;
  const int s = static_cast<int>(cfg.image_size);
  for (const auto& smp : generate(200, 8, cfg)) {
    double in = 0, out = 0;
    std::size_t n_in = 0, n_out = 0;
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const std::size_t p = static_cast<std::size_t>(y * s + x);
        double v = 0;
        for (int c = 0; c < 3; ++c) v += smp.image[static_cast<std::size_t>(c * s * s) + p];
        if (smp.shape_mask[p]) {
          in += v, ++n_in;
        } else if (x < smp.gt_box.x_min - 3 || x > smp.gt_box.x_max + 3 || y < smp.gt_box.y_min - 3 ||
                   y > smp.gt_box.y_max + 3) {
          out += v, ++n_out;
        }
      }
    }
    if (n_out > 0) EXPECT_GT(in / n_in, out / n_out);
  }
}

TEST(Generate, SplitsFromDisjointRangesShareNoSample) {
  const DataConfig cfg;
  const auto train = generate(300, 9, cfg, 0), test = generate(100, 9, cfg, 300);
  std::set<std::vector<float>> seen;
  for (const auto& s : train) seen.insert(s.image);
  for (const auto& s : test) EXPECT_EQ(seen.count(s.image), 0u);
}

TEST(Generate, RejectsUnplaceableConfigs) {
  DataConfig cfg;
  cfg.min_area_frac = 0.6;
  cfg.max_area_frac = 0.9;
  EXPECT_THROW(generate(1, 0, cfg), std::invalid_argument);
  cfg = DataConfig{};
  cfg.min_area_frac = 0.3;
  cfg.max_area_frac = 0.2;
  EXPECT_THROW(generate(1, 0, cfg), std::invalid_argument);
  EXPECT_THROW(generate(0, 0, DataConfig{}), std::invalid_argument);
}

TEST(Manifest, RoundTripAndStack) {
  const auto samples = generate(4, 10, DataConfig{});
  const auto entries = parse_manifest(format_manifest(samples));
  ASSERT_EQ(entries.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(entries[i].index, samples[i].index);
    EXPECT_EQ(entries[i].label, samples[i].label);
    EXPECT_EQ(entries[i].box, samples[i].gt_box);
  }
  const auto t = stack_images(samples);
  EXPECT_EQ(t.shape(), (Shape{4, 3, 64, 64}));
  EXPECT_EQ(t.data()[3 * 64 * 64], samples[1].image[0]);
}

TEST(Manifest, DumpWritesPngsAndManifest) {
  const auto dir = std::filesystem::temp_directory_path() / "spol_dump_test";
  std::filesystem::remove_all(dir);
  dump_dataset(dir, generate(3, 11, DataConfig{}, 5));
  EXPECT_TRUE(std::filesystem::exists(dir / "000005.png"));
  EXPECT_TRUE(std::filesystem::exists(dir / "000007.png"));
  std::ifstream in(dir / "manifest.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "index,label,x_min,y_min,x_max,y_max");
  std::filesystem::remove_all(dir);
}

}  // namespace
