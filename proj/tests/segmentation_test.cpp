#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <type_traits>

#include "spol/ops.hpp"
#include "spol/segmentation.hpp"
#include "test_util.hpp"

namespace {

using namespace spol;
using gppl::PixelClass;
using gppl::PseudoLabel;

PseudoLabel all_of(std::size_t h, std::size_t w, PixelClass c) { return {h, w, std::vector<PixelClass>(h * w, c)}; }

PseudoLabel random_label(std::mt19937_64& gen, std::size_t h, std::size_t w) {
  PseudoLabel l{h, w, {}};
  const PixelClass kinds[] = {PixelClass::kBackground, PixelClass::kConflict, PixelClass::kForeground};
  for (std::size_t i = 0; i < h * w; ++i) l.classes.push_back(kinds[gen() % 3]);
  return l;
}

ProbMask random_mask(std::mt19937_64& gen, std::size_t h, std::size_t w) {
  std::uniform_real_distribution<double> u(0.01, 0.99);
  ProbMask m{h, w, std::vector<double>(h * w)};
  for (auto& v : m.values) v = u(gen);
  return m;
}

TEST(MaskedBce, PerfectPredictionIsNearZero) {
  std::mt19937_64 gen(301);
  const auto label = random_label(gen, 8, 8);
  ProbMask p{8, 8, {}};
  for (auto c : label.classes) p.values.push_back(c == PixelClass::kForeground ? 1.0 : 0.0);
  EXPECT_LT(segmentation::masked_bce(p, label), 1e-5);
}

TEST(MaskedBce, HalfEverywhereIsLn2) {
  ProbMask p{4, 6, std::vector<double>(24, 0.5)};
  EXPECT_NEAR(segmentation::masked_bce(p, all_of(4, 6, PixelClass::kForeground)), std::log(2.0), 1e-6);
}

TEST(MaskedBce, AllConflictIsZeroWithZeroGradient) {
  const auto label = all_of(3, 3, PixelClass::kConflict);
  EXPECT_EQ(segmentation::masked_bce(ProbMask{3, 3, std::vector<double>(9, 0.3)}, label), 0.0);
  Tensor<double> p(Shape{1, 3, 3}, std::vector<double>(9, 0.3), true);
  const auto g = label.target(), w = label.weight();
  const std::vector<double> gd(g.begin(), g.end()), wd(w.begin(), w.end());
  auto loss = ops::masked_bce<double>(p, gd, wd);
  backward(loss);
  for (double v : p.grad()) EXPECT_EQ(v, 0.0);
}

TEST(MaskedBce, DenominatorIsFullPixelCount) {
  // One supervised FG pixel at p = 0.5 among 10 pixels: ln2 / 10.
  PseudoLabel label = all_of(2, 5, PixelClass::kConflict);
  label.classes[3] = PixelClass::kForeground;
  EXPECT_NEAR(segmentation::masked_bce(ProbMask{2, 5, std::vector<double>(10, 0.5)}, label), std::log(2.0) / 10, 1e-15);
}

TEST(MaskedBce, ConflictPerturbationLeavesLossBitIdentical) {
  std::mt19937_64 gen(302);
  for (int trial = 0; trial < 100; ++trial) {
    const auto label = random_label(gen, 6, 7);
    auto p = random_mask(gen, 6, 7);
    const double before = segmentation::masked_bce(p, label);
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      if (label.classes[i] == PixelClass::kConflict) p.values[i] = 1.0 - p.values[i] * 0.5;
    }
    EXPECT_EQ(segmentation::masked_bce(p, label), before);
  }
}

TEST(MaskedBce, GradientZeroAtConflictAndBceElsewhere) {
  std::mt19937_64 gen(303);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 1 + gen() % 5, w = 1 + gen() % 5;
    const auto label = random_label(gen, h, w);
    const auto mask = random_mask(gen, h, w);
    const auto g32 = label.target(), w32 = label.weight();
    const std::vector<double> g(g32.begin(), g32.end()), wt(w32.begin(), w32.end());
    Tensor<double> p(Shape{1, h, w}, mask.values, true);
    backward(ops::masked_bce<double>(p, g, wt));
    const double hw = static_cast<double>(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
      const double pi = mask.values[i];
      const double expected = wt[i] == 0 ? 0.0 : -(g[i] / pi - (1 - g[i]) / (1 - pi)) / hw;
      EXPECT_NEAR(p.grad()[i], expected, 1e-12 * std::max(1.0, std::abs(expected)));
    }
    EXPECT_LT(check::max_fd_error([&](const std::vector<Tensor<double>>& in) { return ops::masked_bce<double>(in[0], g, wt); },
                                    {Tensor<double>(Shape{1, h, w}, mask.values, true)}, 1e-5),
              1e-4);
  }
}

TEST(MaskedBce, NonNegativeAndShapeChecked) {
  std::mt19937_64 gen(304);
  for (int trial = 0; trial < 200; ++trial) {
    EXPECT_GE(segmentation::masked_bce(random_mask(gen, 4, 4), random_label(gen, 4, 4)), 0.0);
  }
  EXPECT_THROW(segmentation::masked_bce(random_mask(gen, 4, 4), random_label(gen, 4, 5)), std::exception);
}

// Bright square on a dark background; the label marks the square exactly.
void square_dataset(std::size_t n, Tensor<float>& images, std::vector<PseudoLabel>& labels, std::size_t s = 16) {
  std::mt19937_64 gen(305);
  std::vector<float> data(n * 3 * s * s);
  labels.clear();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t side = s / 4 + gen() % (s / 3), x0 = gen() % (s - side), y0 = gen() % (s - side);
    PseudoLabel l = all_of(s, s, PixelClass::kBackground);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          const bool in = x >= x0 && x < x0 + side && y >= y0 && y < y0 + side;
          data[((i * 3 + c) * s + y) * s + x] = in ? 0.9f : 0.1f;
          if (in) l.classes[y * s + x] = PixelClass::kForeground;
        }
      }
    }
    labels.push_back(std::move(l));
  }
  images = Tensor<float>(Shape{n, 3, s, s}, std::move(data));
}

mffnet::NetConfig small_seg_config(std::size_t image_size = 16) {
  mffnet::NetConfig c;
  c.image_size = image_size;
  c.stage_channels = {8, 8, 8, 8};
  c.fused_channels = 8;
  c.mca_latent = 4;
  c.fuse_k = 3;
  return segmentation::segmenter_config(c);
}

TEST(TrainSegmenter, SeparableSquaresReachHighPixelAccuracy) {
  Tensor<float> images;
  std::vector<PseudoLabel> labels;
  // Pipeline image size: the head predicts at a quarter of the input resolution.
  square_dataset(128, images, labels, 64);
  mffnet::Network<float> net(small_seg_config(64), 21);
  mffnet::TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 16;
  tc.lr = 0.05;
  segmentation::train_segmenter(net, images, labels, tc);
  const auto masks = segmentation::predict_masks(net, images);
  double acc = 0;
  for (std::size_t i = 0; i < masks.size(); ++i) acc += segmentation::pixel_accuracy(masks[i], labels[i]);
  EXPECT_GE(acc / masks.size(), 0.95);
}

TEST(TrainSegmenter, FlipAugmentationKeepsLabelsAligned) {
  // Asymmetric targets: a misaligned mirror would supervise the wrong side.
  Tensor<float> images;
  std::vector<PseudoLabel> labels;
  square_dataset(128, images, labels, 64);
  mffnet::Network<float> net(small_seg_config(64), 21);
  mffnet::TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 16;
  tc.lr = 0.05;
  tc.hflip = true;
  segmentation::train_segmenter(net, images, labels, tc);
  const auto masks = segmentation::predict_masks(net, images);
  double acc = 0;
  for (std::size_t i = 0; i < masks.size(); ++i) acc += segmentation::pixel_accuracy(masks[i], labels[i]);
  EXPECT_GE(acc / masks.size(), 0.95);
}

TEST(TrainSegmenter, ReproducibleLossCurve) {
  Tensor<float> images;
  std::vector<PseudoLabel> labels;
  square_dataset(32, images, labels);
  mffnet::TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.seed = 4;
  mffnet::Network<float> a(small_seg_config(), 22), b(small_seg_config(), 22);
  EXPECT_EQ(segmentation::train_segmenter(a, images, labels, tc).loss_curve,
            segmentation::train_segmenter(b, images, labels, tc).loss_curve);
}

TEST(TrainSegmenter, ClassAgnosticSignature) {
  // The only supervision the trainer can receive is the pseudo label list.
  static_assert(std::is_invocable_v<decltype(&segmentation::train_segmenter), mffnet::Network<float>&,
                                    const Tensor<float>&, const std::vector<PseudoLabel>&,
                                    const mffnet::TrainConfig&, const std::function<void(std::size_t, double)>&>);
  Tensor<float> images;
  std::vector<PseudoLabel> labels;
  square_dataset(4, images, labels);
  labels.pop_back();
  mffnet::Network<float> net(small_seg_config(), 23);
  EXPECT_THROW(segmentation::train_segmenter(net, images, labels, {}), std::invalid_argument);
  mffnet::Network<float> cls(mffnet::NetConfig{}, 1);
  square_dataset(4, images, labels);
  EXPECT_THROW(segmentation::train_segmenter(cls, images, labels, {}), std::logic_error);
}

TEST(PredictMask, ShapeRangeDeterminism) {
  mffnet::Network<float> net(small_seg_config(), 24);
  Tensor<float> images;
  std::vector<PseudoLabel> labels;
  square_dataset(2, images, labels);
  const std::vector<std::size_t> first{0};
  const auto img = mffnet::slice_batch(images, std::span<const std::size_t>(first));
  const auto a = segmentation::predict_mask(net, img), b = segmentation::predict_mask(net, img);
  EXPECT_EQ(a.height, 16u);
  EXPECT_EQ(a.width, 16u);
  EXPECT_EQ(a.values, b.values);
  for (double v : a.values) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  const auto batch = segmentation::predict_masks(net, images);
  EXPECT_EQ(batch.front().values, a.values);
}

}  // namespace
