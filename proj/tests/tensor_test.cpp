#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "spol/ops.hpp"
#include "spol/tensor.hpp"
#include "test_util.hpp"

namespace {

using namespace spol;
using spol::check::max_fd_error;
using spol::check::random_tensor;
using spol::check::Td;

constexpr double kFdTol = 1e-4;

// Scalar probe of an arbitrary output: sum(out * R) with a fixed random R.
Td probe(const Td& out, std::mt19937_64& gen) {
  auto r = random_tensor(out.shape(), gen, -1, 1, false);
  return ops::sum(ops::mul(out, r));
}

// Values kept away from the ReLU kink so central differences are valid.
Td away_from_zero(Shape shape, std::mt19937_64& gen) {
  auto t = random_tensor(std::move(shape), gen);
  for (auto& v : t.mutable_data()) v = v < 0 ? v - 0.05 : v + 0.05;
  return t;
}

Shape random_shape4(std::mt19937_64& gen, std::size_t max_hw = 4) {
  std::uniform_int_distribution<std::size_t> n(1, 2), c(1, 3), hw(1, max_hw);
  return {n(gen), c(gen), hw(gen), hw(gen)};
}

TEST(Tensor, ShapeAndDataLengthAgree) {
  Td t(Shape{2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_THROW(Td(Shape{2, 2}, std::vector<double>(3)), ShapeError);
}

TEST(Elementwise, MulOnesIsOnes) {
  auto y = ops::mul(Td::ones({2, 2}), Td::ones({2, 2}));
  for (double v : y.data()) EXPECT_EQ(v, 1.0);
}

TEST(Elementwise, SigmoidOfZeroIsHalf) {
  auto y = ops::elementwise(ops::ElementwiseKind::kSigmoid, Td::zeros({3, 2}));
  for (double v : y.data()) EXPECT_EQ(v, 0.5);
}

TEST(Elementwise, AddGradientIsOne) {
  auto x = Td::full({2, 3}, 0.3, true);
  auto y = Td::full({2, 3}, -1.2, true);
  backward(ops::sum(ops::add(x, y)));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  std::mt19937_64 gen(1);
  auto a = random_tensor({2, 3}, gen), b = random_tensor({2, 3}, gen);
  EXPECT_LT(max_fd_error([](const std::vector<Td>& in) { return ops::sum(ops::add(in[0], in[1])); }, {a, b}),
            kFdTol);
}

TEST(Elementwise, ShapeMismatchNamesDims) {
  try {
    ops::add(Td::zeros({2, 3}), Td::zeros({3, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("(2, 3)"), std::string::npos) << e.what();
  }
}

TEST(Elementwise, ChannelBroadcast) {
  Td x(Shape{1, 2, 1, 2}, {1, 2, 3, 4});
  Td s(Shape{1, 2, 1, 1}, {10, 100});
  auto y = ops::mul(x, s);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{10, 20, 300, 400}));
  auto z = ops::add(s, x);
  EXPECT_EQ(std::vector<double>(z.data().begin(), z.data().end()), (std::vector<double>{11, 12, 103, 104}));
}

TEST(Elementwise, FiniteDifferenceProperty) {
  std::mt19937_64 gen(7);
  for (int trial = 0; trial < 100; ++trial) {
    const Shape shape = random_shape4(gen);
    const Shape chan{shape[0], shape[1], 1, 1};
    auto a = away_from_zero(shape, gen);
    auto b = random_tensor(shape, gen);
    auto s = random_tensor(chan, gen);
    auto r = random_tensor(shape, gen, -1, 1, false);
    auto loss = [&](Td out) { return ops::sum(ops::mul(out, r)); };
    EXPECT_LT(max_fd_error([&](const std::vector<Td>& in) { return loss(ops::add(in[0], in[1])); }, {a, b}), kFdTol);
    EXPECT_LT(max_fd_error([&](const std::vector<Td>& in) { return loss(ops::mul(in[0], in[1])); }, {a, b}), kFdTol);
    EXPECT_LT(max_fd_error([&](const std::vector<Td>& in) { return loss(ops::mul(in[0], in[1])); }, {a, s}), kFdTol);
    EXPECT_LT(max_fd_error([&](const std::vector<Td>& in) { return loss(ops::add(in[0], in[1])); }, {a, s}), kFdTol);
    EXPECT_LT(max_fd_error([&](const std::vector<Td>& in) { return loss(ops::sigmoid(in[0])); }, {a}), kFdTol);
    EXPECT_LT(max_fd_error([&](const std::vector<Td>& in) { return loss(ops::relu(in[0])); }, {a}), kFdTol);
    EXPECT_LT(max_fd_error([&](const std::vector<Td>& in) { return loss(ops::scale(in[0], 0.7)); }, {a}), kFdTol);
    EXPECT_LT(max_fd_error([&](const std::vector<Td>& in) { return ops::mean(ops::mul(in[0], in[0])); }, {a}), kFdTol);
  }
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 gen(3);
  auto x = random_tensor({1, 1, 5, 6}, gen);
  auto y = ops::conv2d(x, Td::ones({1, 1, 1, 1}), 1, 0);
  EXPECT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, OnesKernelOnOnes) {
  auto y = ops::conv2d(Td::ones({1, 1, 5, 5}), Td::ones({1, 1, 3, 3}), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 9.0);
}

TEST(Conv2d, OutputSizeFormula) {
  auto y = ops::conv2d(Td::zeros({2, 3, 9, 7}), Td::zeros({4, 3, 3, 3}), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{2, 4, 5, 4}));
}

TEST(Conv2d, Rejections) {
  EXPECT_THROW(ops::conv2d(Td::zeros({1, 2, 5, 5}), Td::zeros({1, 3, 3, 3}), 1, 0), ShapeError);
  EXPECT_THROW(ops::conv2d(Td::zeros({1, 1, 2, 2}), Td::zeros({1, 1, 3, 3}), 1, 0), ShapeError);
  EXPECT_THROW(ops::conv2d(Td::zeros({1, 1, 5, 5}), Td::zeros({1, 1, 3, 3}), 0, 0), ShapeError);
  EXPECT_THROW(ops::conv2d(Td::zeros({1, 1, 5, 5}), Td::zeros({1, 1, 3, 3}), 1, -1), ShapeError);
}

TEST(Conv2d, RandomInputGradient8x8) {
  std::mt19937_64 gen(11);
  auto x = random_tensor({1, 1, 8, 8}, gen);
  auto k = random_tensor({1, 1, 3, 3}, gen);
  auto r = random_tensor({1, 1, 6, 6}, gen, -1, 1, false);
  EXPECT_LT(max_fd_error([&](const std::vector<Td>& in) { return ops::sum(ops::mul(ops::conv2d(in[0], in[1], 1, 0), r)); },
                         {x, k}),
            kFdTol);
}

TEST(Conv2d, FiniteDifferenceProperty) {
  std::mt19937_64 gen(12);
  std::uniform_int_distribution<int> kd(1, 3), st(1, 2), pd(0, 1), hw(3, 6), ch(1, 3);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = kd(gen);
    const std::size_t h = static_cast<std::size_t>(std::max(hw(gen), k)), w = static_cast<std::size_t>(std::max(hw(gen), k));
    const int stride = st(gen), pad = pd(gen);
    auto x = random_tensor({static_cast<std::size_t>(1 + trial % 2), static_cast<std::size_t>(ch(gen)), h, w}, gen);
    auto kern = random_tensor({static_cast<std::size_t>(ch(gen)), x.dim(1), static_cast<std::size_t>(k),
                               static_cast<std::size_t>(k)},
                              gen);
    auto f = [&](const std::vector<Td>& in) {
      std::mt19937_64 g(trial);
      return probe(ops::conv2d(in[0], in[1], stride, pad), g);
    };
    EXPECT_LT(max_fd_error(f, {x, kern}), kFdTol) << "trial " << trial;
  }
}

TEST(GlobalAvgPool, Examples) {
  auto y = ops::global_avg_pool(Td::full({1, 1, 3, 4}, 3.0));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 3.0);
  EXPECT_EQ(ops::global_avg_pool(Td(Shape{1, 1, 2, 2}, {0, 1, 2, 3})).item(), 1.5);
}

TEST(GlobalAvgPool, GradientIsInverseArea) {
  std::mt19937_64 gen(5);
  auto x = random_tensor({1, 1, 3, 5}, gen);
  backward(ops::sum(ops::global_avg_pool(x)));
  for (double g : x.grad()) EXPECT_NEAR(g, 1.0 / 15.0, 1e-15);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = random_tensor(random_shape4(gen), gen);
    EXPECT_LT(max_fd_error([&](const std::vector<Td>& in) {
                std::mt19937_64 g(trial);
                return probe(ops::global_avg_pool(in[0]), g);
              },
                           {t}),
              kFdTol);
  }
}

// Direct scalar evaluation of align-corners-false bilinear sampling.
double bilinear_oracle(const std::vector<double>& img, int h, int w, int out_h, int out_w, int oy, int ox) {
  auto src = [](int o, int in, int out) {
    double s = (o + 0.5) * static_cast<double>(in) / out - 0.5;
    return std::max(s, 0.0);
  };
  const double sy = src(oy, h, out_h), sx = src(ox, w, out_w);
  const int y0 = std::min(static_cast<int>(std::floor(sy)), h - 1), x0 = std::min(static_cast<int>(std::floor(sx)), w - 1);
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - y0, fx = sx - x0;
  auto at = [&](int y, int x) { return img[static_cast<std::size_t>(y * w + x)]; };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

TEST(Upsample, ConstantStaysConstant) {
  auto y = ops::upsample_bilinear(Td::full({1, 2, 3, 5}, 0.25), 7, 11);
  for (double v : y.data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Upsample, SameSizeIsIdentity) {
  std::mt19937_64 gen(2);
  auto x = random_tensor({2, 2, 4, 3}, gen);
  auto y = ops::upsample_bilinear(x, 4, 3);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Upsample, TwoToFourMatchesScalarOracle) {
  const std::vector<double> img{1.0, 2.0, 3.0, 5.0};
  auto y = ops::upsample_bilinear(Td(Shape{1, 1, 2, 2}, img), 4, 4);
  for (int oy = 0; oy < 4; ++oy) {
    for (int ox = 0; ox < 4; ++ox) {
      EXPECT_NEAR(y.at(0, 0, oy, ox), bilinear_oracle(img, 2, 2, 4, 4, oy, ox), 1e-14);
    }
  }
  // A few hand values: corners copy, interior quarter blends.
  EXPECT_NEAR(y.at(0, 0, 0, 0), 1.0, 1e-15);
  EXPECT_NEAR(y.at(0, 0, 1, 1), 0.5625 * 1 + 0.1875 * 2 + 0.1875 * 3 + 0.0625 * 5, 1e-14);
}

TEST(Upsample, RandomSizesMatchOracle) {
  std::mt19937_64 gen(21);
  std::uniform_int_distribution<int> in(1, 5), extra(0, 6);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = in(gen), w = in(gen), oh = h + extra(gen), ow = w + extra(gen);
    auto x = random_tensor({1, 1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)}, gen);
    const std::vector<double> img(x.data().begin(), x.data().end());
    auto y = ops::upsample_bilinear(x, oh, ow);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) ASSERT_NEAR(y.at(0, 0, oy, ox), bilinear_oracle(img, h, w, oh, ow, oy, ox), 1e-12);
    }
  }
}

TEST(Upsample, RejectsDownsampling) {
  EXPECT_THROW(ops::upsample_bilinear(Td::zeros({1, 1, 4, 4}), 3, 8), ShapeError);
}

TEST(Upsample, NearestRepeatsPixels) {
  auto y = ops::upsample(Td(Shape{1, 1, 1, 2}, {1, 2}), 2, 4, ops::UpsampleMode::kNearest);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2}));
}

TEST(Upsample, FiniteDifferenceProperty) {
  std::mt19937_64 gen(22);
  std::uniform_int_distribution<int> extra(0, 5);
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s = random_shape4(gen);
    auto x = random_tensor(s, gen);
    const std::size_t oh = s[2] + extra(gen), ow = s[3] + extra(gen);
    const auto mode = trial % 4 == 0 ? ops::UpsampleMode::kNearest : ops::UpsampleMode::kBilinear;
    EXPECT_LT(max_fd_error([&](const std::vector<Td>& in) {
                std::mt19937_64 g(trial);
                return probe(ops::upsample(in[0], oh, ow, mode), g);
              },
                           {x}),
              kFdTol);
  }
}

TEST(Linear, ConcatCrossEntropyFiniteDifferences) {
  std::mt19937_64 gen(31);
  std::uniform_int_distribution<std::size_t> d(1, 5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = d(gen), in = d(gen), out = 1 + d(gen);
    auto x = random_tensor({n, in}, gen);
    auto w = random_tensor({out, in}, gen);
    auto b = random_tensor({out}, gen);
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(gen() % out);
    EXPECT_LT(max_fd_error([&](const std::vector<Td>& p) { return ops::cross_entropy(ops::linear(p[0], p[1], p[2]), labels); },
                           {x, w, b}),
              kFdTol);

    auto a = random_tensor({n, d(gen), 2, 2}, gen);
    auto c = random_tensor({n, d(gen), 2, 2}, gen);
    EXPECT_LT(max_fd_error([&](const std::vector<Td>& p) {
                std::mt19937_64 g(trial);
                return probe(ops::concat_channels<double>({p[0], p[1]}), g);
              },
                           {a, c}),
              kFdTol);
  }
}

TEST(Linear, UndefinedBiasAndShapeErrors) {
  auto y = ops::linear(Td(Shape{1, 2}, {1, 2}), Td(Shape{1, 2}, {3, 4}), Td{});
  EXPECT_EQ(y.item(), 11.0);
  EXPECT_THROW(ops::linear(Td::zeros({1, 3}), Td::zeros({2, 2}), Td{}), ShapeError);
  const std::vector<int> bad{5};
  EXPECT_THROW(ops::cross_entropy(Td::zeros({1, 3}), bad), std::out_of_range);
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
  const std::vector<int> labels{0, 3, 2};
  EXPECT_NEAR(ops::cross_entropy(Td::zeros({3, 4}), labels).item(), std::log(4.0), 1e-15);
}

TEST(MaskedBce, FiniteDifferences) {
  std::mt19937_64 gen(41);
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s{1 + gen() % 2, 1, 1 + gen() % 4, 1 + gen() % 4};
    auto p = random_tensor(s, gen, 0.05, 0.95);
    std::vector<double> g(p.numel()), w(p.numel());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = static_cast<double>(gen() % 2);
      w[i] = static_cast<double>(gen() % 3 != 0);
    }
    EXPECT_LT(max_fd_error([&](const std::vector<Td>& in) { return ops::masked_bce<double>(in[0], g, w); }, {p}, 1e-4),
              kFdTol);
  }
}

TEST(Backward, IdentityLoss) {
  auto x = Td::scalar(2.5, true);
  backward(x);
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Backward, MeanOfProductGivesScaledOtherBranch) {
  std::mt19937_64 gen(4);
  auto x = random_tensor({1, 1, 3, 4}, gen);
  auto y = random_tensor({1, 1, 3, 4}, gen);
  backward(ops::mean(ops::mul(x, y)));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x.grad()[i], y.data()[i] / 12.0, 1e-16);
}

TEST(Backward, ComposedGraphMatchesFiniteDifferences) {
  std::mt19937_64 gen(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto img = random_tensor({1, 2, 6, 6}, gen);
    auto k1 = random_tensor({3, 2, 3, 3}, gen, -0.5, 0.5);
    auto k2 = random_tensor({2, 3, 1, 1}, gen, -0.5, 0.5);
    auto f = [](const std::vector<Td>& p) {
      auto h = ops::sigmoid(ops::conv2d(p[0], p[1], 2, 1));  // (1,3,3,3)
      auto u = ops::upsample_bilinear(ops::conv2d(h, p[2], 1, 0), 5, 5);
      auto pooled = ops::global_avg_pool(ops::mul(u, u));
      return ops::sum(ops::mul(pooled, pooled));
    };
    EXPECT_LT(max_fd_error(f, {img, k1, k2}), kFdTol);
  }
}

TEST(Backward, RejectsNonScalar) {
  auto x = Td::ones({2}, true);
  EXPECT_THROW(backward(ops::scale(x, 2.0)), AutogradError);
}

TEST(Backward, SecondPassIsRejected) {
  auto x = Td::full({2, 2}, 1.5, true);
  auto loss = ops::sum(ops::mul(x, x));
  backward(loss);
  const std::vector<double> first(x.grad().begin(), x.grad().end());
  EXPECT_THROW(backward(loss), AutogradError);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), first);
}

TEST(Backward, OffPathTensorsHaveZeroGrad) {
  auto x = Td::full({2, 2}, 1.0, true);
  auto unused = Td::full({2, 2}, 3.0, true);
  auto side = ops::mul(unused, unused);  // built but not part of the loss
  backward(ops::sum(x));
  for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
  for (double g : side.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NoGradGuardSkipsTape) {
  auto x = Td::ones({2}, true);
  Td y;
  {
    NoGradGuard guard;
    y = ops::scale(x, 2.0);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_mode_enabled());
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  auto run = [] {
    std::mt19937_64 gen(99);
    auto x = random_tensor({2, 3, 8, 8}, gen);
    auto k = random_tensor({4, 3, 3, 3}, gen);
    return ops::upsample_bilinear(ops::relu(ops::conv2d(x, k, 2, 1)), 9, 9);
  };
  auto a = run(), b = run();
  ASSERT_EQ(a.numel(), b.numel());
  EXPECT_EQ(0, std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)));
}

TEST(Cast, FloatRoundTrip) {
  Tensor<float> f(Shape{2}, {1.5f, -2.0f});
  auto d = f.cast<double>();
  EXPECT_EQ(d.data()[0], 1.5);
  EXPECT_FALSE(d.requires_grad());
}

}  // namespace
