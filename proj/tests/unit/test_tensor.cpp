#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "edgeped/tensor.hpp"
#include "oracles.hpp"

using namespace edgeped;

TEST(Tensor, ShapeAndIndexing) {
  Tensor t(2, 3, 4, 5);
  EXPECT_EQ(t.size(), 120u);
  EXPECT_EQ(t.shape().str(), "2x3x4x5");
  t.at(1, 2, 3, 4) = 7.0f;
  EXPECT_EQ(t.vec().back(), 7.0f);
  EXPECT_EQ(t.plane(1, 2).size(), 20u);
  EXPECT_THROW(Tensor(Shape{1, 1, 2, 2}, std::vector<float>(3)), DimensionError);
}

TEST(Conv2d, MatchesOracleOnFixedCase) {
  std::mt19937_64 rng(1);
  const auto x = oracle::random_tensor(rng, 1, 8, 16, 16);
  const auto p = oracle::random_conv(rng, 8, 8, 3, 2, 1, 1, true);
  const auto y = conv2d(x, p);
  EXPECT_EQ(y.shape(), (Shape{1, 8, 8, 8}));
  EXPECT_LT(oracle::max_abs_diff(y, oracle::conv(x, p)), 1e-5);
}

TEST(Conv2d, RandomShapesMatchOracle) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> ch(1, 6), ext(1, 12), kk(0, 2), ss(1, 2);
  int checked = 0;
  while (checked < 120) {
    const std::size_t k = 2 * kk(rng) + 1, s = ss(rng), pad = std::uniform_int_distribution<std::size_t>(0, k / 2)(rng);
    const std::size_t h = ext(rng), w = ext(rng);
    if (h + 2 * pad < k || w + 2 * pad < k) continue;
    const std::size_t in = ch(rng), out = ch(rng);
    const auto x = oracle::random_tensor(rng, 1 + checked % 2, in, h, w);
    const auto p = oracle::random_conv(rng, in, out, k, s, pad, 1, checked % 3 != 0);
    ASSERT_LT(oracle::max_abs_diff(conv2d(x, p), oracle::conv(x, p)), 1e-5) << "case " << checked;
    ++checked;
  }
}

TEST(Conv2d, ThreadCountDoesNotChangeResult) {
  std::mt19937_64 rng(3);
  const auto x = oracle::random_tensor(rng, 1, 16, 20, 20);
  const auto p = oracle::random_conv(rng, 16, 24, 3, 1, 1, 1, true);
  const auto one = conv2d(x, p, {1});
  EXPECT_EQ(one, conv2d(x, p, {3}));
  EXPECT_EQ(one, conv2d(x, p, {8}));
}

TEST(Conv2d, GroupedMatchesOracle) {
  std::mt19937_64 rng(4);
  const auto x = oracle::random_tensor(rng, 1, 6, 9, 9);
  const auto p = oracle::random_conv(rng, 6, 9, 3, 1, 1, 3, true);
  EXPECT_LT(oracle::max_abs_diff(conv2d(x, p), oracle::conv(x, p)), 1e-5);
}

TEST(Conv2d, RejectsBadParams) {
  Tensor x(1, 4, 8, 8);
  auto p = ConvParams::make(4, 4, 3);
  p.weights.pop_back();
  EXPECT_THROW(conv2d(x, p), DimensionError);
  auto wrong_in = ConvParams::make(3, 4, 3);
  EXPECT_THROW(conv2d(x, wrong_in), DimensionError);
  auto bad_groups = ConvParams::make(4, 4, 3, 1, 3);
  EXPECT_THROW(conv2d(x, bad_groups), DimensionError);
}

TEST(Depthwise, RandomShapesMatchOracle) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> ch(1, 8), ext(3, 12), ss(1, 2);
  for (int i = 0; i < 110; ++i) {
    const std::size_t c = ch(rng), k = i % 2 ? 3 : 5, s = ss(rng);
    const std::size_t h = std::max(ext(rng), k), w = std::max(ext(rng), k);
    const auto x = oracle::random_tensor(rng, 1, c, h, w);
    const auto p = oracle::random_conv(rng, c, c, k, s, k / 2, c, i % 4 != 0);
    ASSERT_LT(oracle::max_abs_diff(depthwise_conv2d(x, p), oracle::conv(x, p)), 1e-5) << "case " << i;
  }
}

TEST(Depthwise, RequiresOneGroupPerChannel) {
  Tensor x(1, 4, 6, 6);
  EXPECT_THROW(depthwise_conv2d(x, ConvParams::make(4, 4, 3, 1, 2)), MisuseError);
  EXPECT_THROW(depthwise_conv2d(x, ConvParams::make(4, 4, 3, 1, 1)), MisuseError);
}

TEST(Pointwise, IdentityAndSum) {
  std::mt19937_64 rng(6);
  const auto x = oracle::random_tensor(rng, 1, 2, 5, 5);
  auto id = ConvParams::make(2, 2, 1);
  id.weights = {1, 0, 0, 1};
  EXPECT_EQ(pointwise_conv2d(x, id), x);

  auto sum = ConvParams::make(2, 1, 1, 1, 1, false);
  sum.weights = {1, 1};
  const auto y = pointwise_conv2d(x, sum);
  for (std::size_t i = 0; i < 25; ++i) EXPECT_FLOAT_EQ(y.vec()[i], x.vec()[i] + x.vec()[25 + i]);
}

TEST(Pointwise, RandomShapesMatchOracleAndConv2d) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> ch(1, 16), ext(1, 10);
  for (int i = 0; i < 110; ++i) {
    const auto x = oracle::random_tensor(rng, 1, ch(rng), ext(rng), ext(rng));
    const auto p = oracle::random_conv(rng, x.c(), ch(rng), 1, 1, 0, 1, i % 2 == 0);
    const auto y = pointwise_conv2d(x, p);
    ASSERT_LT(oracle::max_abs_diff(y, oracle::conv(x, p)), 1e-5) << "case " << i;
    ASSERT_EQ(y, conv2d(x, p)) << "case " << i;
  }
}

TEST(Pointwise, RejectsSpatialKernels) {
  Tensor x(1, 2, 4, 4);
  EXPECT_THROW(pointwise_conv2d(x, ConvParams::make(2, 2, 3)), MisuseError);
}

TEST(BatchNormFold, ScalesWeightsAndBias) {
  auto p = ConvParams::make(1, 2, 1);
  p.weights = {1.5f, -2.0f};
  p.bias = {0.25f, 1.0f};
  const std::vector<float> gamma{2, 2}, beta{0, 0}, mean{0, 0}, var{1, 1};
  const auto f = batchnorm_fold(p, gamma, beta, mean, var, 0.0f);
  EXPECT_EQ(f.weights, (std::vector<float>{3.0f, -4.0f}));
  EXPECT_EQ(f.bias, (std::vector<float>{0.5f, 2.0f}));
}

TEST(BatchNormFold, MatchesUnfusedComputation) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(-1, 1), pos(0.1f, 2.0f);
  const auto x = oracle::random_tensor(rng, 1, 3, 7, 7);
  const auto p = oracle::random_conv(rng, 3, 4, 3, 1, 1, 1, true);
  std::vector<float> gamma(4), beta(4), mean(4), var(4);
  for (int i = 0; i < 4; ++i) gamma[i] = u(rng), beta[i] = u(rng), mean[i] = u(rng), var[i] = pos(rng);
  const float eps = 1e-3f;
  const auto fused = conv2d(x, batchnorm_fold(p, gamma, beta, mean, var, eps));
  auto two_step = oracle::conv(x, p);
  for (std::size_t o = 0; o < 4; ++o)
    for (float& v : two_step.plane(0, o)) v = gamma[o] * (v - mean[o]) / std::sqrt(var[o] + eps) + beta[o];
  EXPECT_LT(oracle::max_abs_diff(fused, two_step), 1e-5);
}

TEST(BatchNormFold, RejectsNegativeVariance) {
  const auto p = ConvParams::make(1, 1, 1);
  const std::vector<float> one{1}, zero{0}, neg{-0.5f};
  EXPECT_THROW(batchnorm_fold(p, one, zero, zero, neg, 1e-5f), DomainError);
  EXPECT_THROW(batchnorm_fold(p, one, zero, zero, std::vector<float>{1, 1}, 1e-5f), DimensionError);
}

TEST(Activations, LeakyAndRelu6) {
  Tensor x(Shape{1, 1, 1, 5}, std::vector<float>{-10, -0.0f, 0.5f, 6.0f, 9.0f});
  const auto l = leaky_relu(x, 0.1f);
  EXPECT_FLOAT_EQ(l.vec()[0], -1.0f);
  EXPECT_FLOAT_EQ(l.vec()[2], 0.5f);
  const auto r = relu6(x);
  EXPECT_EQ(r.vec(), (std::vector<float>{0, 0, 0.5f, 6, 6}));
  EXPECT_FALSE(std::signbit(r.vec()[1]));
}

TEST(Upsample, NearestDoublesEachPixel) {
  Tensor x(Shape{1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  const auto y = upsample_nearest2x(x);
  EXPECT_EQ(y.vec(), (std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
}

TEST(Concat, StacksChannelsAndNamesBadAxis) {
  std::mt19937_64 rng(9);
  const auto a = oracle::random_tensor(rng, 1, 2, 3, 3), b = oracle::random_tensor(rng, 1, 3, 3, 3);
  const auto y = concat_channels(a, b);
  ASSERT_EQ(y.c(), 5u);
  for (std::size_t c = 0; c < 5; ++c)
    for (std::size_t i = 0; i < 9; ++i)
      EXPECT_EQ(y.plane(0, c)[i], c < 2 ? a.plane(0, c)[i] : b.plane(0, c - 2)[i]);
  EXPECT_EQ(slice_channels(y, 2, 5), b);
  try {
    concat_channels(a, Tensor(1, 1, 3, 4));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_EQ(e.axis(), "w");
  }
}

TEST(MaxPool, RandomShapesMatchOracle) {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<std::size_t> ch(1, 4), ext(2, 12), kk(1, 3), ss(1, 2);
  int checked = 0;
  while (checked < 110) {
    const std::size_t k = kk(rng), s = ss(rng), pad = std::uniform_int_distribution<std::size_t>(0, k / 2)(rng);
    const auto x = oracle::random_tensor(rng, 1, ch(rng), ext(rng), ext(rng));
    if (x.h() + 2 * pad < k || x.w() + 2 * pad < k) continue;
    ASSERT_EQ(maxpool2d(x, k, s, pad), oracle::maxpool(x, k, s, pad)) << "case " << checked;
    ++checked;
  }
}

TEST(MaxPool, PaddingNeverWins) {
  Tensor x(Shape{1, 1, 2, 2}, std::vector<float>{-4, -3, -2, -1});
  const auto y = maxpool2d(x, 2, 1, 1);
  EXPECT_EQ(y.vec(), (std::vector<float>{-4, -3, -3, -2, -1, -1, -2, -1, -1}));
  EXPECT_THROW(maxpool2d(x, 3, 1, 0), DimensionError);
}

TEST(MaxPool, TwoByTwoWindow) {
  const Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  const auto y = maxpool2d(x, 2, 2);
  ASSERT_EQ(y.size(), 1u);
  EXPECT_EQ(y.vec()[0], 4.0f);
  const auto flat = maxpool2d(Tensor(1, 2, 6, 6, 1.5f), 2, 2);
  EXPECT_EQ(flat, Tensor(1, 2, 3, 3, 1.5f));
}

TEST(Depthwise, EqualsGroupedConv2dBitwise) {
  std::mt19937_64 rng(13);
  for (int i = 0; i < 30; ++i) {
    const std::size_t c = 1 + rng() % 8;
    const auto x = oracle::random_tensor(rng, 1, c, 4 + rng() % 9, 4 + rng() % 9);
    const auto p = oracle::random_conv(rng, c, c, 3, 1 + rng() % 2, 1, c, true);
    ASSERT_EQ(depthwise_conv2d(x, p), conv2d(x, p)) << "case " << i;
  }
}

TEST(Conv2d, LinearWithoutBias) {
  std::mt19937_64 rng(14);
  for (int i = 0; i < 30; ++i) {
    const auto x = oracle::random_tensor(rng, 1, 3, 7, 7);
    const auto p = oracle::random_conv(rng, 3, 4, 3, 1, 1, 1, false);
    const float alpha = std::uniform_real_distribution<float>(-2.0f, 2.0f)(rng);
    auto scaled = x;
    for (float& v : scaled.data()) v *= alpha;
    auto expected = conv2d(x, p);
    for (float& v : expected.data()) v *= alpha;
    ASSERT_LT(oracle::max_abs_diff(conv2d(scaled, p), expected), 1e-5) << "case " << i;
  }
}

TEST(Concat, EmptyChannelTensorIsNeutral) {
  std::mt19937_64 rng(15);
  const auto x = oracle::random_tensor(rng, 1, 3, 4, 5);
  EXPECT_EQ(concat_channels(x, Tensor(1, 0, 4, 5)), x);
}
