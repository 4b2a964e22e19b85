#include <gtest/gtest.h>

#include <numeric>

#include "test_util.hpp"

using namespace ctfm;
using testing_util::randn;

namespace {

LwamConfig config_r(std::size_t r) {
  LwamConfig c;
  c.mlp_reduction = r;
  return c;
}

void zero_linear(Linear<double>& l) {
  l.weight().fill(0.0);
  if (l.bias()) l.bias()->fill(0.0);
}

void expect_open_unit(const Tensor<double>& t) {
  for (double v : t.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

}  // namespace

TEST(ChannelAttention, GateShapeAndRange) {
  SplitMix64 rng(1);
  ChannelAttention<double> cam("cam", 16, config_r(4), rng);
  auto g = cam.forward(randn({3, 16, 5, 6}, 2, 4.0));
  EXPECT_EQ(g.shape(), (Shape{3, 16, 1, 1}));
  expect_open_unit(g);
}

TEST(ChannelAttention, ZeroMlpGivesOneHalf) {
  SplitMix64 rng(3);
  ChannelAttention<double> cam("cam", 8, config_r(2), rng);
  zero_linear(cam.fc1());
  zero_linear(cam.fc2());
  const auto g = cam.forward(randn({2, 8, 4, 4}, 4));
  for (double v : g.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(ChannelAttention, PermutationEquivariantUnderMatchingMlpPermutation) {
  // The pooled descriptors permute with the channels, so the gate permutes
  // identically once the MLP's input columns and output rows follow suit.
  const std::size_t c = 6;
  SplitMix64 rng(5);
  ChannelAttention<double> cam("cam", c, config_r(2), rng);
  SplitMix64 rng2(5);
  ChannelAttention<double> permuted("cam", c, config_r(2), rng2);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  const std::size_t hidden = cam.fc1().out_features();
  for (std::size_t h = 0; h < hidden; ++h)
    for (std::size_t i = 0; i < c; ++i) permuted.fc1().weight().at({h, i}) = cam.fc1().weight().at({h, perm[i]});
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t h = 0; h < hidden; ++h) permuted.fc2().weight().at({i, h}) = cam.fc2().weight().at({perm[i], h});
    (*permuted.fc2().bias())[i] = (*cam.fc2().bias())[perm[i]];
  }
  auto x = randn({2, c, 4, 5}, 6);
  Tensor<double> xp(x.shape());
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t k = 0; k < 20; ++k) xp[(n * c + i) * 20 + k] = x[(n * c + perm[i]) * 20 + k];
  auto g = cam.forward(x), gp = permuted.forward(xp);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < c; ++i) EXPECT_NEAR(gp.at({n, i, 0, 0}), g.at({n, perm[i], 0, 0}), 1e-12);
}

TEST(ChannelAttention, UsesMeanAndL2Pooling) {
  SplitMix64 rng(7);
  ChannelAttention<double> cam("cam", 3, config_r(1), rng);
  auto x = randn({1, 3, 4, 4}, 8);
  // Reference: one shared MLP on avg and on root-mean-square descriptors, summed.
  auto mlp = [&](const std::vector<double>& v) {
    auto& w1 = cam.fc1().weight();
    auto& w2 = cam.fc2().weight();
    std::vector<double> h(3), out(3);
    for (std::size_t j = 0; j < 3; ++j) {
      double a = (*cam.fc1().bias())[j];
      for (std::size_t i = 0; i < 3; ++i) a += w1.at({j, i}) * v[i];
      h[j] = std::clamp(a, 0.0, 6.0);
    }
    for (std::size_t i = 0; i < 3; ++i) {
      double a = (*cam.fc2().bias())[i];
      for (std::size_t j = 0; j < 3; ++j) a += w2.at({i, j}) * h[j];
      out[i] = a;
    }
    return out;
  };
  std::vector<double> avg(3, 0.0), rms(3, 0.0);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t k = 0; k < 16; ++k) {
      avg[c] += std::abs(x[c * 16 + k]) / 16.0;
      rms[c] += x[c * 16 + k] * x[c * 16 + k] / 16.0;
    }
    rms[c] = std::sqrt(rms[c]);
  }
  const auto a = mlp(avg), b = mlp(rms);
  auto g = cam.forward(x);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(g[c], 1.0 / (1.0 + std::exp(-(a[c] + b[c]))), 1e-12);
}

TEST(SpatialAttention, MapShapeAndRange) {
  SplitMix64 rng(9);
  SpatialAttention<double> sam("sam", LwamConfig{}, rng);
  auto m = sam.forward(randn({2, 5, 7, 3}, 10, 3.0));
  EXPECT_EQ(m.shape(), (Shape{2, 1, 7, 3}));
  expect_open_unit(m);
}

TEST(SpatialAttention, ZeroConvGivesOneHalf) {
  SplitMix64 rng(11);
  SpatialAttention<double> sam("sam", LwamConfig{}, rng);
  sam.conv().weight().fill(0.0);
  sam.conv().bias()->fill(0.0);
  const auto m = sam.forward(randn({1, 4, 5, 5}, 12));
  for (double v : m.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(SpatialAttention, TranslationMovesTheInterior) {
  SplitMix64 rng(13);
  SpatialAttention<double> sam("sam", LwamConfig{}, rng);
  const std::size_t h = 10, w = 12, dy = 2, dx = 3, c = 4;
  auto x = randn({1, c, h, w}, 14);
  Tensor<double> shifted({1, c, h, w});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = dy; i < h; ++i)
      for (std::size_t j = dx; j < w; ++j) shifted.at({0, k, i, j}) = x.at({0, k, i - dy, j - dx});
  auto m = sam.forward(x), ms = sam.forward(shifted);
  // Pixels whose 3x3 window stays inside both the copied region and the source.
  for (std::size_t i = dy + 1; i + 1 < h; ++i)
    for (std::size_t j = dx + 1; j + 1 < w; ++j)
      EXPECT_NEAR(ms.at({0, 0, i, j}), m.at({0, 0, i - dy, j - dx}), 1e-14) << i << "," << j;
}

TEST(SpatialAttention, InvariantToChannelOrder) {
  SplitMix64 rng(15);
  SpatialAttention<double> sam("sam", LwamConfig{}, rng);
  auto x = randn({1, 3, 4, 4}, 16);
  Tensor<double> xp(x.shape());
  const std::size_t perm[] = {2, 0, 1};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 16; ++k) xp[i * 16 + k] = x[perm[i] * 16 + k];
  EXPECT_LT(testing_util::max_abs_diff(sam.forward(x), sam.forward(xp)), 1e-14);
}

TEST(Lwam, ShapePreservedAndContractive) {
  SplitMix64 rng(17);
  Lwam<double> gate("lwam", 12, config_r(4), rng);
  for (std::uint64_t seed = 18; seed < 28; ++seed) {
    auto x = randn({2, 12, 6, 5}, seed, 5.0);
    auto y = gate.forward(x);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_LE(std::abs(y[i]), std::abs(x[i]));
  }
  CostReport report;
  EXPECT_EQ(gate.trace({2, 12, 6, 5}, report), (Shape{2, 12, 6, 5}));
}

TEST(Lwam, ChannelGateThenSpatialGateOnTheGatedTensor) {
  SplitMix64 rng(30);
  Lwam<double> gate("lwam", 8, config_r(2), rng);
  auto x = randn({2, 8, 5, 5}, 31);
  auto gated = mul(x, gate.channel().forward(x));
  auto expected = mul(gated, gate.spatial().forward(gated));
  EXPECT_TRUE(testing_util::bit_equal(gate.forward(x), expected));
  // The parallel reading (spatial map from the raw input) differs.
  auto parallel = mul(gated, gate.spatial().forward(x));
  EXPECT_GT(testing_util::max_abs_diff(gate.forward(x), parallel), 1e-9);
}

TEST(Lwam, ParameterFootprint) {
  for (std::size_t c : {8, 16, 48, 96}) {
    for (std::size_t r : {2, 4, 8}) {
      SplitMix64 rng(40);
      Lwam<double> gate("lwam", c, config_r(r), rng);
      const std::size_t hidden = std::max<std::size_t>(1, c / r);
      const std::size_t mlp = 2 * c * hidden + hidden + c;
      EXPECT_EQ(gate.parameter_count(), mlp + 19) << "C=" << c << " r=" << r;
      EXPECT_EQ(gate.spatial().parameter_count(), 19u);
      EXPECT_EQ(cost(gate, {1, c, 8, 8}).total_params(), gate.parameter_count());
    }
  }
}

TEST(Lwam, ReferenceParameterDeltaIsSmall) {
  const auto base = ModelConfig::reference();
  CdCtfm<float> backbone(base.with_modules(false, false));
  CdCtfm<float> with(base.with_modules(false, true));
  EXPECT_GT(with.parameter_count(), backbone.parameter_count());
  EXPECT_LT(with.parameter_count() - backbone.parameter_count(), 20000u);
}

TEST(Lwam, ConfigRejectsOtherPathCounts) {
  SplitMix64 rng(50);
  LwamConfig three;
  three.pooling_ps = {2.0, 1.0, 2.0};
  EXPECT_THROW(Lwam<double>("lwam", 8, three, rng), Error);
}

TEST(Lwam, GradientCheck) {
  SplitMix64 rng(60);
  Lwam<double> gate("lwam", 4, config_r(2), rng);
  // Strictly positive input keeps the L2 pooling away from |x|'s kink.
  auto x = testing_util::uniform({2, 4, 5, 5}, 61, 0.1, 1.0);
  auto inputs = gate.parameters();
  inputs.push_back({"x", x});
  const auto r = check_gradients([&] { return testing_util::sum_probe(gate.forward(x)); }, inputs);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}
