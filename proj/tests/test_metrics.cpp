#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace ctfm;

namespace {

Tensor<double> random_mask(const Shape& s, SplitMix64& rng, double p = 0.5) {
  Tensor<double> m(s);
  for (auto& v : m.data()) v = rng.uniform() < p ? 1.0 : 0.0;
  return m;
}

}  // namespace

TEST(DiceBce, PerfectPredictionIsNearZero) {
  auto ones = Tensor<double>::ones({1, 1, 8, 8});
  LossTerms terms;
  const double loss = dice_bce_loss(ones, ones, &terms).item();
  EXPECT_NEAR(terms.dice, 0.0, 1e-12);
  EXPECT_NEAR(terms.bce, 0.0, 1e-6);
  EXPECT_GE(terms.bce, 0.0);
  EXPECT_NEAR(loss, 0.0, 1e-6);
}

TEST(DiceBce, HalfAgainstOnesClosedForm) {
  Tensor<double> p({1, 1, 4, 5}, 0.5);
  auto y = Tensor<double>::ones({1, 1, 4, 5});
  LossTerms terms;
  dice_bce_loss(p, y, &terms);
  EXPECT_NEAR(terms.bce, std::log(2.0), 1e-12);
  EXPECT_NEAR(terms.dice, 0.2, 1e-12);
}

TEST(DiceBce, MatchesScalarBruteForce) {
  SplitMix64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = Tensor<double>::uniform({2, 1, 6, 6}, rng, 0.0, 1.0);
    p[0] = 0.0;  // exercises the clamp
    p[1] = 1.0;
    auto y = random_mask(p.shape(), rng);
    double yp = 0.0, yy = 0.0, pp = 0.0, bce = 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double q = std::min(std::max(p[i], 1e-7), 1.0 - 1e-7);
      yp += y[i] * q;
      yy += y[i] * y[i];
      pp += q * q;
      bce += -(y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q));
    }
    const double expected = (1.0 - 2.0 * yp / (yy + pp)) + bce / static_cast<double>(p.numel());
    EXPECT_NEAR(dice_bce_loss(p, y).item(), expected, 1e-10);
  }
}

TEST(DiceBce, NonNegativeAndZeroOnlyWhenPerfect) {
  SplitMix64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    auto y = random_mask({1, 1, 5, 5}, rng);
    y[0] = 1.0;
    auto p = Tensor<double>::uniform(y.shape(), rng, 0.0, 1.0);
    const double loss = dice_bce_loss(p, y).item();
    EXPECT_GE(loss, 0.0);
    EXPECT_GT(loss, 1e-3);
    EXPECT_LT(dice_bce_loss(y, y).item(), 1e-5);
  }
}

TEST(DiceBce, Errors) {
  auto y = Tensor<double>::ones({1, 1, 2, 2});
  EXPECT_THROW(dice_bce_loss(Tensor<double>({1, 1, 2, 3}, 0.5), Tensor<double>::ones({1, 1, 2, 3 + 1})), Error);
  Tensor<double> soft({1, 1, 2, 2}, 0.5);
  try {
    dice_bce_loss(y, soft);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidParameter);
  }
}

TEST(Confusion, IdentityAndInversion) {
  SplitMix64 rng(3);
  auto t = random_mask({16, 16}, rng, 0.3);
  std::uint64_t k = 0;
  for (double v : t.data()) k += v == 1.0;
  EXPECT_EQ(confusion(t, t), (ConfusionCounts{k, 256 - k, 0, 0}));
  Tensor<double> inv(t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) inv[i] = 1.0 - t[i];
  const auto c = confusion(inv, t);
  EXPECT_EQ(c.tp, 0u);
  EXPECT_EQ(c.tn, 0u);
  EXPECT_EQ(c.fp, 256 - k);
  EXPECT_EQ(c.fn, k);
}

TEST(Confusion, MatchesDoubleLoop) {
  SplitMix64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_mask({16, 16}, rng), t = random_mask({16, 16}, rng);
    ConfusionCounts ref;
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 16; ++j) {
        const bool a = p.at({i, j}) == 1.0, b = t.at({i, j}) == 1.0;
        if (a && b) ++ref.tp;
        if (!a && !b) ++ref.tn;
        if (a && !b) ++ref.fp;
        if (!a && b) ++ref.fn;
      }
    const auto c = confusion(p, t);
    EXPECT_EQ(c, ref);
    EXPECT_EQ(c.total(), 256u);
  }
}

TEST(Confusion, RejectsNonBinaryAndMismatchedMasks) {
  Tensor<double> a({2, 2}, 1.0), b({2, 2}, 0.0);
  b[3] = 0.5;
  EXPECT_THROW(confusion(a, b), Error);
  EXPECT_THROW(confusion(a, Tensor<double>({2, 3}, 0.0)), Error);
}

TEST(Metrics, WorkedExample) {
  const auto m = metrics(ConfusionCounts{50, 100, 25, 25});
  EXPECT_DOUBLE_EQ(*m.miou, 0.5);
  EXPECT_DOUBLE_EQ(*m.precision, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*m.recall, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*m.f1, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*m.oa, 0.75);
  EXPECT_DOUBLE_EQ(*m.two_class_miou, (0.5 + 100.0 / 150.0) / 2.0);
}

TEST(Metrics, PerfectAndUndefined) {
  const auto perfect = metrics(ConfusionCounts{10, 5, 0, 0});
  for (const auto& v : {perfect.miou, perfect.precision, perfect.recall, perfect.f1, perfect.oa})
    EXPECT_DOUBLE_EQ(*v, 1.0);
  // No cloud anywhere and none predicted: cloud metrics are undefined, not 0.
  const auto clear = metrics(ConfusionCounts{0, 64, 0, 0});
  EXPECT_FALSE(clear.miou);
  EXPECT_FALSE(clear.precision);
  EXPECT_FALSE(clear.recall);
  EXPECT_FALSE(clear.f1);
  EXPECT_DOUBLE_EQ(*clear.oa, 1.0);
  EXPECT_EQ(format_percent(clear.miou), "NA");
  EXPECT_EQ(format_percent(clear.oa), "100.00");
  const auto empty = metrics(ConfusionCounts{});
  EXPECT_FALSE(empty.oa);
  // Nothing predicted while cloud exists: precision undefined, recall 0.
  const auto missed = metrics(ConfusionCounts{0, 10, 0, 5});
  EXPECT_FALSE(missed.precision);
  EXPECT_DOUBLE_EQ(*missed.recall, 0.0);
  EXPECT_DOUBLE_EQ(*missed.miou, 0.0);
}

TEST(Metrics, AgreeWithRecomputationFromRawMasks) {
  SplitMix64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 1 + rng.below(24), w = 1 + rng.below(24);
    auto p = random_mask({h, w}, rng, rng.uniform()), t = random_mask({h, w}, rng, rng.uniform());
    double inter = 0, uni = 0, pred_pos = 0, true_pos = 0, agree = 0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      inter += p[i] * t[i];
      uni += std::max(p[i], t[i]);
      pred_pos += p[i];
      true_pos += t[i];
      agree += p[i] == t[i];
    }
    const auto m = metrics(confusion(p, t));
    auto check = [](const std::optional<double>& got, double num, double den) {
      if (den == 0) {
        EXPECT_FALSE(got);
      } else {
        ASSERT_TRUE(got);
        EXPECT_NEAR(*got, num / den, 1e-12);
      }
    };
    check(m.miou, inter, uni);
    check(m.precision, inter, pred_pos);
    check(m.recall, inter, true_pos);
    check(m.f1, 2 * inter, pred_pos + true_pos);
    check(m.oa, agree, static_cast<double>(p.numel()));
  }
}

TEST(Metrics, F1IsHarmonicMeanAndIouIsBelowBoth) {
  SplitMix64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    ConfusionCounts c{1 + rng.below(500), rng.below(500), rng.below(500), rng.below(500)};
    const auto m = metrics(c);
    const double p = *m.precision, r = *m.recall;
    EXPECT_NEAR(*m.f1, 2 * p * r / (p + r), 1e-12);
    EXPECT_LE(*m.miou, std::min(p, r));
  }
}

TEST(ConfusionCounts, MergeIsAssociativeAndCommutative) {
  SplitMix64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto r = [&] { return ConfusionCounts{rng.below(1000), rng.below(1000), rng.below(1000), rng.below(1000)}; };
    const auto a = r(), b = r(), c = r();
    EXPECT_EQ((a + b) + c, a + (b + c));
    EXPECT_EQ(a + b, b + a);
    EXPECT_EQ(a + ConfusionCounts{}, a);
    EXPECT_EQ((a + b).total(), a.total() + b.total());
  }
}

TEST(ConfusionCounts, PatchMergeEqualsStitchedScene) {
  SynthOptions opt;
  opt.size = 80;
  const Scene truth = synth_scene(8, opt);
  opt.cloud_density = 0.4;
  const Scene guess = synth_scene(9, opt);
  const auto tp = crop(truth, 32), gp = crop(guess, 32);
  ConfusionCounts merged;
  std::vector<Tensor<float>> pieces;
  for (std::size_t i = 0; i < tp.patches.size(); ++i) {
    // Count only the unpadded part of each patch.
    const auto& t = tp.patches[i];
    const std::size_t h = std::min<std::size_t>(32, tp.height - t.row * 32);
    const std::size_t w = std::min<std::size_t>(32, tp.width - t.col * 32);
    Tensor<float> a({h, w}), b({h, w});
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        a.at({y, x}) = gp.patches[i].mask.at({y, x});
        b.at({y, x}) = t.mask.at({y, x});
      }
    merged += confusion(a, b);
    pieces.push_back(gp.patches[i].mask);
  }
  EXPECT_EQ(merged, confusion(stitch(gp, pieces), truth.mask));
  EXPECT_EQ(merged, confusion(guess.mask, truth.mask));
}

TEST(Report, CsvRowFormat) {
  EXPECT_EQ(metrics_csv_header(), "method,miou,precision,recall,f1,oa,params_m,gflops,two_class_miou\n");
  EXPECT_EQ(metrics_csv_row("CD-CTFM", ConfusionCounts{50, 100, 25, 25}, 2.4047, 0.3973),
            "CD-CTFM,50.00,66.67,66.67,66.67,75.00,2.40,0.40,58.33\n");
  EXPECT_EQ(metrics_csv_row("x", ConfusionCounts{0, 4, 0, 0}, 0, 0), "x,NA,NA,NA,NA,100.00,0.00,0.00,NA\n");
}
