#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace ctfm;

namespace {

std::vector<Scene> synth_set(std::size_t count, std::uint64_t base, std::size_t size = 64) {
  std::vector<Scene> scenes;
  SplitMix64 rng(base);
  for (std::size_t i = 0; i < count; ++i) {
    SynthOptions opt;
    opt.size = size;
    opt.cloud_density = rng.uniform(0.3, 0.7);
    opt.texture_level = rng.uniform(0.2, 0.8);
    scenes.push_back(synth_scene(base * 1000 + i, opt));
  }
  return scenes;
}

TrainConfig short_run() {
  TrainConfig cfg = TrainConfig::desk();
  cfg.max_steps = 6;
  cfg.batch_size = 4;
  cfg.val_fraction = 0.2;
  return cfg;
}

}  // namespace

TEST(LrSchedule, EndpointsAndMidpoint) {
  const TrainConfig cfg = TrainConfig::published();
  EXPECT_EQ(lr_schedule(0, 1000, cfg), 0.001);
  EXPECT_EQ(lr_schedule(1000, 1000, cfg), 0.0);
  EXPECT_NEAR(lr_schedule(500, 1000, cfg), 0.000536, 5e-7);
  EXPECT_DOUBLE_EQ(lr_schedule(500, 1000, cfg), 0.001 * std::pow(0.5, 0.9));
  EXPECT_THROW(lr_schedule(1001, 1000, cfg), Error);
  EXPECT_THROW(lr_schedule(0, 0, cfg), Error);
}

TEST(LrSchedule, NonIncreasing) {
  for (double power : {0.5, 0.9, 1.0, 2.0}) {
    TrainConfig cfg;
    cfg.poly_power = power;
    double prev = lr_schedule(0, 137, cfg);
    for (std::size_t s = 1; s <= 137; ++s) {
      const double lr = lr_schedule(s, 137, cfg);
      EXPECT_LE(lr, prev);
      EXPECT_GE(lr, 0.0);
      prev = lr;
    }
    EXPECT_EQ(prev, 0.0);
  }
}

TEST(Presets, PublishedAndDesk) {
  const auto published = TrainConfig::published();
  EXPECT_EQ(published.lr0, 0.001);
  EXPECT_EQ(published.momentum, 0.9);
  EXPECT_EQ(published.batch_size, 32u);
  EXPECT_EQ(published.epochs, 50u);
  EXPECT_EQ(published.weight_decay, 0.0);
  const auto desk = TrainConfig::desk();
  EXPECT_EQ(desk.batch_size, 8u);
  EXPECT_LE(desk.max_steps, 500u);
  TrainConfig bad;
  bad.lr0 = 0.0;
  EXPECT_THROW(bad.validate(), Error);
  bad = TrainConfig{};
  bad.momentum = 1.0;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Sgd, ZeroGradientLeavesWeightsUnchanged) {
  Tensor<double> w({3}, {0.5, -1.0, 2.0});
  w.set_requires_grad(true);
  w.zero_grad();
  Sgd<double> opt({{"w", w}}, 0.9);
  opt.step(0.1);
  EXPECT_EQ(std::vector<double>(w.data().begin(), w.data().end()), (std::vector<double>{0.5, -1.0, 2.0}));
}

TEST(Sgd, MomentumZeroIsPlainGradientStep) {
  Tensor<double> w({3}, {0.5, -1.0, 2.0});
  w.set_requires_grad(true);
  auto g = w.ensure_grad();
  g[0] = 0.25;
  g[1] = -2.0;
  g[2] = 1e-3;
  Sgd<double> opt({{"w", w}}, 0.0);
  opt.step(0.01);
  EXPECT_EQ(w[0], 0.5 - 0.01 * 0.25);
  EXPECT_EQ(w[1], -1.0 - 0.01 * -2.0);
  EXPECT_EQ(w[2], 2.0 - 0.01 * 1e-3);
}

TEST(Sgd, HeavyBallVelocity) {
  Tensor<double> w({1}, {1.0});
  w.set_requires_grad(true);
  w.ensure_grad()[0] = 1.0;
  Sgd<double> opt({{"w", w}}, 0.9);
  opt.step(0.1);  // v = 1
  opt.step(0.1);  // v = 1.9
  EXPECT_DOUBLE_EQ(w[0], 1.0 - 0.1 * 1.0 - 0.1 * 1.9);
  opt.zero_grad();
  EXPECT_EQ(w.grad()[0], 0.0);
}

TEST(Split, DeterministicAndDisjoint) {
  const auto scenes = synth_set(20, 1, 16);
  auto [a_train, a_val] = split_scenes(scenes, 0.25, 7);
  auto [b_train, b_val] = split_scenes(scenes, 0.25, 7);
  EXPECT_EQ(a_val, b_val);
  EXPECT_EQ(a_train, b_train);
  EXPECT_EQ(a_val.size(), 5u);
  EXPECT_EQ(a_train.size() + a_val.size(), 20u);
  for (const Scene* v : a_val) EXPECT_EQ(std::count(a_train.begin(), a_train.end(), v), 0);
  auto [c_train, c_val] = split_scenes(scenes, 0.25, 8);
  EXPECT_NE(a_val, c_val);
  // A single scene always trains.
  const std::vector<Scene> one(scenes.begin(), scenes.begin() + 1);
  EXPECT_EQ(split_scenes(one, 0.5, 0).first.size(), 1u);
}

TEST(Train, LossCurveIsReproducible) {
  const auto scenes = synth_set(12, 2);
  const auto cfg = short_run();
  std::string curves[2];
  for (auto& curve : curves) {
    CdCtfm<float> model(ModelConfig::tiny());
    curve = loss_curve_csv(train(model, scenes, cfg));
  }
  EXPECT_EQ(curves[0], curves[1]);
  EXPECT_EQ(std::count(curves[0].begin(), curves[0].end(), '\n'), 7);
  EXPECT_EQ(curves[0].substr(0, curves[0].find('\n')), "step,epoch,lr,loss,dice,bce");

  auto other = cfg;
  other.seed = 1;
  CdCtfm<float> model(ModelConfig::tiny());
  EXPECT_NE(loss_curve_csv(train(model, scenes, other)), curves[0]);
}

TEST(Train, RecordsScheduleAndValidation) {
  const auto scenes = synth_set(10, 3);
  auto cfg = short_run();
  CdCtfm<float> model(ModelConfig::tiny());
  std::size_t step_calls = 0, epoch_calls = 0;
  const auto r = train(
      model, scenes, cfg, [&](const StepRecord&) { ++step_calls; }, [&](const EpochRecord&) { ++epoch_calls; });
  ASSERT_EQ(r.steps.size(), 6u);
  EXPECT_EQ(step_calls, 6u);
  EXPECT_EQ(epoch_calls, r.epochs.size());
  EXPECT_EQ(r.steps.front().lr, cfg.lr0);
  for (std::size_t i = 0; i < r.steps.size(); ++i) {
    EXPECT_EQ(r.steps[i].step, i + 1);
    EXPECT_DOUBLE_EQ(r.steps[i].lr, lr_schedule(i, 6, cfg));
    EXPECT_NEAR(r.steps[i].loss, r.steps[i].dice + r.steps[i].bce, 1e-12);
  }
  EXPECT_EQ(r.val_scene_ids.size(), 2u);
  EXPECT_EQ(r.val_patches, 2u);
  EXPECT_EQ(r.train_patches, 8u);
  EXPECT_EQ(r.epochs.back().val.total(), 2u * 64 * 64);
  EXPECT_FALSE(model.training());
  EXPECT_NE(epoch_csv(r).find("epoch,train_loss,val_miou"), std::string::npos);
}

TEST(Train, NonFiniteLossNamesTheStep) {
  const auto scenes = synth_set(4, 4);
  CdCtfm<float> model(ModelConfig::tiny());
  (*model.head().bias())[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train(model, scenes, short_run());
    FAIL() << "expected a non-finite error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonFinite);
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}

TEST(Train, RejectsBandMismatch) {
  SynthOptions opt;
  opt.bands = 3;
  const std::vector<Scene> scenes{synth_scene(1, opt)};
  CdCtfm<float> model(ModelConfig::tiny());
  try {
    train(model, scenes, short_run());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Incompatible);
  }
}

TEST(Evaluate, PerfectPredictionsScoreOne) {
  // Patch-wise counting of truth against itself, merged.
  const auto scenes = synth_set(3, 5, 80);
  ConfusionCounts merged, stitched;
  for (const auto& s : scenes) {
    const auto set = crop(s, 32);
    std::vector<Tensor<float>> preds;
    for (const auto& p : set.patches) preds.push_back(p.mask);
    const auto full = stitch(set, preds);
    stitched += confusion(full, s.mask);
    for (std::size_t i = 0; i < set.patches.size(); ++i) merged += confusion(preds[i], set.patches[i].mask);
  }
  EXPECT_EQ(stitched.fp + stitched.fn, 0u);
  for (const auto& v : {metrics(merged).miou, metrics(merged).precision, metrics(merged).recall,
                        metrics(merged).f1, metrics(merged).oa})
    EXPECT_DOUBLE_EQ(*v, 1.0);
}

TEST(Evaluate, CountsEveryValidationPixel) {
  const auto scenes = synth_set(3, 6);
  CdCtfm<float> model(ModelConfig::tiny());
  std::vector<const Scene*> ptrs;
  for (const auto& s : scenes) ptrs.push_back(&s);
  const auto patches = crop_all(ptrs, 32, 16);
  const auto c = evaluate_patches(model, patches, 5, 0.5);
  EXPECT_EQ(c.total(), 3u * 64 * 64);
}

TEST(GradCheckReport, CoversEveryCompositeBlock) {
  GradCheckOptions opt;
  opt.max_probes = 4;
  const auto reports = gradcheck_blocks(ModelConfig::gradcheck(), opt);
  std::vector<std::string> names;
  for (const auto& r : reports) {
    names.push_back(r.block);
    EXPECT_TRUE(r.passed()) << r.block << " " << r.result.max_rel_error << " at " << r.result.worst;
    EXPECT_GT(r.result.probes, 0u);
  }
  EXPECT_EQ(names, (std::vector<std::string>{"mobile_former_block", "sd_block", "lwfpm", "lwam", "cd_ctfm"}));
}

TEST(PredictScene, StitchesToTheSceneExtent) {
  const auto scenes = synth_set(2, 7, 80);
  CdCtfm<float> model(ModelConfig::tiny());
  const auto mask = predict_scene(model, scenes[0], 32, 0.5, 3);
  ASSERT_EQ(mask.shape(), (Shape{80, 80}));
  for (float v : mask.data()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
  const auto c = evaluate_scenes(model, scenes, 32, 0.5);
  EXPECT_EQ(c.total(), 2u * 80 * 80);
  EXPECT_EQ(confusion(mask, scenes[0].mask) + confusion(predict_scene(model, scenes[1], 32, 0.5), scenes[1].mask), c);
}

TEST(PredictScene, SinglePatchMatchesDirectPrediction) {
  const auto scenes = synth_set(1, 8, 64);
  CdCtfm<float> model(ModelConfig::tiny());
  Tensor<float> x({1, 4, 64, 64}, std::vector<float>(scenes[0].bands.data().begin(), scenes[0].bands.data().end()));
  const auto direct = model.predict_mask(x, 0.5);
  const auto mask = predict_scene(model, scenes[0], 64, 0.5);
  for (std::size_t i = 0; i < mask.numel(); ++i) EXPECT_EQ(mask[i], direct[i]);
  // Batch size does not change the answer.
  EXPECT_TRUE(testing_util::bit_equal(predict_scene(model, scenes[0], 32, 0.5, 1),
                                      predict_scene(model, scenes[0], 32, 0.5, 4)));
}

TEST(PredictScene, RejectsBandMismatch) {
  SynthOptions opt;
  opt.bands = 2;
  CdCtfm<float> model(ModelConfig::tiny());
  try {
    predict_scene(model, synth_scene(1, opt), 64, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Incompatible);
  }
}
