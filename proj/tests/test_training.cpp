#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "helpers.hpp"
#include "rstereo/check.hpp"
#include "rstereo/training.hpp"

using namespace rstereo;
using namespace rstereo::testing;

namespace {

float at(const Tensor& t, Index c, Index y, Index x) { return t[(c * t.dim(1) + y) * t.dim(2) + x]; }

// Linear sample of row y of channel c at real column x (edge clamped).
float sample_row(const Tensor& t, Index c, Index y, double x) {
  const Index w = t.dim(2);
  x = std::clamp(x, 0.0, double(w - 1));
  const auto x0 = static_cast<Index>(std::floor(x));
  const Index x1 = std::min(x0 + 1, w - 1);
  const double f = x - double(x0);
  return static_cast<float>((1 - f) * at(t, c, y, x0) + f * at(t, c, y, x1));
}

StereoSample constant_scene(double d, std::uint64_t seed, Index h = 32, Index w = 64) {
  SyntheticConfig cfg;
  cfg.height = h;
  cfg.width = w;
  cfg.max_disp = 16;
  cfg.kinds = {SceneKind::kConstant};
  cfg.fixed_disparity = d;
  std::mt19937_64 rng(seed);
  return generate_synthetic(rng, cfg);
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.steps = 2;
  c.batch = 1;
  c.iterations = 2;
  c.data.height = 32;
  c.data.width = 64;
  c.data.max_disp = 8;
  c.use_augment = false;
  c.lr.peak = 1e-4;
  c.lr.floor = 1e-4;
  c.lr.div_factor = 1;
  c.validation_samples = 1;
  c.validation_iterations = 2;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(SequenceLoss, ThreeUnitErrorsGiveWeightedSum) {
  const auto gt = Tensor::zeros(Shape{1, 1, 2, 3}), mask = Tensor::full(Shape{1, 1, 2, 3}, 1.f);
  std::vector<Tensor> preds(3, Tensor::full(Shape{1, 1, 2, 3}, 1.f));
  EXPECT_NEAR(sequence_loss(preds, gt, mask, 0.9f).item(), 2.71, 1e-6);
}

TEST(SequenceLoss, SinglePredictionIsMaskedMean) {
  const auto gt = Tensor::from(Shape{1, 4}, {0.f, 0.f, 0.f, 0.f});
  const auto pred = Tensor::from(Shape{1, 4}, {1.f, -3.f, 10.f, 2.f});
  const auto mask = Tensor::from(Shape{1, 4}, {1.f, 1.f, 0.f, 1.f});
  EXPECT_NEAR(sequence_loss<float>({pred}, gt, mask).item(), 2.0, 1e-6);
}

TEST(SequenceLoss, WeightsGrowByInverseGamma) {
  for (double gamma : {0.9, 0.8, 0.5, 1.0}) {
    const auto w = sequence_weights(12, gamma);
    EXPECT_EQ(w.back(), 1.0);
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      EXPECT_GT(w[i], 0);
      EXPECT_LE(w[i], w[i + 1]);
      EXPECT_EQ(w[i], w[i + 1] * gamma);
      EXPECT_NEAR(w[i + 1] / w[i], 1.0 / gamma, 1e-15 / gamma);
    }
  }
}

TEST(SequenceLoss, Contracts) {
  const auto gt = Tensor::zeros(Shape{1, 3}), empty = Tensor::zeros(Shape{1, 3});
  EXPECT_THROW(sequence_loss<float>({Tensor::zeros(Shape{1, 3})}, gt, empty), ContractError);
  EXPECT_THROW(sequence_loss<float>({}, gt, Tensor::full(Shape{1, 3}, 1.f)), ContractError);
  EXPECT_THROW(sequence_loss<float>({Tensor::zeros(Shape{1, 4})}, gt, Tensor::full(Shape{1, 3}, 1.f)),
               DimensionError);
  EXPECT_THROW(sequence_weights(3, 0.0), ContractError);
  EXPECT_THROW(sequence_weights(3, 1.5), ContractError);
}

TEST(SequenceLoss, EndToEndGradientOnToyModel) {
  auto cfg = tiny_config(1, 8);
  StereoModel<double> model(cfg, 11);
  model.set_training(false);
  std::mt19937_64 rng(12);
  const auto left = random_d(Shape{1, 3, 64, 64}, rng, 0, 1), right = random_d(Shape{1, 3, 64, 64}, rng, 0, 1);
  const auto gt = random_d(Shape{1, 1, 64, 64}, rng, 0, 6);
  const auto mask = TensorD::full(Shape{1, 1, 64, 64}, 1.0);
  auto rollout = [&](const TensorD& initial) {
    RolloutOptions<double> opts;
    opts.iterations = 2;
    opts.keep_sequence = true;
    opts.initial = initial;
    return sequence_loss(model.forward(left, right, opts).sequence, gt, mask, 0.9);
  };

  auto r = check::gradcheck([&](const std::vector<TensorD>& in) { return rollout(in[0]); },
                            {random_d(Shape{1, 1, 8, 8}, rng, 0.5, 3)});
  EXPECT_LT(r.rel_error, 1e-3) << "initial disparity";
  EXPECT_GT(r.analytic_norm, 0);

  const auto d0 = random_d(Shape{1, 1, 8, 8}, rng, 0.5, 3);
  auto p = check::gradcheck_sampled([&] { return rollout(d0); }, model.parameters(), 2, rng);
  EXPECT_LT(p.rel_error, 1e-3) << "parameters";
}

// ---------------------------------------------------------------------------

TEST(OptimizerState, FirstStepMatchesClosedForm) {
  auto w = Tensor::from(Shape{3}, {0.5f, -1.f, 2.f}).set_requires_grad();
  AdamWConfig cfg;
  cfg.weight_decay = 0.1f;
  AdamW opt({w}, cfg);
  sum(mul(w, Tensor::from(Shape{3}, {3.f, -2.f, 0.5f}))).backward();
  opt.step(0.01f);
  // After one step the bias-corrected moments are g and g^2.
  const double g[3] = {3, -2, 0.5}, w0[3] = {0.5, -1, 2};
  for (int i = 0; i < 3; ++i) {
    const double expect = w0[i] - 0.01 * (g[i] / (std::abs(g[i]) + 1e-8) + 0.1 * w0[i]);
    EXPECT_NEAR(w[i], expect, 1e-6);
  }
  EXPECT_EQ(opt.steps(), 1);
}

TEST(OptimizerState, MomentsMatchParameterShapes) {
  std::mt19937_64 rng(1);
  StereoModel<float> model(tiny_config(), 1);
  auto params = model.parameters();
  AdamW opt(params);
  std::vector<Shape> shapes;
  opt.visit([&](const std::string& name, Tensor& t, bool) {
    if (name != "optimizer.steps") shapes.push_back(t.shape());
  });
  ASSERT_EQ(shapes.size(), 2 * params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_EQ(shapes[2 * i], params[i].shape());
    EXPECT_EQ(shapes[2 * i + 1], params[i].shape());
  }
}

TEST(ClipGradNorm, RescalesToMaximum) {
  auto a = Tensor::from(Shape{2}, {1.f, 1.f}).set_requires_grad();
  auto b = Tensor::from(Shape{1}, {1.f}).set_requires_grad();
  add(sum(scale(a, 3.f)), sum(scale(b, 4.f))).backward();  // grads (3,3) and (4)
  const double norm = clip_grad_norm({a, b}, 1.0);
  EXPECT_NEAR(norm, std::sqrt(34.0), 1e-6);
  double sq = 0;
  for (float g : a.grad()) sq += g * g;
  for (float g : b.grad()) sq += g * g;
  EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-5);
  EXPECT_NEAR(a.grad()[0] / b.grad()[0], 0.75, 1e-6);
  EXPECT_NEAR(clip_grad_norm({a, b}, 10.0), 1.0, 1e-5);
}

// ---------------------------------------------------------------------------

TEST(OneCycle, StartsAtPeakOverDivisor) {
  OneCycleConfig c;
  EXPECT_DOUBLE_EQ(one_cycle_lr(0, 1000, c), c.peak / c.div_factor);
}

TEST(OneCycle, ReachesPeakAtApexAndFloorAtEnd) {
  OneCycleConfig c;
  const std::int64_t total = 1000;
  double best = 0;
  std::int64_t apex = -1;
  for (std::int64_t s = 0; s < total; ++s) {
    const double lr = one_cycle_lr(s, total, c);
    if (lr > best) {
      best = lr;
      apex = s;
    }
  }
  EXPECT_DOUBLE_EQ(best, c.peak);
  EXPECT_EQ(apex, 50);
  EXPECT_NEAR(one_cycle_lr(total - 1, total, c), c.floor, 1e-18);
}

TEST(OneCycle, NeverBelowFloor) {
  for (std::int64_t total : {1, 2, 3, 10, 137, 5000}) {
    OneCycleConfig c;
    c.floor = 1e-4;
    c.div_factor = 25;  // warmup starts below the floor
    for (std::int64_t s = 0; s < total; ++s) {
      if (s >= std::max<std::int64_t>(1, std::llround(c.warmup_fraction * total))) {
        EXPECT_GE(one_cycle_lr(s, total, c), c.floor) << total << " " << s;
      }
    }
    OneCycleConfig d;  // defaults start at the floor
    for (std::int64_t s = 0; s < total; ++s) EXPECT_GE(one_cycle_lr(s, total, d), 1e-4) << total << " " << s;
  }
}

TEST(OneCycle, Contracts) {
  OneCycleConfig c;
  EXPECT_THROW(one_cycle_lr(-1, 10, c), ContractError);
  EXPECT_THROW(one_cycle_lr(10, 10, c), ContractError);
  c.floor = 1;
  EXPECT_THROW(one_cycle_lr(0, 10, c), ContractError);
}

// ---------------------------------------------------------------------------

TEST(Synthetic, ConstantSceneWarpsExactly) {
  const auto s = constant_scene(5, 3);
  const Index h = s.left.dim(1), w = s.left.dim(2);
  double worst = 0;
  for (Index c = 0; c < 3; ++c) {
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x + 5 < w; ++x) worst = std::max(worst, double(std::abs(at(s.right, c, y, x) - at(s.left, c, y, x + 5))));
    }
  }
  EXPECT_LT(worst, 1e-3);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      EXPECT_EQ(s.mask[y * w + x], x >= 5 ? 1.f : 0.f);
      EXPECT_EQ(s.disparity[y * w + x], 5.f);
    }
  }
}

TEST(Synthetic, ZeroDisparityGivesIdenticalViews) {
  const auto s = constant_scene(0, 4);
  EXPECT_EQ(values(s.left), values(s.right));
  for (float m : s.mask.data()) EXPECT_EQ(m, 1.f);
}

TEST(Synthetic, MaskedPixelsMatchAcrossViews) {
  for (auto kind : {SceneKind::kLayers, SceneKind::kSlanted}) {
    SyntheticConfig cfg;
    cfg.kinds = {kind};
    std::mt19937_64 rng(5);
    for (int n = 0; n < 5; ++n) {
      const auto s = generate_synthetic(rng, cfg);
      const Index h = s.left.dim(1), w = s.left.dim(2);
      double err = 0;
      Index valid = 0;
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          const float d = s.disparity[y * w + x];
          EXPECT_GE(d, 0.f);
          EXPECT_LE(d, cfg.max_disp + 1e-4);
          if (s.mask[y * w + x] == 0) continue;
          EXPECT_GE(double(x) - d, 0.0);
          ++valid;
          for (Index c = 0; c < 3; ++c) err += std::abs(sample_row(s.right, c, y, double(x) - d) - at(s.left, c, y, x));
        }
      }
      ASSERT_GT(valid, h * w / 4);
      // Residual is the linear interpolation error of a smooth texture.
      EXPECT_LT(err / double(3 * valid), 0.03);
    }
  }
}

TEST(Synthetic, LayersOccludeBackground) {
  SyntheticConfig cfg;
  cfg.kinds = {SceneKind::kLayers};
  std::mt19937_64 rng(6);
  Index occluded = 0;
  for (int n = 0; n < 10; ++n) {
    const auto s = generate_synthetic(rng, cfg);
    const Index w = s.left.dim(2);
    for (Index i = 0; i < s.mask.numel(); ++i) {
      if (s.mask[i] == 0 && double(i % w) - s.disparity[i] >= 0) ++occluded;
    }
  }
  EXPECT_GT(occluded, 0);
}

TEST(Synthetic, Contracts) {
  SyntheticConfig cfg;
  cfg.max_disp = 64;
  std::mt19937_64 rng(1);
  EXPECT_THROW(generate_synthetic(rng, cfg), ContractError);
  cfg.max_disp = 8;
  cfg.kinds.clear();
  EXPECT_THROW(generate_synthetic(rng, cfg), ContractError);
  EXPECT_THROW(parse_scene("sphere"), ContractError);
}

// ---------------------------------------------------------------------------

TEST(Augment, ZeroSaturationIsGreyscale) {
  const auto s = constant_scene(3, 7);
  AugmentConfig cfg;
  cfg.saturation_min = cfg.saturation_max = 0;
  std::mt19937_64 rng(1);
  const auto a = augment(s, cfg, rng);
  for (const auto* img : {&a.left, &a.right}) {
    const Index plane = img->dim(1) * img->dim(2);
    for (Index i = 0; i < plane; ++i) {
      EXPECT_EQ((*img)[i], (*img)[plane + i]);
      EXPECT_EQ((*img)[i], (*img)[2 * plane + i]);
    }
  }
}

TEST(Augment, StretchScalesDisparityExactly) {
  const auto s = constant_scene(4, 8);
  AugmentConfig cfg;
  cfg.saturation_min = cfg.saturation_max = 1;
  cfg.stretch_min = cfg.stretch_max = 1.25f;
  cfg.vertical_shift = 0;
  std::mt19937_64 rng(2);
  const auto a = augment(s, cfg, rng);
  EXPECT_EQ(a.left.dim(2), 80);
  for (float d : a.disparity.data()) EXPECT_EQ(d, 5.f);

  AugmentConfig any;
  for (int n = 0; n < 20; ++n) {
    const auto b = augment(s, any, rng);
    const float ratio = b.disparity[0] / 4.f;
    EXPECT_GE(ratio, any.stretch_min * (1 - 1e-6f));
    EXPECT_LE(ratio, any.stretch_max * (1 + 1e-6f));
    for (float d : b.disparity.data()) EXPECT_EQ(d, b.disparity[0]);
  }
}

TEST(Augment, StretchedPairStaysConsistent) {
  const auto s = constant_scene(4, 9);
  AugmentConfig cfg;
  cfg.saturation_min = cfg.saturation_max = 1;
  cfg.vertical_shift = 0;
  std::mt19937_64 rng(3);
  for (int n = 0; n < 5; ++n) {
    const auto a = augment(s, cfg, rng);
    const Index h = a.left.dim(1), w = a.left.dim(2);
    double err = 0;
    Index valid = 0;
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        const float d = a.disparity[y * w + x];
        if (a.mask[y * w + x] == 0 || double(x) - d < 0) continue;
        ++valid;
        for (Index c = 0; c < 3; ++c) err += std::abs(sample_row(a.right, c, y, double(x) - d) - at(a.left, c, y, x));
      }
    }
    ASSERT_GT(valid, 0);
    EXPECT_LT(err / double(3 * valid), 0.04);
  }
}

TEST(Augment, IdentitySettingsPreserveSample) {
  const auto s = constant_scene(6, 10);
  AugmentConfig cfg;
  cfg.saturation_min = cfg.saturation_max = 1;
  cfg.stretch_min = cfg.stretch_max = 1;
  cfg.vertical_shift = 0;
  std::mt19937_64 rng(4);
  const auto a = augment(s, cfg, rng);
  EXPECT_EQ(values(a.left), values(s.left));
  EXPECT_EQ(values(a.right), values(s.right));
  EXPECT_EQ(values(a.disparity), values(s.disparity));
  EXPECT_EQ(values(a.mask), values(s.mask));
}

TEST(Augment, VerticalShiftTouchesRightImageOnly) {
  const auto s = constant_scene(6, 11);
  AugmentConfig cfg;
  cfg.saturation_min = cfg.saturation_max = 1;
  cfg.stretch_min = cfg.stretch_max = 1;
  cfg.vertical_shift = 0.5f;
  std::mt19937_64 rng(5);
  const auto a = augment(s, cfg, rng);
  EXPECT_EQ(values(a.left), values(s.left));
  EXPECT_NE(values(a.right), values(s.right));
  EXPECT_LT(max_abs_diff(values(a.right), values(s.right)), 0.5);
}

TEST(Augment, SeedDeterminesOutputBitwise) {
  const auto s = constant_scene(6, 12, 32, 96);
  AugmentConfig cfg;
  cfg.crop_height = 24;
  cfg.crop_width = 64;
  std::mt19937_64 r1(42), r2(42);
  const auto a = augment(s, cfg, r1), b = augment(s, cfg, r2);
  EXPECT_EQ(a.left.shape(), (Shape{3, 24, 64}));
  EXPECT_EQ(values(a.left), values(b.left));
  EXPECT_EQ(values(a.right), values(b.right));
  EXPECT_EQ(values(a.disparity), values(b.disparity));
  EXPECT_EQ(values(a.mask), values(b.mask));
}

TEST(Augment, CropLargerThanImageRejected) {
  const auto s = constant_scene(2, 13);
  AugmentConfig cfg;
  cfg.crop_height = 33;
  std::mt19937_64 rng(1);
  EXPECT_THROW(augment(s, cfg, rng), ContractError);
}

// ---------------------------------------------------------------------------

TEST(TrainConfig, ParsesAndRejects) {
  const auto c = TrainConfig::from_json(
      R"({"steps": 10, "batch": 3, "lr": {"peak": 0.001}, "data": {"kinds": ["slanted"], "max_disp": 4}})");
  EXPECT_EQ(c.steps, 10);
  EXPECT_EQ(c.batch, 3);
  EXPECT_DOUBLE_EQ(c.lr.peak, 0.001);
  EXPECT_EQ(c.data.kinds, std::vector<SceneKind>{SceneKind::kSlanted});
  EXPECT_THROW(TrainConfig::from_json(R"({"stpes": 10})"), ContractError);
  EXPECT_THROW(TrainConfig::from_json(R"({"steps": 0})"), ContractError);
  try {
    TrainConfig::from_json(R"({"steps": 1,,})");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 12u);
  }
}

TEST(Train, OneStepDescendsOnFixedBatch) {
  StereoModel<float> model(tiny_config(1), 3);
  auto cfg = tiny_train();
  std::mt19937_64 data_rng(9);
  const std::vector<StereoSample> fixed{generate_synthetic(data_rng, cfg.data)};
  const auto summary = train(model, cfg, [&](std::int64_t, std::mt19937_64&) { return fixed; }, {});
  ASSERT_EQ(summary.log.size(), 2u);
  EXPECT_LT(summary.log[1].loss, summary.log[0].loss);
}

TEST(Train, FixedSeedReproducesLossCurve) {
  auto cfg = tiny_train();
  cfg.steps = 3;
  cfg.use_augment = true;
  cfg.augment.crop_height = 32;
  cfg.augment.crop_width = 32;
  const auto val = validation_set(cfg.data, 1, 5);
  StereoModel<float> a(tiny_config(1), 3), b(tiny_config(1), 3);
  const auto la = train(a, cfg, synthetic_source(cfg), val), lb = train(b, cfg, synthetic_source(cfg), val);
  ASSERT_EQ(la.log.size(), lb.log.size());
  for (std::size_t i = 0; i < la.log.size(); ++i) {
    EXPECT_EQ(la.log[i].loss, lb.log[i].loss);
    EXPECT_EQ(la.log[i].lr, lb.log[i].lr);
  }
  EXPECT_TRUE(std::isfinite(la.final_val_epe));
  EXPECT_EQ(la.final_val_epe, lb.final_val_epe);
}

TEST(Train, WritesLogAndCheckpoint) {
  auto cfg = tiny_train();
  cfg.steps = 3;
  cfg.validate_every = 2;
  cfg.log_path = ::testing::TempDir() + "rstereo_train.jsonl";
  cfg.checkpoint_path = ::testing::TempDir() + "rstereo_train.ckpt";
  cfg.checkpoint_every = 2;
  StereoModel<float> model(tiny_config(1), 3);
  const auto summary = train(model, cfg, synthetic_source(cfg), validation_set(cfg.data, 1, 1));
  std::ifstream log(cfg.log_path);
  std::string line;
  int lines = 0, validated = 0;
  while (std::getline(log, line)) {
    ++lines;
    EXPECT_NE(line.find("\"loss\""), std::string::npos);
    if (line.find("\"val_epe\":null") == std::string::npos) ++validated;
  }
  EXPECT_EQ(lines, 3);
  EXPECT_EQ(validated, 2);  // step 2 and the final step
  EXPECT_TRUE(std::isnan(summary.log[0].val_epe));
  std::ifstream ckpt(cfg.checkpoint_path, std::ios::binary);
  EXPECT_TRUE(ckpt.good());
  std::remove(cfg.log_path.c_str());
  std::remove(cfg.checkpoint_path.c_str());
}

TEST(Train, NonFiniteLossAborts) {
  auto cfg = tiny_train();
  StereoModel<float> model(tiny_config(1), 3);
  std::mt19937_64 data_rng(9);
  auto bad = generate_synthetic(data_rng, cfg.data);
  bad.disparity.mutable_data()[100] = std::nanf("");
  bad.mask.mutable_data()[100] = 1;
  const std::vector<StereoSample> batch{bad};
  EXPECT_THROW(train(model, cfg, [&](std::int64_t, std::mt19937_64&) { return batch; }, {}), NumericError);
}
