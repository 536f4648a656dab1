#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "helpers.hpp"
#include "rstereo/metrics.hpp"

using namespace rstereo;
using namespace rstereo::testing;

TEST(Metrics, PerfectPredictionIsZero) {
  const auto g = Tensor::from(Shape{4}, {1.f, 2.f, 3.f, 4.f}), m = Tensor::full(Shape{4}, 1.f);
  const auto r = compute_metrics(g, g, m);
  EXPECT_EQ(r.epe, 0);
  EXPECT_EQ(r.d1, 0);
  for (double b : r.bad) EXPECT_EQ(b, 0);
  EXPECT_EQ(r.valid, 4);
}

TEST(Metrics, HandComputedErrors) {
  const auto gt = Tensor::zeros(Shape{4});
  const auto pred = Tensor::from(Shape{4}, {0.4f, -1.5f, 2.5f, 5.0f});
  const auto r = compute_metrics(pred, gt, Tensor::full(Shape{4}, 1.f));
  EXPECT_NEAR(r.epe, 2.35, 1e-6);
  EXPECT_EQ(r.bad_at(0.5), 75);
  EXPECT_EQ(r.bad_at(1), 75);
  EXPECT_EQ(r.bad_at(2), 50);
  EXPECT_EQ(r.bad_at(3), 25);
  EXPECT_EQ(r.bad_at(4), 25);
  EXPECT_EQ(r.d1, 25);
  EXPECT_THROW(r.bad_at(7), ContractError);
}

TEST(Metrics, DefaultThresholds) {
  EXPECT_EQ(kDefaultThresholds, (std::vector<double>{0.5, 1, 2, 3, 4}));
}

TEST(Metrics, MaskAndNonFiniteGroundTruthExcluded) {
  const auto gt = Tensor::from(Shape{3}, {0.f, std::nanf(""), 0.f});
  const auto pred = Tensor::from(Shape{3}, {1.f, 100.f, 50.f});
  const auto mask = Tensor::from(Shape{3}, {1.f, 1.f, 0.f});
  const auto r = compute_metrics(pred, gt, mask);
  EXPECT_EQ(r.valid, 1);
  EXPECT_EQ(r.epe, 1);
}

TEST(Metrics, Contracts) {
  EXPECT_THROW(compute_metrics(Tensor::zeros(Shape{3}), Tensor::zeros(Shape{3}), Tensor::zeros(Shape{3})),
               ContractError);
  EXPECT_THROW(compute_metrics(Tensor::zeros(Shape{3}), Tensor::zeros(Shape{4}), Tensor::zeros(Shape{3})),
               DimensionError);
}

TEST(Metrics, PropertiesOnRandomFields) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pred = random_f(Shape{1, 9, 11}, rng, 0, 8), gt = random_f(Shape{1, 9, 11}, rng, 0, 8);
    auto mask = random_f(Shape{1, 9, 11}, rng, -1, 1);
    mask.mutable_data()[0] = 1;
    const auto r = compute_metrics(pred, gt, mask);
    for (std::size_t t = 0; t < r.bad.size(); ++t) {
      EXPECT_GE(r.bad[t], 0);
      EXPECT_LE(r.bad[t], 100);
      if (t > 0) {
        EXPECT_LE(r.bad[t], r.bad[t - 1]);
      }
    }

    // Pixel order does not matter.
    std::vector<std::size_t> perm(static_cast<std::size_t>(pred.numel()));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<float> p2, g2, m2;
    for (auto i : perm) {
      p2.push_back(pred[Index(i)]);
      g2.push_back(gt[Index(i)]);
      m2.push_back(mask[Index(i)]);
    }
    const auto q = compute_metrics(p2, g2, m2);
    EXPECT_EQ(q.bad, r.bad);
    EXPECT_EQ(q.valid, r.valid);
    EXPECT_NEAR(q.epe, r.epe, 1e-12);

    // Scaling both fields by a scales errors by a, so threshold t on the
    // scaled pair selects the same pixels as t / a on the original.
    for (float a : {2.f, 0.5f, 4.f}) {
      std::vector<float> ps, gs;
      for (Index i = 0; i < pred.numel(); ++i) {
        ps.push_back(pred[i] * a);
        gs.push_back(gt[i] * a);
      }
      std::vector<double> scaled_t, plain_t;
      for (double t : kDefaultThresholds) {
        scaled_t.push_back(t);
        plain_t.push_back(t / a);
      }
      const auto s = compute_metrics(ps, gs, std::vector<float>(mask.data().begin(), mask.data().end()), scaled_t);
      const auto o = compute_metrics(pred, gt, mask, plain_t);
      EXPECT_EQ(s.bad, o.bad);
      EXPECT_EQ(s.epe, a * o.epe);
    }
  }
}

TEST(Metrics, MergePoolsByPixelCount) {
  const auto a = compute_metrics(std::vector<float>{1, 0, 0}, std::vector<float>{0, 0, 0}, std::vector<float>{1, 1, 1});
  const auto b = compute_metrics(std::vector<float>{5}, std::vector<float>{0}, std::vector<float>{1});
  const auto m = merge({a, b});
  EXPECT_EQ(m.valid, 4);
  EXPECT_NEAR(m.epe, 1.5, 1e-12);
  EXPECT_NEAR(m.bad_at(3), 25, 1e-12);
  EXPECT_NE(m.to_json().find("\"epe\""), std::string::npos);
}
