#include <gtest/gtest.h>

#include "helpers.hpp"
#include "rstereo/check.hpp"
#include "rstereo/kernels.hpp"
#include "rstereo/ops.hpp"

using namespace rstereo;
using namespace rstereo::testing;

namespace {

constexpr double kTol = 1e-3;

// Fixed random projection per check.
struct Projection {
  TensorD weights;
  TensorD operator()(const TensorD& y) {
    if (!weights.defined() || weights.shape() != y.shape()) {
      std::mt19937_64 rng(77);
      weights = random_d(y.shape(), rng);
    }
    return sum(mul(y, weights));
  }
};

}  // namespace

TEST(Tensor, ShapeAndFactories) {
  auto t = Tensor::full(Shape{2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t.shape().str(), "[2, 3]");
  EXPECT_THROW(Shape({2, 0}), DimensionError);
  EXPECT_THROW(Tensor::from(Shape{2, 2}, {1.f, 2.f, 3.f}), DimensionError);
  EXPECT_EQ(Tensor::scalar(2.f).rank(), 0u);
}

TEST(Tensor, BackwardRequiresScalar) {
  auto x = Tensor::full(Shape{3}, 1.f).set_requires_grad();
  EXPECT_THROW(mul(x, x).backward(), ContractError);
}

TEST(Tensor, SumGradientIsOnes) {
  auto x = Tensor::full(Shape{2, 3, 4}, 0.3f).set_requires_grad();
  sum(x).backward();
  for (float g : x.grad()) EXPECT_EQ(g, 1.f);
}

TEST(Tensor, SquareGradient) {
  auto x = TensorD::from(Shape{3}, {1, 2, 3}).set_requires_grad();
  sum(mul(x, x)).backward();
  EXPECT_EQ(values(x), std::vector<double>({1, 2, 3}));
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 2);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4);
  EXPECT_DOUBLE_EQ(x.grad()[2], 6);
}

TEST(Tensor, RepeatedBackwardIsReproducible) {
  std::mt19937_64 rng(3);
  auto a = random_f(Shape{4, 5}, rng).set_requires_grad();
  auto b = random_f(Shape{5, 3}, rng).set_requires_grad();
  const auto loss = sum(tanh(matmul(a, b)));
  loss.backward();
  const std::vector<float> first(a.grad().begin(), a.grad().end());
  a.zero_grad();
  b.zero_grad();
  loss.backward();
  EXPECT_EQ(first, std::vector<float>(a.grad().begin(), a.grad().end()));
}

TEST(Tensor, NoGradGuardSkipsRecording) {
  auto x = Tensor::full(Shape{2}, 1.f).set_requires_grad();
  NoGradGuard guard;
  auto y = mul(x, x);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, MemoryStatsTrackAllocations) {
  const auto before = MemoryStats::current_bytes();
  {
    auto t = Tensor::zeros(Shape{1024});
    EXPECT_GE(MemoryStats::current_bytes(), before + 4096);
  }
  EXPECT_EQ(MemoryStats::current_bytes(), before);
}

TEST(Matmul, IdentityAndHandExample) {
  auto a = Tensor::from(Shape{2, 2}, {1, 2, 3, 4});
  auto id = Tensor::from(Shape{2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(values(matmul(id, a)), values(a));
  auto c = matmul(a, Tensor::from(Shape{2, 1}, {1, 1}));
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(values(c), std::vector<double>({3, 7}));
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(Tensor::zeros(Shape{2, 3}), Tensor::zeros(Shape{4, 2}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4, 2]"), std::string::npos);
  }
}

TEST(Matmul, MatchesTripleLoopOracle) {
  std::mt19937_64 rng(11);
  for (Index m : {1, 7, 32})
    for (Index k : {1, 5, 32})
      for (Index n : {1, 9, 32}) {
        auto a = random_f(Shape{m, k}, rng), b = random_f(Shape{k, n}, rng);
        const auto ref = check::oracle::matmul(values(a), values(b), m, k, n);
        EXPECT_LT(max_abs_diff(values(matmul(a, b)), ref), 1e-5) << m << "x" << k << "x" << n;
      }
}

TEST(Matmul, BroadcastsBatchDims) {
  std::mt19937_64 rng(12);
  auto a = random_f(Shape{3, 4, 5}, rng), b = random_f(Shape{5, 2}, rng);
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 4, 2}));
  const auto av = values(a), cv = values(c);
  for (Index i = 0; i < 3; ++i) {
    std::vector<double> ai(av.begin() + i * 20, av.begin() + (i + 1) * 20);
    const auto ref = check::oracle::matmul(ai, values(b), 4, 5, 2);
    std::vector<double> ci(cv.begin() + i * 8, cv.begin() + (i + 1) * 8);
    EXPECT_LT(max_abs_diff(ci, ref), 1e-5);
  }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTranspose) {
  std::mt19937_64 rng(13);
  auto a = random_d(Shape{3, 4}, rng).set_requires_grad();
  auto b = random_d(Shape{4, 2}, rng);
  sum(matmul(a, b)).backward();
  const auto expect = check::oracle::matmul(std::vector<double>(6, 1.0), [&] {
    std::vector<double> bt(8);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 2; ++j) bt[j * 4 + i] = b[i * 2 + j];
    return bt;
  }(), 3, 2, 4);
  EXPECT_LT(max_abs_diff(std::vector<double>(a.grad().begin(), a.grad().end()), expect), 1e-12);
  auto r = check::gradcheck([](const std::vector<TensorD>& in) { return sum(matmul(in[0], in[1])); },
                            {random_d(Shape{3, 4}, rng), random_d(Shape{4, 2}, rng)});
  EXPECT_LT(r.rel_error, kTol);
}

TEST(Conv2d, PointwiseIdentity) {
  std::mt19937_64 rng(5);
  auto x = random_f(Shape{1, 5, 6}, rng);
  auto y = conv2d(x, Tensor::full(Shape{1, 1, 1, 1}, 1.f), std::nullopt, 1, 0);
  EXPECT_EQ(values(y), values(x));
}

TEST(Conv2d, OnesKernelOnConstant) {
  auto x = Tensor::full(Shape{1, 6, 7}, 2.5f);
  auto y = conv2d(x, Tensor::full(Shape{1, 1, 3, 3}, 1.f), std::nullopt, 1, 1);
  for (Index i = 1; i < 5; ++i)
    for (Index j = 1; j < 6; ++j) EXPECT_FLOAT_EQ(y[i * 7 + j], 9 * 2.5f);
  EXPECT_FLOAT_EQ(y[0], 4 * 2.5f);
}

TEST(Conv2d, StrideTwoHalvesExtents) {
  auto y = conv2d(Tensor::zeros(Shape{2, 8, 12}), Tensor::zeros(Shape{3, 2, 3, 3}), std::nullopt, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{3, 4, 6}));
}

TEST(Conv2d, Errors) {
  EXPECT_THROW(conv2d(Tensor::zeros(Shape{1, 2, 2}), Tensor::zeros(Shape{1, 1, 5, 5}), std::nullopt, 1, 0),
               DimensionError);
  EXPECT_THROW(conv2d(Tensor::zeros(Shape{1, 4, 4}), Tensor::zeros(Shape{1, 1, 2, 2}), std::nullopt, 1, 0),
               DimensionError);
  EXPECT_THROW(conv2d(Tensor::zeros(Shape{2, 4, 4}), Tensor::zeros(Shape{1, 1, 3, 3}), std::nullopt, 1, 1),
               DimensionError);
}

TEST(Conv2d, MatchesDirectSummation) {
  std::mt19937_64 rng(6);
  for (Index stride : {1, 2})
    for (Index k : {1, 3, 7}) {
      auto x = random_f(Shape{3, 9, 10}, rng), w = random_f(Shape{4, 3, k, k}, rng);
      const auto ref = check::oracle::conv2d(values(x), 3, 9, 10, values(w), 4, k, k, stride, k / 2);
      EXPECT_LT(max_abs_diff(values(conv2d(x, w, std::nullopt, stride, k / 2)), ref), 1e-5);
    }
}

TEST(Conv2d, BatchedEqualsPerImage) {
  std::mt19937_64 rng(7);
  auto x = random_f(Shape{2, 3, 6, 6}, rng), w = random_f(Shape{5, 3, 3, 3}, rng);
  auto bias = std::optional<Tensor>(random_f(Shape{5}, rng));
  const auto y = values(conv2d(x, w, bias, 1, 1));
  for (Index b = 0; b < 2; ++b) {
    auto yb = conv2d(reshape(narrow(x, 0, b, 1), Shape{3, 6, 6}), w, bias, 1, 1);
    std::vector<double> part(y.begin() + b * 180, y.begin() + (b + 1) * 180);
    EXPECT_LT(max_abs_diff(part, values(yb)), 1e-6);
  }
}

TEST(Pooling, PairwiseMeans) {
  EXPECT_EQ(values(avgpool_lastdim(Tensor::from(Shape{4}, {1, 3, 5, 7}))), std::vector<double>({2, 6}));
  EXPECT_EQ(values(avgpool_lastdim(Tensor::from(Shape{3}, {1, 3, 5}))), std::vector<double>({2, 5}));
  auto c = avgpool_lastdim(Tensor::full(Shape{2, 8}, 3.f));
  EXPECT_EQ(c.shape(), (Shape{2, 4}));
  for (float v : c.data()) EXPECT_EQ(v, 3.f);
}

TEST(Interpolate, DownsampleMeanAndConstants) {
  auto d = interpolate2d(Tensor::from(Shape{1, 2, 2}, {1, 3, 5, 7}), 1, 2);
  EXPECT_EQ(values(d), std::vector<double>({4}));
  auto up = interpolate2d(Tensor::full(Shape{2, 3, 4}, 1.25f), 2, 1);
  EXPECT_EQ(up.shape(), (Shape{2, 6, 8}));
  for (float v : up.data()) EXPECT_FLOAT_EQ(v, 1.25f);
  auto round = interpolate2d(up, 1, 2);
  for (float v : round.data()) EXPECT_FLOAT_EQ(v, 1.25f);
  EXPECT_THROW(interpolate2d(Tensor::zeros(Shape{1, 3, 4}), 1, 2), DimensionError);
  EXPECT_THROW(interpolate2d(Tensor::zeros(Shape{1, 4, 4}), 3, 1), ContractError);
}

TEST(Softmax, NonnegativeAndNormalised) {
  std::mt19937_64 rng(8);
  auto x = random_f(Shape{3, 9, 4}, rng, -20, 20);
  auto y = softmax(x, 1);
  for (Index a = 0; a < 3; ++a)
    for (Index c = 0; c < 4; ++c) {
      double s = 0;
      for (Index k = 0; k < 9; ++k) {
        EXPECT_GE(y[(a * 9 + k) * 4 + c], 0.f);
        s += y[(a * 9 + k) * 4 + c];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(InstanceNorm, ZeroMeanUnitVariance) {
  std::mt19937_64 rng(9);
  auto x = random_f(Shape{2, 3, 8, 8}, rng, -3, 5);
  auto y = instance_norm(x);
  for (Index p = 0; p < 6; ++p) {
    double m = 0, v = 0;
    for (Index i = 0; i < 64; ++i) m += y[p * 64 + i];
    m /= 64;
    for (Index i = 0; i < 64; ++i) v += (y[p * 64 + i] - m) * (y[p * 64 + i] - m);
    v /= 64;
    EXPECT_LT(std::abs(m), 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
}

TEST(BatchNorm, TrainingUpdatesRunningStatsAndEvalUsesThem) {
  std::mt19937_64 rng(10);
  auto x = random_f(Shape{4, 2, 3, 3}, rng, 1, 3);
  auto gamma = Tensor::full(Shape{2}, 1.f), beta = Tensor::zeros(Shape{2});
  auto rm = Tensor::zeros(Shape{2}), rv = Tensor::full(Shape{2}, 1.f);
  auto y = batch_norm(x, gamma, beta, rm, rv, true);
  EXPECT_GT(rm[0], 0.1f);  // moved towards the batch mean (~2)
  auto ye = batch_norm(x, gamma, beta, rm, rv, false);
  EXPECT_NE(values(y), values(ye));
  auto one = random_f(Shape{1, 2, 1, 1}, rng);
  EXPECT_THROW(batch_norm(one, gamma, beta, rm, rv, true), ContractError);
}

TEST(MaskedL1, EmptyMaskIsAnError) {
  auto p = Tensor::zeros(Shape{4});
  EXPECT_THROW(masked_l1_mean(p, p, Tensor::zeros(Shape{4})), ContractError);
  auto m = Tensor::from(Shape{4}, {1, 0, 1, 0});
  EXPECT_FLOAT_EQ(masked_l1_mean(Tensor::from(Shape{4}, {1, 9, 3, 9}), Tensor::zeros(Shape{4}), m).item(), 2.f);
}

// Central-difference checks for every differentiable op.
class OpGradients : public ::testing::Test {
 protected:
  std::mt19937_64 rng{1234};
  Projection proj;

  void expect_ok(const std::function<TensorD(const std::vector<TensorD>&)>& f, std::vector<TensorD> in) {
    auto r = check::gradcheck([&](const std::vector<TensorD>& x) { return proj(f(x)); }, std::move(in));
    EXPECT_LT(r.rel_error, kTol) << "analytic norm " << r.analytic_norm << " numeric norm " << r.numeric_norm;
  }
  TensorD rnd(const Shape& s, double lo = -1, double hi = 1) { return random_d(s, rng, lo, hi); }
};

TEST_F(OpGradients, Elementwise) {
  const Shape s{2, 3, 4};
  expect_ok([](auto& x) { return add(x[0], x[1]); }, {rnd(s), rnd(s)});
  expect_ok([](auto& x) { return sub(x[0], x[1]); }, {rnd(s), rnd(s)});
  expect_ok([](auto& x) { return mul(x[0], x[1]); }, {rnd(s), rnd(s)});
  expect_ok([](auto& x) { return scale(x[0], 1.7); }, {rnd(s)});
  expect_ok([](auto& x) { return add_scalar(x[0], 0.3); }, {rnd(s)});
  expect_ok([](auto& x) { return tanh(x[0]); }, {rnd(s, -2, 2)});
  expect_ok([](auto& x) { return sigmoid(x[0]); }, {rnd(s, -3, 3)});
  expect_ok([](auto& x) { return gate_blend(x[0], x[1], x[2]); }, {rnd(s), rnd(s, 0, 1), rnd(s)});
}

TEST_F(OpGradients, ReluAwayFromKink) {
  auto x = rnd(Shape{4, 6});
  for (auto& v : x.mutable_data()) v = v > 0 ? v + 0.1 : v - 0.1;
  expect_ok([](auto& in) { return relu(in[0]); }, {x});
}

TEST_F(OpGradients, Reductions) {
  expect_ok([](auto& x) { return sum(x[0]); }, {rnd(Shape{3, 5})});
  expect_ok([](auto& x) { return mean(x[0]); }, {rnd(Shape{3, 5})});
  expect_ok([](auto& x) { return softmax(x[0], 1); }, {rnd(Shape{2, 9, 3}, -3, 3)});
  expect_ok([](auto& x) { return softmax(x[0], 0); }, {rnd(Shape{4, 5})});
}

TEST_F(OpGradients, ShapeOps) {
  expect_ok([](auto& x) { return concat<double>({x[0], x[1]}, 1); }, {rnd(Shape{2, 3, 4}), rnd(Shape{2, 2, 4})});
  expect_ok([](auto& x) { return narrow(x[0], 2, 1, 3); }, {rnd(Shape{2, 3, 5})});
  expect_ok([](auto& x) { return reshape(x[0], Shape{6, 4}); }, {rnd(Shape{2, 3, 4})});
  expect_ok([](auto& x) { return permute(x[0], {2, 0, 1, 3}); }, {rnd(Shape{2, 3, 4, 2})});
}

TEST_F(OpGradients, Matmul) {
  expect_ok([](auto& x) { return matmul(x[0], x[1]); }, {rnd(Shape{2, 3, 4}), rnd(Shape{2, 4, 5})});
  expect_ok([](auto& x) { return matmul(x[0], x[1]); }, {rnd(Shape{4, 3, 4}), rnd(Shape{4, 2})});
}

TEST_F(OpGradients, Conv2d) {
  for (Index stride : {1, 2}) {
    expect_ok([stride](auto& x) { return conv2d(x[0], x[1], std::optional<TensorD>(x[2]), stride, 1); },
              {rnd(Shape{2, 3, 6, 6}), rnd(Shape{4, 3, 3, 3}), rnd(Shape{4})});
  }
  expect_ok([](auto& x) { return conv2d(x[0], x[1], std::nullopt, 1, 0); },
            {rnd(Shape{3, 5, 4}), rnd(Shape{2, 3, 1, 1})});
  expect_ok([](auto& x) { return conv2d(x[0], x[1], std::nullopt, 1, 3); },
            {rnd(Shape{1, 1, 6, 6}), rnd(Shape{2, 1, 7, 7})});
}

TEST_F(OpGradients, Resampling) {
  expect_ok([](auto& x) { return avgpool_lastdim(x[0]); }, {rnd(Shape{2, 3, 6})});
  expect_ok([](auto& x) { return avgpool_lastdim(x[0]); }, {rnd(Shape{2, 5})});
  expect_ok([](auto& x) { return interpolate2d(x[0], 2, 1); }, {rnd(Shape{2, 2, 3, 4})});
  expect_ok([](auto& x) { return interpolate2d(x[0], 1, 2); }, {rnd(Shape{2, 4, 6})});
  expect_ok([](auto& x) { return interpolate2d(x[0], 1, 1); }, {rnd(Shape{2, 4, 6})});
}

TEST_F(OpGradients, Normalisation) {
  expect_ok([](auto& x) { return instance_norm(x[0]); }, {rnd(Shape{2, 3, 4, 4})});
  auto rm = TensorD::zeros(Shape{3});
  auto rv = TensorD::full(Shape{3}, 1.0);
  expect_ok([&](auto& x) { return batch_norm(x[0], x[1], x[2], rm, rv, true); },
            {rnd(Shape{2, 3, 4, 4}), rnd(Shape{3}, 0.5, 1.5), rnd(Shape{3})});
  expect_ok([&](auto& x) { return batch_norm(x[0], x[1], x[2], rm, rv, false); },
            {rnd(Shape{2, 3, 4, 4}), rnd(Shape{3}, 0.5, 1.5), rnd(Shape{3})});
}

TEST_F(OpGradients, MaskedL1) {
  auto target = rnd(Shape{3, 4});
  auto mask = TensorD::from(Shape{3, 4}, {1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 1, 1});
  auto pred = rnd(Shape{3, 4});
  for (Index i = 0; i < 12; ++i) pred.mutable_data()[static_cast<std::size_t>(i)] = target[i] + (i % 2 ? 0.3 : -0.4);
  auto r = check::gradcheck([&](auto& x) { return masked_l1_mean(x[0], target, mask); }, {pred});
  EXPECT_LT(r.rel_error, kTol);
}

TEST(Kernels, ParallelMatchesSerialBitwise) {
  std::mt19937_64 rng(21);
  for (auto [m, n, k] : std::vector<std::array<Index, 3>>{{{37, 70, 19}}, {{128, 256, 64}}, {{5, 3, 2}}}) {
    auto a = random_f(Shape{m, k}, rng), b = random_f(Shape{k, n}, rng);
    std::vector<float> c1(static_cast<std::size_t>(m * n)), c2(c1.size());
    for (auto tb : {kernels::Trans::kNo, kernels::Trans::kYes}) {
      const Index ldb = tb == kernels::Trans::kNo ? n : k;
      kernels::serial::gemm(kernels::Trans::kNo, tb, m, n, k, a.data().data(), k, b.data().data(), ldb, c1.data(), n,
                            false);
      kernels::parallel::gemm(kernels::Trans::kNo, tb, m, n, k, a.data().data(), k, b.data().data(), ldb, c2.data(),
                              n, false);
      EXPECT_EQ(c1, c2);
    }
  }
  const kernels::ConvGeometry g{3, 9, 11, 3, 3, 2, 1};
  auto img = random_f(Shape{3, 9, 11}, rng);
  const Index ld = g.out_height() * g.out_width();
  std::vector<float> s(static_cast<std::size_t>(g.patch_size() * ld)), p(s.size());
  kernels::serial::im2col(g, img.data().data(), s.data(), ld, 0);
  kernels::parallel::im2col(g, img.data().data(), p.data(), ld, 0);
  EXPECT_EQ(s, p);
  std::vector<float> back1(99 * 3, 0.f), back2(back1.size(), 0.f);
  kernels::serial::col2im(g, s.data(), ld, 0, back1.data());
  kernels::parallel::col2im(g, s.data(), ld, 0, back2.data());
  EXPECT_EQ(back1, back2);
}
