#include "rstereo/suites.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <sstream>

#include "rstereo/check.hpp"
#include "rstereo/flops.hpp"
#include "rstereo/io.hpp"
#include "rstereo/training.hpp"

namespace rstereo::check {

namespace {

using Clock = std::chrono::steady_clock;

template <typename F>
Outcome timed(F&& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  o.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return o;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

template <typename T>
std::vector<double> as_vector(const BasicTensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

ModelConfig toy_config(int levels) {
  ModelConfig c;
  c.encoder.widths = {8, 12, 16};
  c.encoder.blocks_per_stage = 1;
  c.encoder.feature_dim = 16;
  c.encoder.context_norm = NormKind::kInstance;
  c.correlation.levels = 2;
  c.correlation.radius = 2;
  c.update.levels = levels;
  c.update.hidden_dim = 8;
  c.update.corr_dim = 8;
  c.update.disp_dim = 4;
  c.update.motion_dim = 8;
  c.update.head_dim = 8;
  c.update.mask_dim = 8;
  return c;
}

}  // namespace

Outcome volume_oracle(int seeds) {
  return timed([&] {
    const Index d = 8, h = 4, w = 6;
    double worst = 0;
    for (int seed = 0; seed < seeds; ++seed) {
      std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
      const auto f = Tensor::uniform(Shape{d, h, w}, -1.f, 1.f, rng), g = Tensor::uniform(Shape{d, h, w}, -1.f, 1.f, rng);
      const auto ref = oracle::volume(as_vector(f), as_vector(g), d, h, w, 1.0 / std::sqrt(double(d)));
      const auto got = build_volume(f, g);
      for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(double(got.data()[i]) - ref[i]));
    }
    return Outcome{worst < 1e-5, "max |diff| " + fmt(worst) + " over " + std::to_string(seeds) + " seeds"};
  });
}

Outcome pyramid_contract() {
  return timed([] {
    std::mt19937_64 rng(1);
    const Index w = 64, h = 3;
    const auto vol = build_volume(TensorD::uniform(Shape{5, h, w}, -1, 1, rng), TensorD::uniform(Shape{5, h, w}, -1, 1, rng));
    const auto pyr = build_pyramid(vol, 4);
    std::vector<Index> extents;
    for (const auto& p : pyr) extents.push_back(p.dim(2));
    const bool extents_ok = extents == std::vector<Index>{64, 32, 16, 8};
    bool exact = true;
    for (std::size_t k = 1; k < pyr.size() && extents_ok; ++k) {
      const Index prev = pyr[k - 1].dim(2), cur = pyr[k].dim(2);
      for (Index r = 0; r < h * w; ++r) {
        const auto src = pyr[k - 1].data().subspan(static_cast<std::size_t>(r * prev), static_cast<std::size_t>(prev));
        const auto ref = oracle::pairwise_mean({src.begin(), src.end()});
        for (Index c = 0; c < cur; ++c) exact = exact && pyr[k].data()[static_cast<std::size_t>(r * cur + c)] == ref[c];
      }
    }
    std::string ext;
    for (Index e : extents) ext += (ext.empty() ? "" : ",") + std::to_string(e);
    return Outcome{extents_ok && exact, "extents [" + ext + "], pairwise means " + (exact ? "exact" : "differ")};
  });
}

Outcome lookup_contract() {
  return timed([] {
    std::mt19937_64 rng(2);
    const Index d = 8, h = 3, w = 16;
    const auto f = Tensor::uniform(Shape{d, h, w}, -1.f, 1.f, rng), g = Tensor::uniform(Shape{d, h, w}, -1.f, 1.f, rng);
    const auto vol = build_volume(f, g);
    const auto pyr = build_pyramid(vol, 4);
    const auto v = vol.data();

    // Integer disparities, radius 0: level 0 is direct indexing.
    bool integer_exact = true;
    auto disp = Tensor::zeros(Shape{1, h, w});
    for (auto& x : disp.mutable_data()) x = static_cast<float>(std::uniform_int_distribution<int>(-3, 12)(rng));
    auto out = lookup(pyr, disp, 0);
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        const Index k = j - static_cast<Index>(disp[i * w + j]);
        const float ref = (k >= 0 && k < w) ? v[static_cast<std::size_t>((i * w + j) * w + k)] : 0.f;
        integer_exact = integer_exact && out[i * w + j] == ref;
      }
    }

    // Half-integer disparities: mean of the two neighbouring entries.
    double half_err = 0;
    for (auto& x : disp.mutable_data()) x = static_cast<float>(std::uniform_int_distribution<int>(0, 12)(rng)) + 0.5f;
    out = lookup(pyr, disp, 0);
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        const double x = double(j) - disp[i * w + j];
        const auto k0 = static_cast<Index>(std::floor(x));
        auto at = [&](Index k) { return (k >= 0 && k < w) ? double(v[static_cast<std::size_t>((i * w + j) * w + k)]) : 0.0; };
        half_err = std::max(half_err, std::abs(out[i * w + j] - 0.5 * (at(k0) + at(k0 + 1))));
      }
    }

    // Far outside the row on every level.
    bool zero_outside = true;
    for (float far : {200.f, -300.f}) {
      const auto o = lookup(pyr, Tensor::full(Shape{1, h, w}, far), 4);
      for (float x : o.data()) zero_outside = zero_outside && x == 0.f;
    }

    // On-the-fly against precomputed, 8x16 features.
    const auto f2 = Tensor::uniform(Shape{1, 16, 8, 16}, -1.f, 1.f, rng), g2 = Tensor::uniform(Shape{1, 16, 8, 16}, -1.f, 1.f, rng);
    const auto d2 = Tensor::uniform(Shape{1, 1, 8, 16}, -2.f, 14.f, rng);
    const auto pre = lookup(build_pyramid(build_volume(f2, g2), 4), d2, 4);
    const auto fly = lookup_on_the_fly(f2, g2, d2, 4, 4);
    double fly_err = 0;
    for (Index i = 0; i < pre.numel(); ++i) fly_err = std::max(fly_err, double(std::abs(pre[i] - fly[i])));

    const bool pass = integer_exact && half_err < 1e-6 && zero_outside && fly_err < 1e-4;
    return Outcome{pass, std::string("integer ") + (integer_exact ? "exact" : "differs") + ", half-integer err " +
                             fmt(half_err) + ", out-of-range " + (zero_outside ? "zero" : "nonzero") +
                             ", on-the-fly err " + fmt(fly_err)};
  });
}

Outcome gradient_suite() {
  return timed([] {
    std::mt19937_64 rng(3);
    auto rnd = [&](const Shape& s, double lo = -1, double hi = 1) { return TensorD::uniform(s, lo, hi, rng); };
    auto away_from_zero = [&](const Shape& s) {
      auto t = rnd(s, 0.2, 1);
      for (auto& x : t.mutable_data()) x *= std::bernoulli_distribution(0.5)(rng) ? 1 : -1;
      return t;
    };

    struct Case {
      std::string name;
      std::function<TensorD(const std::vector<TensorD>&)> loss;
      std::vector<TensorD> inputs;
    };
    std::vector<Case> cases;
    // Weighted sum so every output coordinate carries a distinct sensitivity.
    auto add_case = [&](std::string name, std::vector<TensorD> inputs, auto body) {
      const auto w = TensorD::uniform(body(inputs).shape(), -1, 1, rng);
      cases.push_back({std::move(name), [body, w](const std::vector<TensorD>& in) { return sum(mul(body(in), w)); },
                       std::move(inputs)});
    };
    const Shape s{2, 3, 4};
    add_case("add", {rnd(s), rnd(s)}, [](auto& in) { return add(in[0], in[1]); });
    add_case("sub", {rnd(s), rnd(s)}, [](auto& in) { return sub(in[0], in[1]); });
    add_case("mul", {rnd(s), rnd(s)}, [](auto& in) { return mul(in[0], in[1]); });
    add_case("scale", {rnd(s)}, [](auto& in) { return scale(in[0], 1.7); });
    add_case("add_scalar", {rnd(s)}, [](auto& in) { return add_scalar(in[0], -0.3); });
    add_case("relu", {away_from_zero(s)}, [](auto& in) { return relu(in[0]); });
    add_case("tanh", {rnd(s, -2, 2)}, [](auto& in) { return tanh(in[0]); });
    add_case("sigmoid", {rnd(s, -3, 3)}, [](auto& in) { return sigmoid(in[0]); });
    add_case("gate_blend", {rnd(s), rnd(s, 0, 1), rnd(s)}, [](auto& in) { return gate_blend(in[0], in[1], in[2]); });
    add_case("sum", {rnd(s)}, [](auto& in) { return reshape(sum(in[0]), Shape{1}); });
    add_case("mean", {rnd(s)}, [](auto& in) { return reshape(mean(in[0]), Shape{1}); });
    add_case("softmax", {rnd(s, -2, 2)}, [](auto& in) { return softmax(in[0], 1); });
    add_case("concat", {rnd(s), rnd(Shape{2, 2, 4})}, [](auto& in) { return concat<double>({in[0], in[1]}, 1); });
    add_case("narrow", {rnd(s)}, [](auto& in) { return narrow(in[0], 2, 1, 2); });
    add_case("reshape", {rnd(s)}, [](auto& in) { return reshape(in[0], Shape{6, 4}); });
    add_case("permute", {rnd(s)}, [](auto& in) { return permute(in[0], {2, 0, 1}); });
    add_case("matmul", {rnd(Shape{2, 3, 4}), rnd(Shape{4, 5})}, [](auto& in) { return matmul(in[0], in[1]); });
    add_case("conv2d", {rnd(Shape{2, 3, 5, 6}), rnd(Shape{4, 3, 3, 3}), rnd(Shape{4})},
             [](auto& in) { return conv2d(in[0], in[1], std::optional<TensorD>(in[2]), 1, 1); });
    add_case("conv2d_strided", {rnd(Shape{1, 2, 7, 6}), rnd(Shape{3, 2, 3, 3})},
             [](auto& in) { return conv2d(in[0], in[1], std::nullopt, 2, 1); });
    add_case("avgpool_lastdim", {rnd(Shape{2, 3, 7})}, [](auto& in) { return avgpool_lastdim(in[0]); });
    add_case("interpolate_up", {rnd(Shape{1, 2, 3, 4})}, [](auto& in) { return interpolate2d(in[0], 2, 1); });
    add_case("interpolate_down", {rnd(Shape{1, 2, 4, 6})}, [](auto& in) { return interpolate2d(in[0], 1, 2); });
    add_case("instance_norm", {rnd(Shape{2, 3, 3, 4})}, [](auto& in) { return instance_norm(in[0]); });
    add_case("batch_norm", {rnd(Shape{2, 3, 3, 4}), rnd(Shape{3}, 0.5, 1.5), rnd(Shape{3})}, [](auto& in) {
      auto mean = TensorD::zeros(Shape{3}), var = TensorD::full(Shape{3}, 1.0);
      return batch_norm(in[0], in[1], in[2], mean, var, true);
    });
    {
      const auto target = rnd(s), mask = rnd(s, -0.5, 1);
      add_case("masked_l1_mean", {add(target, away_from_zero(s))}, [target, mask](auto& in) {
        return reshape(masked_l1_mean(in[0], target, mask), Shape{1});
      });
    }
    add_case("sample_1d", {rnd(Shape{6}), TensorD::scalar(2.3)},
             [](auto& in) { return reshape(bilinear_sample_1d(in[0], in[1]), Shape{1}); });
    add_case("volume", {rnd(Shape{4, 3, 5}), rnd(Shape{4, 3, 5})}, [](auto& in) { return build_volume(in[0], in[1]); });
    add_case("pyramid", {rnd(Shape{2, 3, 7})}, [](auto& in) {
      auto p = build_pyramid(in[0], 3);
      return concat<double>({reshape(p[0], Shape{42}), reshape(p[1], Shape{24}), reshape(p[2], Shape{12})}, 0);
    });
    {
      const auto disp = rnd(Shape{1, 3, 9}, -1.7, 6.3);
      add_case("lookup", {rnd(Shape{3, 9, 9}), disp}, [](auto& in) {
        return lookup(build_pyramid(in[0], 2), in[1], 2);
      });
      add_case("lookup_on_the_fly", {rnd(Shape{4, 3, 9}), rnd(Shape{4, 3, 9}), disp},
               [](auto& in) { return lookup_on_the_fly(in[0], in[1], in[2], 2, 2); });
    }
    add_case("convex_upsample", {rnd(Shape{1, 1, 3, 3}), rnd(Shape{1, 36, 3, 3}, -2, 2)},
             [](auto& in) { return convex_upsample(in[0], in[1], 2); });
    {
      std::mt19937_64 init(4);
      auto gru = std::make_shared<ConvGRU<double>>(3, 2, init);
      add_case("conv_gru", {rnd(Shape{1, 3, 4, 4}, -0.9, 0.9), rnd(Shape{1, 2, 4, 4}), rnd(Shape{1, 3, 4, 4})},
               [gru](auto& in) {
                 GateBias<double> b{in[2], in[2], in[2]};
                 return (*gru)(in[0], in[1], &b);
               });
    }

    double worst = 0;
    std::string worst_name, failed;
    for (auto& c : cases) {
      const auto r = gradcheck(c.loss, c.inputs);
      if (r.rel_error > worst) {
        worst = r.rel_error;
        worst_name = c.name;
      }
      if (!(r.rel_error < 1e-3)) failed += (failed.empty() ? "" : ",") + c.name;
    }

    // Whole model: 2 updates, single GRU level, 8x8 coarse grid.
    StereoModel<double> model(toy_config(1), 5);
    model.set_training(false);
    const auto left = rnd(Shape{1, 3, 64, 64}, 0, 1), right = rnd(Shape{1, 3, 64, 64}, 0, 1);
    const auto gt = rnd(Shape{1, 1, 64, 64}, 0, 6), mask = TensorD::full(Shape{1, 1, 64, 64}, 1.0);
    auto rollout = [&](const TensorD& initial) {
      RolloutOptions<double> opts;
      opts.iterations = 2;
      opts.keep_sequence = true;
      opts.initial = initial;
      return sequence_loss(model.forward(left, right, opts).sequence, gt, mask, 0.9);
    };
    const auto e2e_disp = gradcheck([&](const std::vector<TensorD>& in) { return rollout(in[0]); },
                                    {rnd(Shape{1, 1, 8, 8}, 0.5, 3)});
    const auto d0 = rnd(Shape{1, 1, 8, 8}, 0.5, 3);
    const auto e2e_params = gradcheck_sampled([&] { return rollout(d0); }, model.parameters(), 2, rng);
    for (const auto& [name, r] : {std::pair{std::string("model.disparity"), e2e_disp},
                                  std::pair{std::string("model.parameters"), e2e_params}}) {
      if (r.rel_error > worst) {
        worst = r.rel_error;
        worst_name = name;
      }
      if (!(r.rel_error < 1e-3)) failed += (failed.empty() ? "" : ",") + name;
    }
    const std::size_t total = cases.size() + 2;
    return Outcome{failed.empty(), std::to_string(total) + " checks, worst rel err " + fmt(worst) + " (" + worst_name +
                                       ")" + (failed.empty() ? "" : ", failed: " + failed)};
  });
}

Outcome convex_upsample_contract() {
  return timed([] {
    std::mt19937_64 rng(6);
    const Index h = 5, w = 7;
    double sum_err = 0, const_err = 0, hull_violation = 0;
    for (int s : {4, 8}) {
      const auto logits = Tensor::uniform(Shape{1, 9 * s * s, h, w}, -8.f, 8.f, rng);
      // Unit field: each output is s times the sum of its weights.
      const auto unit = convex_upsample(Tensor::full(Shape{1, 1, h, w}, 1.f), logits, s);
      for (float v : unit.data()) sum_err = std::max(sum_err, std::abs(double(v) / s - 1.0));
      const auto c = convex_upsample(Tensor::full(Shape{1, 1, h, w}, -2.375f), logits, s);
      for (float v : c.data()) const_err = std::max(const_err, std::abs(double(v) + 2.375 * s));
      const auto d = Tensor::uniform(Shape{1, 1, h, w}, -10.f, 10.f, rng);
      const auto up = convex_upsample(d, logits, s);
      for (Index y = 0; y < h * s; ++y) {
        for (Index x = 0; x < w * s; ++x) {
          double lo = 1e30, hi = -1e30;
          for (Index dy = -1; dy <= 1; ++dy) {
            for (Index dx = -1; dx <= 1; ++dx) {
              const Index yy = std::clamp<Index>(y / s + dy, 0, h - 1), xx = std::clamp<Index>(x / s + dx, 0, w - 1);
              lo = std::min(lo, double(s) * d[yy * w + xx]);
              hi = std::max(hi, double(s) * d[yy * w + xx]);
            }
          }
          const double v = up[y * w * s + x];
          hull_violation = std::max({hull_violation, lo - v, v - hi});
        }
      }
    }
    const bool pass = sum_err <= 1e-6 && const_err <= 1e-5 * 8 * 2.375 && hull_violation <= 1e-5;
    return Outcome{pass, "weight-sum err " + fmt(sum_err) + ", constant err " + fmt(const_err) + ", hull excess " +
                             fmt(std::max(0.0, hull_violation))};
  });
}

Outcome slow_fast_contract() {
  return timed([] {
    ModelConfig cfg;  // full-width update operator
    StereoModel<float> model(cfg, 7);
    model.set_training(false);
    std::mt19937_64 rng(8);
    const auto l = Tensor::uniform(Shape{1, 3, 64, 128}, 0.f, 1.f, rng), r = Tensor::uniform(Shape{1, 3, 64, 128}, 0.f, 1.f, rng);
    NoGradGuard guard;
    auto run = [&](const IterationSchedule& s, std::vector<double>* levels) {
      flops::Counter counter;
      RolloutOptions<float> opts;
      opts.schedule = s;
      auto out = model.forward(l, r, opts).disparity;
      if (levels) {
        for (int k = 0; k < 3; ++k) levels->push_back(double(counter.get("gru.l" + std::to_string(k))));
        levels->push_back(double(counter.prefixed("gru.")));
      }
      return out;
    };
    std::vector<double> one, sf, reg;
    run(IterationSchedule::regular(3, 1), &one);
    run(IterationSchedule::slow_fast({10, 20, 30}), &sf);
    run(IterationSchedule::regular(3, 32), &reg);
    const double ratio = one[0] / one[1], frac = sf[3] / reg[3];
    const auto a = run(IterationSchedule::regular(3, 6), nullptr);
    const auto b = run(IterationSchedule::slow_fast({6, 6, 6}), nullptr);
    const bool same = std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end(),
                                 [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
    const bool pass = ratio >= 3.5 && ratio <= 4.5 && frac < 0.5 && same;
    return Outcome{pass, "finest:middle " + fmt(ratio) + ", slow-fast/regular " + fmt(frac) + ", equal counts " +
                             (same ? "bitwise equal" : "differ")};
  });
}

Outcome io_round_trips(const std::string& dir) {
  return timed([&] {
    std::filesystem::create_directories(dir);
    std::mt19937_64 rng(9);
    auto field = Tensor::uniform(Shape{1, 13, 17}, -300.f, 300.f, rng);
    const std::string pfm = dir + "/roundtrip.pfm";
    write_pfm(field, pfm);
    const auto back = read_pfm(pfm).first;
    bool pfm_exact = back.shape() == field.shape();
    for (Index i = 0; pfm_exact && i < field.numel(); ++i) {
      pfm_exact = std::bit_cast<std::uint32_t>(back[i]) == std::bit_cast<std::uint32_t>(field[i]);
    }

    const auto cfg = toy_config(3);
    StereoModel<float> a(cfg, 10);
    a.set_training(false);
    const auto l = Tensor::uniform(Shape{3, 48, 80}, 0.f, 1.f, rng), r = Tensor::uniform(Shape{3, 48, 80}, 0.f, 1.f, rng);
    RolloutOptions<float> opts;
    opts.iterations = 4;
    const auto before = run_inference(a, ImagePair<float>{l, r}, opts).disparity;
    const std::string ckpt = dir + "/roundtrip.ckpt";
    save_checkpoint(ckpt, a);
    auto b = load_model(ckpt);
    std::vector<std::vector<std::uint32_t>> wa, wb;
    auto bits = [](std::vector<std::vector<std::uint32_t>>& out) {
      return [&out](const std::string&, Tensor& t, bool) {
        std::vector<std::uint32_t> v;
        for (float x : t.data()) v.push_back(std::bit_cast<std::uint32_t>(x));
        out.push_back(std::move(v));
      };
    };
    a.visit(bits(wa));
    b->visit(bits(wb));
    const bool weights_exact = wa == wb;
    const auto after = run_inference(*b, ImagePair<float>{l, r}, opts).disparity;
    bool infer_exact = after.shape() == before.shape();
    for (Index i = 0; infer_exact && i < before.numel(); ++i) {
      infer_exact = std::bit_cast<std::uint32_t>(after[i]) == std::bit_cast<std::uint32_t>(before[i]);
    }
    std::filesystem::remove(pfm);
    std::filesystem::remove(ckpt);
    const bool pass = pfm_exact && weights_exact && infer_exact;
    return Outcome{pass, std::string("pfm ") + (pfm_exact ? "bit-exact" : "differs") + ", checkpoint " +
                             (weights_exact ? "bit-exact" : "differs") + ", reload inference " +
                             (infer_exact ? "bitwise equal" : "differs")};
  });
}

}  // namespace rstereo::check
