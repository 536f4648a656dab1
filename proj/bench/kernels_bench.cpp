#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "rstereo/kernels.hpp"

namespace k = rstereo::kernels;
using k::Index;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed, float lo = -1, float hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const Index n = state.range(0);
  const auto a = random_vec(static_cast<std::size_t>(n * n), 1), b = random_vec(static_cast<std::size_t>(n * n), 2);
  std::vector<float> c(static_cast<std::size_t>(n * n));
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::gemm(k::Trans::kNo, k::Trans::kNo, n, n, n, a.data(), n, b.data(), n, c.data(), n, false);
    } else {
      k::serial::gemm(k::Trans::kNo, k::Trans::kNo, n, n, n, a.data(), n, b.data(), n, c.data(), n, false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * double(n) * double(n) * double(n), benchmark::Counter::kIsIterationInvariantRate,
                         benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_Im2col(benchmark::State& state) {
  const Index c = state.range(0);
  const k::ConvGeometry g{c, 48, 96, 3, 3, 1, 1};
  const auto img = random_vec(static_cast<std::size_t>(c * 48 * 96), 3);
  const Index cols = g.out_height() * g.out_width();
  std::vector<float> out(static_cast<std::size_t>(g.patch_size() * cols));
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::im2col(g, img.data(), out.data(), cols, 0);
    } else {
      k::serial::im2col(g, img.data(), out.data(), cols, 0);
    }
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_Lookup(benchmark::State& state) {
  const Index h = 32, w = state.range(0), r = 4;
  const k::LookupGeometry g{1, h, w, r, 0, 2 * r + 1};
  const auto level = random_vec(static_cast<std::size_t>(h * w * w), 4);
  const auto disp = random_vec(static_cast<std::size_t>(h * w), 5, 0, 24);
  std::vector<float> out(static_cast<std::size_t>((2 * r + 1) * h * w));
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::lookup_forward(g, level.data(), w, 0, disp.data(), out.data());
    } else {
      k::serial::lookup_forward(g, level.data(), w, 0, disp.data(), out.data());
    }
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_OnTheFlyLookup(benchmark::State& state) {
  const Index h = 32, w = state.range(0), r = 4, d = 64;
  const k::LookupGeometry g{1, h, w, r, 0, 2 * r + 1};
  const auto left = random_vec(static_cast<std::size_t>(h * w * d), 6);
  const auto right = random_vec(static_cast<std::size_t>(h * w * d), 7);
  const auto disp = random_vec(static_cast<std::size_t>(h * w), 8, 0, 24);
  std::vector<float> out(static_cast<std::size_t>((2 * r + 1) * h * w));
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::fly_forward(g, d, left.data(), right.data(), w, 0, 0.125f, disp.data(), out.data());
    } else {
      k::serial::fly_forward(g, d, left.data(), right.data(), w, 0, 0.125f, disp.data(), out.data());
    }
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->Arg(128)->Arg(256);
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Arg(128)->Arg(256);
BENCHMARK(BM_Im2col<false>)->Name("im2col/serial")->Arg(32)->Arg(128);
BENCHMARK(BM_Im2col<true>)->Name("im2col/parallel")->Arg(32)->Arg(128);
BENCHMARK(BM_Lookup<false>)->Name("lookup/serial")->Arg(64)->Arg(128);
BENCHMARK(BM_Lookup<true>)->Name("lookup/parallel")->Arg(64)->Arg(128);
BENCHMARK(BM_OnTheFlyLookup<false>)->Name("lookup_on_the_fly/serial")->Arg(64)->Arg(128);
BENCHMARK(BM_OnTheFlyLookup<true>)->Name("lookup_on_the_fly/parallel")->Arg(64)->Arg(128);

BENCHMARK_MAIN();
