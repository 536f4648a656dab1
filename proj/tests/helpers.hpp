#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "rstereo/tensor.hpp"

namespace rstereo::testing {

inline TensorD random_d(const Shape& s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  return TensorD::uniform(s, lo, hi, rng);
}

inline Tensor random_f(const Shape& s, std::mt19937_64& rng, float lo = -1, float hi = 1) {
  return Tensor::uniform(s, lo, hi, rng);
}

template <typename T>
std::vector<double> values(const BasicTensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace rstereo::testing

#include "rstereo/config.hpp"

namespace rstereo::testing {

/// Small but structurally complete model configuration.
inline ModelConfig tiny_config(int levels = 3, int downsample = 8) {
  ModelConfig c;
  c.encoder.downsample = downsample;
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

}  // namespace rstereo::testing
