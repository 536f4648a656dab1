#pragma once

// Verification helpers kept out of the main library: central-difference
// gradient checking and brute-force reference implementations.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rstereo/ops.hpp"

namespace rstereo::check {

struct GradReport {
  double rel_error = 0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double analytic_norm = 0, numeric_norm = 0;
  std::size_t coordinates = 0;
};

/// Compares d(loss)/d(inputs) against central differences. `loss` must build
/// a fresh graph from the current input values on every call.
GradReport gradcheck(const std::function<TensorD(const std::vector<TensorD>&)>& loss, std::vector<TensorD> inputs,
                     double eps = 1e-5);

/// Same over at most `per_tensor` random coordinates of each parameter;
/// `loss` reads the parameters directly.
GradReport gradcheck_sampled(const std::function<TensorD()>& loss, std::vector<TensorD> params,
                             std::size_t per_tensor, std::mt19937_64& rng, double eps = 1e-5);

namespace oracle {

/// Row-major [m,k] x [k,n].
std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, Index m, Index k, Index n);

/// Direct summation; input [C,H,W], weights [O,C,kh,kw].
std::vector<double> conv2d(const std::vector<double>& input, Index c, Index h, Index w,
                           const std::vector<double>& weights, Index o, Index kh, Index kw, Index stride,
                           Index padding);

/// C[i][j][k] = scale·Σ_h f[h][i][j]·g[h][i][k] for features [D,H,W].
std::vector<double> volume(const std::vector<double>& f, const std::vector<double>& g, Index d, Index h, Index w,
                           double scale);

/// Means of adjacent pairs, odd tail repeated.
std::vector<double> pairwise_mean(const std::vector<double>& row);

/// Windowed lookup on levels [H,W,W_k] at (j - d)/2^k + o, zero outside.
std::vector<double> lookup(const std::vector<std::vector<double>>& levels, const std::vector<Index>& level_widths,
                           const std::vector<double>& disparity, Index h, Index w, int radius);

/// One-pixel, one-channel GRU with weights for [h, x] and gate biases.
struct ScalarGru {
  double wz_h, wz_x, bz, wr_h, wr_x, br, wq_h, wq_x, bq;
  double operator()(double h, double x) const;
};

/// Fine field [H·s, W·s] from coarse [H,W] and logits [9·s², H, W].
std::vector<double> convex_upsample(const std::vector<double>& d, const std::vector<double>& logits, Index h, Index w,
                                    Index s);

}  // namespace oracle

}  // namespace rstereo::check
