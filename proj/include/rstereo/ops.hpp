#pragma once

// Differentiable tensor operations. Every op validates shapes, computes its
// result eagerly and, when recording is enabled and an input requires grad,
// registers its adjoint on the tape.
//
// Spatial ops accept [C,H,W] (single image) or [B,C,H,W] (batch).

#include <optional>
#include <vector>

#include "rstereo/tensor.hpp"

namespace rstereo {

// Elementwise, identical shapes.
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& a, T value);

template <typename T> BasicTensor<T> relu(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> tanh(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> sigmoid(const BasicTensor<T>& a);

/// (1 - z)·h + z·candidate, the convex blend at the end of a GRU step.
template <typename T>
BasicTensor<T> gate_blend(const BasicTensor<T>& h, const BasicTensor<T>& z, const BasicTensor<T>& candidate);

template <typename T> BasicTensor<T> sum(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& a);

/// Softmax along `axis`.
template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& a, std::size_t axis);

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);
/// Slice [start, start+length) along `axis`.
template <typename T>
BasicTensor<T> narrow(const BasicTensor<T>& a, std::size_t axis, Index start, Index length);
template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& a, const Shape& shape);
template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& a, const std::vector<std::size_t>& order);

/// Batched matrix product [..., M, K] @ [..., K, N]; leading dims broadcast.
template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Cross-correlation (no kernel flip). weights [Cout, Cin, kh, kw], bias [Cout].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                      const std::optional<BasicTensor<T>>& bias, Index stride, Index padding);
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weights, std::nullopt_t, Index stride,
                      Index padding) {
  return conv2d(input, weights, std::optional<BasicTensor<T>>(), stride, padding);
}

/// Mean of adjacent pairs along the last axis. An odd final element is
/// replicated before pooling, so the extent becomes ceil(L/2).
template <typename T> BasicTensor<T> avgpool_lastdim(const BasicTensor<T>& t);

/// Resampling by a factor of num/den in {1, 2, 1/2}: bilinear (half-pixel
/// centres, edge clamped) for 2, 2x2 mean for 1/2.
template <typename T>
BasicTensor<T> interpolate2d(const BasicTensor<T>& t, int num, int den);

/// Per-sample, per-channel normalisation over the spatial extent.
template <typename T>
BasicTensor<T> instance_norm(const BasicTensor<T>& x, T eps = T(1e-5));

/// Per-channel normalisation over batch and space with an affine transform.
/// In training mode the running statistics are updated in place.
template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          BasicTensor<T>& running_mean, BasicTensor<T>& running_var, bool training,
                          T momentum = T(0.1), T eps = T(1e-5));

/// Mean of |pred - target| over entries where mask > 0. Only `pred` is
/// differentiated.
template <typename T>
BasicTensor<T> masked_l1_mean(const BasicTensor<T>& pred, const BasicTensor<T>& target,
                              const BasicTensor<T>& mask);

}  // namespace rstereo
