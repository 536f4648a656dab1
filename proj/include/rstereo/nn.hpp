#pragma once

// Small layers shared by the encoders and the update operator.

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>

#include "rstereo/ops.hpp"

namespace rstereo {

enum class NormKind { kNone, kInstance, kBatch };

NormKind parse_norm(const std::string& name);
std::string to_string(NormKind kind);

/// Visits every named tensor of a module. Buffers (running statistics) are
/// persisted in checkpoints but not optimised.
template <typename T>
using TensorVisitor = std::function<void(const std::string& name, BasicTensor<T>& tensor, bool is_buffer)>;

template <typename T>
struct Conv2d {
  BasicTensor<T> weight;
  std::optional<BasicTensor<T>> bias;
  Index stride = 1;
  Index padding = 0;

  Conv2d() = default;
  // Fan-in scaled uniform weights, zero bias.
  Conv2d(Index in, Index out, Index kernel, Index stride_, std::mt19937_64& rng, bool with_bias = true)
      : stride(stride_), padding(kernel / 2) {
    const T bound = T(1) / std::sqrt(static_cast<T>(in * kernel * kernel));
    weight = BasicTensor<T>::uniform(Shape{out, in, kernel, kernel}, -bound, bound, rng).set_requires_grad();
    if (with_bias) bias = BasicTensor<T>::zeros(Shape{out}).set_requires_grad();
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }

  Index out_channels() const { return weight.dim(0); }

  void visit(const std::string& prefix, const TensorVisitor<T>& v) {
    v(prefix + ".weight", weight, false);
    if (bias) v(prefix + ".bias", *bias, false);
  }
};

template <typename T>
struct Norm {
  NormKind kind = NormKind::kNone;
  BasicTensor<T> gamma, beta, running_mean, running_var;
  bool training = true;

  Norm() = default;
  Norm(NormKind k, Index channels) : kind(k) {
    if (kind == NormKind::kBatch) {
      gamma = BasicTensor<T>::full(Shape{channels}, T(1)).set_requires_grad();
      beta = BasicTensor<T>::zeros(Shape{channels}).set_requires_grad();
      running_mean = BasicTensor<T>::zeros(Shape{channels});
      running_var = BasicTensor<T>::full(Shape{channels}, T(1));
    }
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) {
    switch (kind) {
      case NormKind::kInstance:
        return instance_norm(x);
      case NormKind::kBatch:
        return batch_norm(x, gamma, beta, running_mean, running_var, training);
      case NormKind::kNone:
        break;
    }
    return x;
  }

  void visit(const std::string& prefix, const TensorVisitor<T>& v) {
    if (kind != NormKind::kBatch) return;
    v(prefix + ".gamma", gamma, false);
    v(prefix + ".beta", beta, false);
    v(prefix + ".running_mean", running_mean, true);
    v(prefix + ".running_var", running_var, true);
  }
};

/// Pre-activation residual block: two 3x3 convs, norm+relu before each, with
/// a strided 1x1 projection on the skip path when the shape changes.
template <typename T>
struct ResidualBlock {
  Norm<T> norm1, norm2;
  Conv2d<T> conv1, conv2;
  std::optional<Conv2d<T>> skip;

  ResidualBlock() = default;
  ResidualBlock(Index in, Index out, Index stride, NormKind norm, std::mt19937_64& rng)
      : norm1(norm, in), norm2(norm, out), conv1(in, out, 3, stride, rng), conv2(out, out, 3, 1, rng) {
    if (stride != 1 || in != out) skip = Conv2d<T>(in, out, 1, stride, rng);
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) {
    auto y = conv1(relu(norm1(x)));
    y = conv2(relu(norm2(y)));
    return add(y, skip ? (*skip)(x) : x);
  }

  void set_training(bool on) { norm1.training = norm2.training = on; }

  void visit(const std::string& prefix, const TensorVisitor<T>& v) {
    norm1.visit(prefix + ".norm1", v);
    conv1.visit(prefix + ".conv1", v);
    norm2.visit(prefix + ".norm2", v);
    conv2.visit(prefix + ".conv2", v);
    if (skip) skip->visit(prefix + ".skip", v);
  }
};

}  // namespace rstereo
