#pragma once

// All-pairs correlation along image rows, its pooled pyramid, and the
// windowed lookup around the current disparity estimate.
//
// Feature maps are [D,h,w] or [B,D,h,w]. Volumes are [h,w,w] or [B,h,w,w]
// with the last axis indexing the right-image column. Disparities are
// [1,h,w] or [B,1,h,w]; lookups return [levels·(2r+1), h, w] (batched
// accordingly), channel k·(2r+1) + (o + r) for level k and offset o.

#include <span>
#include <vector>

#include "rstereo/config.hpp"
#include "rstereo/ops.hpp"

namespace rstereo {

/// Linear interpolation of `row` at `x` with zero outside [0, n-1].
template <typename T>
T bilinear_sample_1d(std::span<const T> row, T x);

/// Differentiable form of the above: `x` is a scalar tensor.
template <typename T>
BasicTensor<T> bilinear_sample_1d(const BasicTensor<T>& row, const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> build_volume(const BasicTensor<T>& f, const BasicTensor<T>& g, bool normalize = true);

template <typename T>
std::vector<BasicTensor<T>> build_pyramid(const BasicTensor<T>& volume, int levels = 4);

template <typename T>
BasicTensor<T> lookup(const std::vector<BasicTensor<T>>& pyramid, const BasicTensor<T>& disparity, int radius);

/// Same values as build_volume -> build_pyramid -> lookup, computed from the
/// features directly. Never allocates a w×w buffer.
template <typename T>
BasicTensor<T> lookup_on_the_fly(const BasicTensor<T>& f, const BasicTensor<T>& g, const BasicTensor<T>& disparity,
                                 int levels, int radius, bool normalize = true);

/// Holds whatever one rollout needs to answer lookups: either the pyramid or
/// the permuted, pooled features.
template <typename T>
class CorrelationSampler {
 public:
  CorrelationSampler(const BasicTensor<T>& f, const BasicTensor<T>& g, const CorrelationConfig& cfg);

  BasicTensor<T> operator()(const BasicTensor<T>& disparity) const;
  const std::vector<BasicTensor<T>>& pyramid() const { return pyramid_; }

 private:
  CorrelationConfig cfg_;
  std::vector<BasicTensor<T>> pyramid_;
  BasicTensor<T> left_;                // [B,h,w,D]
  std::vector<BasicTensor<T>> right_;  // [B,h,w_k,D]
  T norm_ = T(1);
};

}  // namespace rstereo
