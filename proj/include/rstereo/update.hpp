#pragma once

// Multi-resolution recurrent update: convolutional GRUs at up to three
// resolutions (index 0 finest), cross-connected by 2x resampling. Only the
// finest level reads correlation features and emits disparity updates.

#include <random>
#include <vector>

#include "rstereo/config.hpp"
#include "rstereo/nn.hpp"

namespace rstereo {

/// Per-level terms added to the gate pre-activations, computed once from the
/// context features.
template <typename T>
struct GateBias {
  BasicTensor<T> z, r, q;
};

template <typename T>
struct ConvGRU {
  Conv2d<T> convz, convr, convq;

  ConvGRU() = default;
  ConvGRU(Index hidden, Index input, std::mt19937_64& rng);

  Index hidden_dim() const { return convz.out_channels(); }
  BasicTensor<T> operator()(const BasicTensor<T>& h, const BasicTensor<T>& x, const GateBias<T>* bias = nullptr);
  void visit(const std::string& prefix, const TensorVisitor<T>& v);
};

/// Encodes lookup features and the current disparity into the finest GRU's
/// input; the disparity itself is appended as the last channel.
template <typename T>
struct MotionEncoder {
  Conv2d<T> corr1, corr2, disp1, disp2, merge;

  MotionEncoder() = default;
  MotionEncoder(Index corr_channels, const UpdateConfig& cfg, std::mt19937_64& rng);
  BasicTensor<T> operator()(const BasicTensor<T>& corr, const BasicTensor<T>& disparity);
  void visit(const std::string& prefix, const TensorVisitor<T>& v);
};

/// Two convs with a relu between them.
template <typename T>
struct Head {
  Conv2d<T> conv1, conv2;
  T output_scale = T(1);

  Head() = default;
  Head(Index in, Index mid, Index out, Index kernel2, T scale_, std::mt19937_64& rng);
  BasicTensor<T> operator()(const BasicTensor<T>& h);
  void visit(const std::string& prefix, const TensorVisitor<T>& v);
};

/// d [B,1,h,w] (or [1,h,w]), mask logits [B,9·s²,h,w] -> [B,1,s·h,s·w].
/// Fine pixel (y·s+a, x·s+b) is a softmax-weighted mean over the 3x3
/// neighbours of (y, x) of s·d, reading logit channel n·s² + a·s + b for
/// neighbour n; neighbours beyond the border repeat the edge value.
template <typename T>
BasicTensor<T> convex_upsample(const BasicTensor<T>& disparity, const BasicTensor<T>& mask, int factor);

/// Which levels to update at each sub-step. A level's update count per
/// finest update is spread over the sub-steps of one outer iteration, each
/// level taking the trailing ones, so every outer iteration ends with a
/// finest update and runs coarse to fine.
class IterationSchedule {
 public:
  /// Every level once per iteration.
  static IterationSchedule regular(int levels, int iterations);
  /// counts[l] updates of level l (0 finest). Requires counts[0] >= 1 and
  /// counts non-decreasing towards coarser levels.
  static IterationSchedule slow_fast(const std::vector<int>& counts);

  int levels() const { return levels_; }
  /// steps()[i][l] is true when level l updates in sub-step i.
  const std::vector<std::vector<bool>>& steps() const { return steps_; }
  int count(int level) const;
  int finest_updates() const { return count(0); }

 private:
  int levels_ = 0;
  std::vector<std::vector<bool>> steps_;
};

template <typename T>
struct MultiLevelState {
  std::vector<BasicTensor<T>> hidden;  // [B,hid,h/2^l,w/2^l]
  std::vector<GateBias<T>> bias;
};

template <typename T>
class MultiLevelUpdate {
 public:
  MultiLevelUpdate(const ModelConfig& cfg, std::mt19937_64& rng);

  /// Gate terms from each level's context features.
  std::vector<GateBias<T>> gate_bias(const std::vector<BasicTensor<T>>& context);

  /// Updates the levels flagged in `update` (coarse to fine). When the finest
  /// level is updated, `corr` must hold the lookup at `disparity` and the
  /// disparity increment and mask logits are written to `delta`/`mask`.
  void step(MultiLevelState<T>& state, const std::vector<bool>& update, const BasicTensor<T>& corr,
            const BasicTensor<T>& disparity, BasicTensor<T>* delta, BasicTensor<T>* mask);

  ConvGRU<T>& gru(int level) { return grus_[static_cast<std::size_t>(level)]; }
  Head<T>& disparity_head() { return disp_head_; }
  void visit(const TensorVisitor<T>& v);

 private:
  ModelConfig cfg_;
  std::vector<Conv2d<T>> context_convs_;
  std::vector<ConvGRU<T>> grus_;
  MotionEncoder<T> motion_;
  Head<T> disp_head_, mask_head_;
};

}  // namespace rstereo
