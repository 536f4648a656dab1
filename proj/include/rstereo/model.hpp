#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "rstereo/correlation.hpp"
#include "rstereo/encoders.hpp"
#include "rstereo/update.hpp"

namespace rstereo {

template <typename T>
struct RolloutOptions {
  int iterations = 12;
  /// Overrides `iterations` when set.
  std::optional<IterationSchedule> schedule;
  /// Keep the upsampled prediction of every finest update.
  bool keep_sequence = false;
  /// Starting coarse disparity [B,1,h,w]; zeros when undefined.
  BasicTensor<T> initial;
};

template <typename T>
struct RolloutResult {
  BasicTensor<T> disparity;  // [B,1,H,W], full resolution
  BasicTensor<T> coarse;     // [B,1,H/s,W/s]
  std::vector<BasicTensor<T>> sequence;
  std::vector<BasicTensor<T>> coarse_sequence;
};

template <typename T>
class StereoModel {
 public:
  StereoModel(const ModelConfig& cfg, std::uint64_t seed);

  /// Images [B,3,H,W] with H, W multiples of config().divisor().
  RolloutResult<T> forward(const BasicTensor<T>& left, const BasicTensor<T>& right,
                           const RolloutOptions<T>& options = {});

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  void set_training(bool on);
  bool training() const { return training_; }

  void visit(const TensorVisitor<T>& v);
  /// Optimised tensors only.
  std::vector<BasicTensor<T>> parameters();
  Index parameter_count();

  Encoders<T>& encoders() { return encoders_; }
  MultiLevelUpdate<T>& update() { return update_; }

 private:
  ModelConfig cfg_;
  std::uint64_t seed_;
  std::mt19937_64 rng_;
  Encoders<T> encoders_;
  MultiLevelUpdate<T> update_;
  bool training_ = true;
};

/// Pads, runs the rollout without recording gradients, and crops back.
/// Images are [3,H,W] or [B,3,H,W]; results keep that batching.
template <typename T>
RolloutResult<T> run_inference(StereoModel<T>& model, const ImagePair<T>& pair, const RolloutOptions<T>& options);

}  // namespace rstereo
