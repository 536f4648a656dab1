#pragma once

// Feature encoder (both images, instance norm) and context encoder (left
// image, hidden-state initialisers plus per-level context), optionally
// sharing one trunk. Images are [3,H,W] or [B,3,H,W] with values in [0,1].

#include <random>
#include <vector>

#include "rstereo/config.hpp"
#include "rstereo/nn.hpp"

namespace rstereo {

template <typename T>
struct ImagePair {
  BasicTensor<T> left, right;
};

/// Rows/columns added on each side by pad_input.
struct CropRecord {
  Index top = 0, bottom = 0, left = 0, right = 0;
  bool empty() const { return top == 0 && bottom == 0 && left == 0 && right == 0; }
};

/// Replicate-pads both images so H and W are multiples of `multiple`,
/// splitting the padding between opposite sides.
template <typename T>
std::pair<ImagePair<T>, CropRecord> pad_input(const ImagePair<T>& pair, Index multiple = 32);

/// Removes the padding from a full-resolution field [..., H, W].
template <typename T>
BasicTensor<T> crop(const BasicTensor<T>& field, const CropRecord& record);

template <typename T>
struct ContextLevel {
  BasicTensor<T> hidden;   // tanh, initial GRU state
  BasicTensor<T> context;  // relu, injected every step
};

template <typename T>
using ContextBundle = std::vector<ContextLevel<T>>;

// Stem conv plus three stages of residual blocks, ending at 1/s resolution.
template <typename T>
struct Trunk {
  Conv2d<T> stem;
  std::vector<std::vector<ResidualBlock<T>>> stages;

  Trunk() = default;
  Trunk(const EncoderConfig& cfg, NormKind norm, std::mt19937_64& rng);
  BasicTensor<T> operator()(const BasicTensor<T>& x);
  Index out_channels() const { return stages.back().back().conv2.out_channels(); }
  void set_training(bool on);
  void visit(const std::string& prefix, const TensorVisitor<T>& v);
};

template <typename T>
class Encoders {
 public:
  struct Output {
    BasicTensor<T> left, right;  // [B,D,H/s,W/s]
    ContextBundle<T> context;
  };

  Encoders(const ModelConfig& cfg, std::mt19937_64& rng);

  BasicTensor<T> feature_encode(const BasicTensor<T>& image);
  ContextBundle<T> context_encode(const BasicTensor<T>& image);
  /// Both in one pass; the shared trunk sees left and right as one batch.
  Output operator()(const BasicTensor<T>& left, const BasicTensor<T>& right);

  void set_training(bool on);
  void visit(const TensorVisitor<T>& v);

 private:
  void check_input(const BasicTensor<T>& image) const;
  BasicTensor<T> feature_head(const BasicTensor<T>& trunk_out);
  ContextBundle<T> context_heads(const BasicTensor<T>& trunk_out);

  ModelConfig cfg_;
  Trunk<T> feature_trunk_, context_trunk_;  // context_trunk_ only when separate
  std::optional<ResidualBlock<T>> shared_feature_block_;
  Norm<T> feature_norm_;
  Conv2d<T> feature_out_;
  std::vector<ResidualBlock<T>> context_down_;  // one per level beyond the finest
  std::vector<Norm<T>> context_norms_;
  std::vector<Conv2d<T>> context_out_;
};

}  // namespace rstereo
