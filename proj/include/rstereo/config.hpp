#pragma once

#include <array>
#include <string>
#include <vector>

#include "rstereo/nn.hpp"

namespace rstereo {

struct EncoderConfig {
  int downsample = 8;  // 4 or 8
  bool shared_backbone = false;
  std::array<int, 3> widths{64, 96, 128};
  int blocks_per_stage = 2;
  int feature_dim = 256;
  NormKind context_norm = NormKind::kBatch;
};

struct CorrelationConfig {
  int levels = 4;
  int radius = 4;
  bool normalize = true;
  bool on_the_fly = false;

  int channels() const { return levels * (2 * radius + 1); }
};

struct UpdateConfig {
  int levels = 3;  // GRU resolutions, 1..3
  int hidden_dim = 128;
  int corr_dim = 64;
  int disp_dim = 64;
  int motion_dim = 128;
  int head_dim = 256;
  int mask_dim = 256;
};

struct ModelConfig {
  EncoderConfig encoder;
  CorrelationConfig correlation;
  UpdateConfig update;

  /// Throws ContractError describing the first inconsistent field.
  void validate() const;
  /// Input extents must be multiples of this.
  int divisor() const { return encoder.downsample << (update.levels - 1); }

  /// Sorted-key JSON; equal configs give identical text.
  std::string to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static ModelConfig from_json(const std::string& text);
};

}  // namespace rstereo
