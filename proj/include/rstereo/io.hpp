#pragma once

#include <memory>
#include <string>

#include "rstereo/model.hpp"

namespace rstereo {

class AdamW;

/// Greyscale portable float map. Returns the field as [1,H,W] with rows
/// top-down, plus the absolute header scale.
std::pair<Tensor, float> read_pfm(const std::string& path);
/// Writes [1,H,W] or [H,W] little-endian (negative scale).
void write_pfm(const Tensor& field, const std::string& path);

/// 8-bit PNG or binary PPM (P6) as [3,H,W] in [0,1].
Tensor read_image(const std::string& path);
/// 8-bit RGB PNG from [3,H,W] values in [0,1].
void write_png(const Tensor& rgb, const std::string& path);
/// Colour-coded disparity PNG; the value range goes to `path + ".txt"`.
void write_disparity_png(const Tensor& field, const std::string& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
  std::uint32_t version = 0;
  ModelConfig config;
  std::uint64_t seed = 0;
};

/// Atomic (temporary file then rename). Optimiser state is optional.
void save_checkpoint(const std::string& path, StereoModel<float>& model, AdamW* optimizer = nullptr);
CheckpointHeader read_checkpoint_header(const std::string& path);
/// Throws ConfigConflictError when the stored configuration differs from the
/// model's, LoadError for anything else that does not match.
void load_checkpoint(const std::string& path, StereoModel<float>& model, AdamW* optimizer = nullptr);
/// Builds the model described by the checkpoint and loads its weights.
std::unique_ptr<StereoModel<float>> load_model(const std::string& path);

}  // namespace rstereo
