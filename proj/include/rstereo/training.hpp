#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rstereo/metrics.hpp"
#include "rstereo/model.hpp"

namespace rstereo {

/// Weight of prediction i (0-based) out of n: gamma^(n-1-i), built by repeated
/// multiplication from the last prediction backwards.
std::vector<double> sequence_weights(int n, double gamma);

/// Σ_i gamma^(N-i) · masked mean |gt - pred_i| over predictions i = 1..N.
template <typename T>
BasicTensor<T> sequence_loss(const std::vector<BasicTensor<T>>& predictions, const BasicTensor<T>& gt,
                             const BasicTensor<T>& mask, T gamma = T(0.9));

struct AdamWConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 1e-5f;
};

/// Adam with decoupled weight decay over a fixed parameter list.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg = {});

  void step(float lr);
  void zero_grad();
  std::int64_t steps() const;

  /// Visits the moment buffers and the step counter (as a 1-element tensor)
  /// for checkpointing. Names are stable across runs.
  void visit(const TensorVisitor<float>& v);

 private:
  std::vector<Tensor> params_;
  std::vector<Tensor> m_, v_;
  Tensor step_count_;
  AdamWConfig cfg_;
};

/// Rescales gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

struct OneCycleConfig {
  double peak = 2e-4;
  double floor = 1e-4;
  double div_factor = 2.0;     // start = peak / div_factor
  double warmup_fraction = 0.05;

  void validate() const;
};

/// Linear warmup from peak/div_factor to peak, then linear decay to floor at
/// the last step.
double one_cycle_lr(std::int64_t step, std::int64_t total_steps, const OneCycleConfig& cfg);

/// One training example; images [3,H,W] in [0,1], disparity and mask
/// [1,H,W] on the left-image grid.
struct StereoSample {
  Tensor left, right, disparity, mask;
};

enum class SceneKind { kConstant, kLayers, kSlanted };

SceneKind parse_scene(const std::string& name);

struct SyntheticConfig {
  Index height = 64;
  Index width = 128;
  double max_disp = 16;
  std::vector<SceneKind> kinds{SceneKind::kConstant, SceneKind::kLayers};
  /// When >= 0, kConstant scenes use exactly this disparity.
  double fixed_disparity = -1;
};

/// Random textured scene. Left pixel (i, j) sees the same surface point as
/// right pixel (i, j - d); pixels whose match leaves the right view or is
/// hidden by a nearer surface are masked out.
StereoSample generate_synthetic(std::mt19937_64& rng, const SyntheticConfig& cfg);

struct AugmentConfig {
  float saturation_min = 0.f, saturation_max = 1.4f;
  float stretch_min = 0.8705506f, stretch_max = 1.3195079f;  // 2^-0.2, 2^0.4
  float vertical_shift = 0.5f;                                // px, right image only
  Index crop_height = 0, crop_width = 0;                      // 0 keeps the full extent
};

StereoSample augment(const StereoSample& sample, const AugmentConfig& cfg, std::mt19937_64& rng);

struct TrainConfig {
  std::int64_t steps = 1000;
  Index batch = 2;
  int iterations = 16;
  float gamma = 0.9f;
  double clip = 1.0;
  OneCycleConfig lr;
  AdamWConfig optimizer;
  SyntheticConfig data;
  AugmentConfig augment;
  bool use_augment = true;
  std::int64_t validate_every = 0;  // 0 disables periodic validation
  int validation_samples = 20;
  int validation_iterations = 12;
  std::int64_t checkpoint_every = 0;
  std::string checkpoint_path;  // empty disables checkpoints
  std::string log_path;         // empty disables the log
  std::uint64_t seed = 1;

  void validate() const;
  /// JSON object with the fields above; unknown keys are rejected.
  static TrainConfig from_json(const std::string& text);
};

/// Draws the training batch for a step.
using BatchSource = std::function<std::vector<StereoSample>(std::int64_t step, std::mt19937_64& rng)>;

/// Synthetic scenes plus augmentation as configured.
BatchSource synthetic_source(const TrainConfig& cfg);

/// Fixed held-out scenes, independent of the training stream.
std::vector<StereoSample> validation_set(const SyntheticConfig& cfg, int count, std::uint64_t seed);

struct TrainRecord {
  std::int64_t step;
  double lr, loss, grad_norm;
  double val_epe;  // NaN when not validated at this step
};

struct TrainSummary {
  std::vector<TrainRecord> log;
  double final_val_epe = 0;
};

/// Runs the optimisation loop. Aborts with NumericError on a non-finite loss.
TrainSummary train(StereoModel<float>& model, const TrainConfig& cfg, const BatchSource& source,
                   const std::vector<StereoSample>& validation);

/// Per-scene metrics with `iterations` updates, computed in eval mode; the
/// model's previous mode is restored afterwards.
std::vector<MetricsReport> evaluate_samples(StereoModel<float>& model, const std::vector<StereoSample>& samples,
                                            int iterations);

/// Pixel-pooled EPE over the validation scenes with `iterations` updates.
double validation_epe(StereoModel<float>& model, const std::vector<StereoSample>& samples, int iterations);

}  // namespace rstereo
