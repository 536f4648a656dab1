#include "rstereo/model.hpp"

namespace rstereo {

template <typename T>
StereoModel<T>::StereoModel(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), seed_(seed), rng_(seed), encoders_(cfg, rng_), update_(cfg, rng_) {}

template <typename T>
RolloutResult<T> StereoModel<T>::forward(const BasicTensor<T>& left, const BasicTensor<T>& right,
                                         const RolloutOptions<T>& options) {
  if (left.rank() != 4) throw DimensionError("forward: expected [B,3,H,W] images, got " + left.shape().str());
  const IterationSchedule schedule =
      options.schedule ? *options.schedule : IterationSchedule::regular(cfg_.update.levels, options.iterations);
  if (schedule.levels() != cfg_.update.levels) {
    throw ContractError("forward: schedule has " + std::to_string(schedule.levels()) + " levels, model has " +
                        std::to_string(cfg_.update.levels));
  }

  auto enc = encoders_(left, right);
  const CorrelationSampler<T> sampler(enc.left, enc.right, cfg_.correlation);
  MultiLevelState<T> state;
  std::vector<BasicTensor<T>> context;
  for (auto& level : enc.context) {
    state.hidden.push_back(level.hidden);
    context.push_back(level.context);
  }
  state.bias = update_.gate_bias(context);
  enc.context.clear();
  context.clear();

  const Index b = enc.left.dim(0), h = enc.left.dim(2), w = enc.left.dim(3);
  BasicTensor<T> d = options.initial;
  if (!d.defined()) {
    d = BasicTensor<T>::zeros(Shape{b, 1, h, w});
  } else if (d.shape() != Shape{b, 1, h, w}) {
    throw DimensionError("forward: initial disparity " + d.shape().str() + " does not match features");
  }

  const int s = cfg_.encoder.downsample;
  RolloutResult<T> result;
  const auto& steps = schedule.steps();
  int remaining = schedule.finest_updates();
  for (const auto& step : steps) {
    if (!step[0]) {
      update_.step(state, step, BasicTensor<T>(), d, nullptr, nullptr);
      continue;
    }
    --remaining;
    const bool need_mask = options.keep_sequence || remaining == 0;
    const auto corr = sampler(d);
    BasicTensor<T> delta, mask;
    update_.step(state, step, corr, d, &delta, need_mask ? &mask : nullptr);
    d = add(d, delta);
    if (options.keep_sequence) result.coarse_sequence.push_back(d);
    if (need_mask) {
      auto up = convex_upsample(d, mask, s);
      if (options.keep_sequence) result.sequence.push_back(up);
      if (remaining == 0) result.disparity = up;
    }
  }
  result.coarse = d;
  return result;
}

template <typename T>
void StereoModel<T>::set_training(bool on) {
  training_ = on;
  encoders_.set_training(on);
}

template <typename T>
void StereoModel<T>::visit(const TensorVisitor<T>& v) {
  encoders_.visit(v);
  update_.visit(v);
}

template <typename T>
std::vector<BasicTensor<T>> StereoModel<T>::parameters() {
  std::vector<BasicTensor<T>> out;
  visit([&](const std::string&, BasicTensor<T>& t, bool buffer) {
    if (!buffer) out.push_back(t);
  });
  return out;
}

template <typename T>
Index StereoModel<T>::parameter_count() {
  Index n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

namespace {

template <typename T>
BasicTensor<T> batched(const BasicTensor<T>& x) {
  if (x.rank() == 4) return x;
  if (x.rank() == 3) return reshape(x, Shape{1, x.dim(0), x.dim(1), x.dim(2)});
  throw DimensionError("inference: expected [3,H,W] or [B,3,H,W], got " + x.shape().str());
}

template <typename T>
BasicTensor<T> restore(const BasicTensor<T>& x, bool was_batched) {
  return was_batched ? x : reshape(x, Shape{x.dim(1), x.dim(2), x.dim(3)});
}

}  // namespace

template <typename T>
RolloutResult<T> run_inference(StereoModel<T>& model, const ImagePair<T>& pair, const RolloutOptions<T>& options) {
  NoGradGuard guard;
  const bool was_batched = pair.left.rank() == 4;
  const Index multiple = std::max<Index>(32, model.config().divisor());
  auto [padded, record] = pad_input(ImagePair<T>{batched(pair.left), batched(pair.right)}, multiple);
  auto r = model.forward(padded.left, padded.right, options);
  r.disparity = restore(crop(r.disparity, record), was_batched);
  for (auto& up : r.sequence) up = restore(crop(up, record), was_batched);
  return r;
}

template class StereoModel<float>;
template class StereoModel<double>;
template RolloutResult<float> run_inference(StereoModel<float>&, const ImagePair<float>&,
                                            const RolloutOptions<float>&);
template RolloutResult<double> run_inference(StereoModel<double>&, const ImagePair<double>&,
                                             const RolloutOptions<double>&);

}  // namespace rstereo
