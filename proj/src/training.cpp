#include "rstereo/training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>

#include "rstereo/io.hpp"

namespace rstereo {

using nlohmann::json;

std::vector<double> sequence_weights(int n, double gamma) {
  if (n < 1) throw ContractError("sequence_loss: need at least one prediction");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ContractError("sequence_loss: gamma must lie in (0, 1]");
  std::vector<double> w(static_cast<std::size_t>(n));
  w.back() = 1.0;
  for (int i = n - 2; i >= 0; --i) w[i] = w[i + 1] * gamma;
  return w;
}

template <typename T>
BasicTensor<T> sequence_loss(const std::vector<BasicTensor<T>>& predictions, const BasicTensor<T>& gt,
                             const BasicTensor<T>& mask, T gamma) {
  const auto w = sequence_weights(static_cast<int>(predictions.size()), static_cast<double>(gamma));
  BasicTensor<T> total;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    auto term = scale(masked_l1_mean(predictions[i], gt, mask), static_cast<T>(w[i]));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

template Tensor sequence_loss(const std::vector<Tensor>&, const Tensor&, const Tensor&, float);
template TensorD sequence_loss(const std::vector<TensorD>&, const TensorD&, const TensorD&, double);

// ---------------------------------------------------------------------------
// Optimisation

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg)
    : params_(std::move(params)), step_count_(Tensor::zeros(Shape{1})), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros(p.shape()));
    v_.push_back(Tensor::zeros(p.shape()));
  }
}

std::int64_t AdamW::steps() const { return static_cast<std::int64_t>(step_count_[0]); }

void AdamW::step(float lr) {
  const std::int64_t t = steps() + 1;
  step_count_.mutable_data()[0] = static_cast<float>(t);
  const double c1 = 1.0 - std::pow(double(cfg_.beta1), double(t));
  const double c2 = 1.0 - std::pow(double(cfg_.beta2), double(t));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto m = m_[k].mutable_data();
    auto v = v_[k].mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g[i] * g[i];
      const double mh = m[i] / c1, vh = v[i] / c2;
      w[i] -= static_cast<float>(lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * w[i]));
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void AdamW::visit(const TensorVisitor<float>& v) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    v("optimizer.m." + std::to_string(k), m_[k], true);
    v("optimizer.v." + std::to_string(k), v_[k], true);
  }
  v("optimizer.steps", step_count_, true);
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    for (float g : p.grad()) sq += double(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm) {
    const auto f = static_cast<float>(max_norm / (norm + 1e-6));
    for (const auto& p : params) {
      for (auto& g : p.node()->grad) g *= f;
    }
  }
  return norm;
}

void OneCycleConfig::validate() const {
  if (!(peak > 0) || !(floor >= 0) || floor > peak) throw ContractError("one_cycle: need 0 <= floor <= peak");
  if (!(div_factor >= 1)) throw ContractError("one_cycle: div_factor must be >= 1");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw ContractError("one_cycle: warmup_fraction in [0, 1)");
}

double one_cycle_lr(std::int64_t step, std::int64_t total_steps, const OneCycleConfig& cfg) {
  cfg.validate();
  if (step < 0 || step >= total_steps) {
    throw ContractError("one_cycle: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) +
                        ")");
  }
  const double start = cfg.peak / cfg.div_factor;
  const std::int64_t warm =
      std::max<std::int64_t>(1, std::llround(cfg.warmup_fraction * static_cast<double>(total_steps)));
  if (step < warm) {
    return start + (cfg.peak - start) * static_cast<double>(step) / static_cast<double>(warm);
  }
  const std::int64_t span = total_steps - 1 - warm;
  if (span <= 0) return cfg.peak;
  const double t = static_cast<double>(step - warm) / static_cast<double>(span);
  return cfg.peak + (cfg.floor - cfg.peak) * t;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

SceneKind parse_scene(const std::string& name) {
  if (name == "constant") return SceneKind::kConstant;
  if (name == "layers") return SceneKind::kLayers;
  if (name == "slanted") return SceneKind::kSlanted;
  throw ContractError("unknown scene kind '" + name + "'");
}

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Smooth multi-octave value noise, continuous in x so any real column can be
// sampled exactly.
class Texture {
 public:
  Texture(std::mt19937_64& rng, Index height, double x_lo, double x_hi) : x_lo_(x_lo) {
    for (int c = 0; c < 3; ++c) base_[c] = uniform(rng, 0.25, 0.75);
    for (std::size_t o = 0; o < kPeriods.size(); ++o) {
      Octave oct;
      oct.period = kPeriods[o];
      oct.rows = static_cast<Index>(std::ceil(double(height) / oct.period)) + 2;
      oct.cols = static_cast<Index>(std::ceil((x_hi - x_lo) / oct.period)) + 2;
      oct.values.resize(static_cast<std::size_t>(3 * oct.rows * oct.cols));
      for (auto& v : oct.values) v = uniform(rng, -kAmplitudes[o], kAmplitudes[o]);
      octaves_.push_back(std::move(oct));
    }
  }

  float operator()(int c, Index y, double x) const {
    double value = base_[c];
    for (const auto& o : octaves_) {
      const double u = (x - x_lo_) / o.period, v = double(y) / o.period;
      const auto i0 = static_cast<Index>(std::floor(u)), r0 = static_cast<Index>(std::floor(v));
      const double tu = smooth(u - double(i0)), tv = smooth(v - double(r0));
      const Index ic = std::clamp<Index>(i0, 0, o.cols - 2), rc = std::clamp<Index>(r0, 0, o.rows - 2);
      const double* g = o.values.data() + c * o.rows * o.cols;
      const double top = (1 - tu) * g[rc * o.cols + ic] + tu * g[rc * o.cols + ic + 1];
      const double bot = (1 - tu) * g[(rc + 1) * o.cols + ic] + tu * g[(rc + 1) * o.cols + ic + 1];
      value += (1 - tv) * top + tv * bot;
    }
    return static_cast<float>(std::clamp(value, 0.0, 1.0));
  }

 private:
  static double smooth(double t) { return t * t * (3 - 2 * t); }

  static constexpr std::array<double, 4> kPeriods{16, 8, 4, 2};
  static constexpr std::array<double, 4> kAmplitudes{0.22, 0.16, 0.11, 0.07};

  struct Octave {
    double period;
    Index rows, cols;
    std::vector<double> values;
  };
  double x_lo_;
  double base_[3];
  std::vector<Octave> octaves_;
};

// Fronto-parallel surface patch at constant disparity, occupying
// [x0, x1) x [y0, y1) in left-image coordinates.
struct Layer {
  double disparity;
  double x0, x1;
  Index y0, y1;
  Texture texture;

  bool covers(Index y, double x) const { return y >= y0 && y < y1 && x >= x0 && x < x1; }
};

StereoSample empty_sample(Index h, Index w) {
  return {Tensor::zeros(Shape{3, h, w}), Tensor::zeros(Shape{3, h, w}), Tensor::zeros(Shape{1, h, w}),
          Tensor::zeros(Shape{1, h, w})};
}

StereoSample render_layers(std::mt19937_64& rng, const SyntheticConfig& cfg, bool rectangles) {
  const Index h = cfg.height, w = cfg.width;
  const double x_lo = -2, x_hi = double(w) + cfg.max_disp + 2;
  const double background =
      !rectangles && cfg.fixed_disparity >= 0 ? cfg.fixed_disparity
                                              : uniform(rng, 0, rectangles ? 0.6 * cfg.max_disp : cfg.max_disp);
  std::vector<Layer> layers;
  layers.push_back({background, x_lo, x_hi, 0, h, Texture(rng, h, x_lo, x_hi)});
  if (rectangles) {
    const int count = std::uniform_int_distribution<int>(1, 4)(rng);
    for (int n = 0; n < count; ++n) {
      const double rw = uniform(rng, double(w) / 8, double(w) / 3);
      const double x0 = uniform(rng, 0, double(w) - rw / 2);
      const Index rh = std::uniform_int_distribution<Index>(std::max<Index>(2, h / 6), std::max<Index>(2, h / 2))(rng);
      const Index y0 = std::uniform_int_distribution<Index>(0, std::max<Index>(0, h - rh / 2))(rng);
      const double d = uniform(rng, std::min(background + 1, cfg.max_disp), cfg.max_disp);
      layers.push_back({d, x0, x0 + rw, y0, std::min(h, y0 + rh), Texture(rng, h, x_lo, x_hi)});
    }
    // Nearest first; the background is farthest by construction.
    std::stable_sort(layers.begin(), layers.end(),
                     [](const Layer& a, const Layer& b) { return a.disparity > b.disparity; });
  }

  auto front_left = [&](Index y, double x) -> std::size_t {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].covers(y, x)) return l;
    }
    return layers.size() - 1;
  };
  auto front_right = [&](Index y, double x) -> std::size_t {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].covers(y, x + layers[l].disparity)) return l;
    }
    return layers.size() - 1;
  };

  auto s = empty_sample(h, w);
  auto left = s.left.mutable_data(), right = s.right.mutable_data();
  auto disp = s.disparity.mutable_data(), mask = s.mask.mutable_data();
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const std::size_t lf = front_left(y, double(x));
      const std::size_t rf = front_right(y, double(x));
      const Layer& a = layers[lf];
      const Layer& b = layers[rf];
      for (int c = 0; c < 3; ++c) {
        left[(c * h + y) * w + x] = a.texture(c, y, double(x));
        right[(c * h + y) * w + x] = b.texture(c, y, double(x) + b.disparity);
      }
      const double match = double(x) - a.disparity;
      disp[y * w + x] = static_cast<float>(a.disparity);
      mask[y * w + x] = match >= 0 && front_right(y, match) == lf ? 1.f : 0.f;
    }
  }
  return s;
}

StereoSample render_slanted(std::mt19937_64& rng, const SyntheticConfig& cfg) {
  const Index h = cfg.height, w = cfg.width;
  double bx = uniform(rng, -0.08, 0.08), by = uniform(rng, -0.08, 0.08);
  const double span = std::abs(bx) * double(w - 1) + std::abs(by) * double(h - 1);
  if (span > cfg.max_disp) {
    bx *= cfg.max_disp / span;
    by *= cfg.max_disp / span;
  }
  const double low = std::min(0.0, bx * double(w - 1)) + std::min(0.0, by * double(h - 1));
  const double a = -low + uniform(rng, 0, cfg.max_disp - std::min(span, cfg.max_disp));
  const double x_lo = -2, x_hi = (double(w) + cfg.max_disp + 2) / (1 - std::abs(bx));
  Texture tex(rng, h, x_lo, x_hi);

  auto s = empty_sample(h, w);
  auto left = s.left.mutable_data(), right = s.right.mutable_data();
  auto disp = s.disparity.mutable_data(), mask = s.mask.mutable_data();
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const double d = a + bx * double(x) + by * double(y);
      // Surface point seen by right column x: solve j - d(j) = x.
      const double j = (double(x) + a + by * double(y)) / (1 - bx);
      for (int c = 0; c < 3; ++c) {
        left[(c * h + y) * w + x] = tex(c, y, double(x));
        right[(c * h + y) * w + x] = tex(c, y, j);
      }
      disp[y * w + x] = static_cast<float>(d);
      mask[y * w + x] = double(x) - d >= 0 ? 1.f : 0.f;
    }
  }
  return s;
}

}  // namespace

StereoSample generate_synthetic(std::mt19937_64& rng, const SyntheticConfig& cfg) {
  if (cfg.height < 1 || cfg.width < 2) throw ContractError("synthetic: empty image");
  if (!(cfg.max_disp >= 0) || cfg.max_disp >= double(cfg.width) / 2) {
    throw ContractError("synthetic: max_disp must lie in [0, width/2)");
  }
  if (cfg.kinds.empty()) throw ContractError("synthetic: no scene kinds");
  if (cfg.fixed_disparity > cfg.max_disp) throw ContractError("synthetic: fixed_disparity exceeds max_disp");
  const auto pick = std::uniform_int_distribution<std::size_t>(0, cfg.kinds.size() - 1)(rng);
  switch (cfg.kinds[pick]) {
    case SceneKind::kConstant:
      return render_layers(rng, cfg, false);
    case SceneKind::kLayers:
      return render_layers(rng, cfg, true);
    case SceneKind::kSlanted:
      return render_slanted(rng, cfg);
  }
  return render_layers(rng, cfg, false);
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {

Tensor stretch_linear(const Tensor& t, double sigma, Index new_w) {
  const Index c = t.dim(0), h = t.dim(1), w = t.dim(2);
  auto out = Tensor::zeros(Shape{c, h, new_w});
  auto dst = out.mutable_data();
  const auto src = t.data();
  for (Index x = 0; x < new_w; ++x) {
    const double sx = std::clamp((double(x) + 0.5) / sigma - 0.5, 0.0, double(w - 1));
    const auto x0 = static_cast<Index>(std::floor(sx));
    const Index x1 = std::min(x0 + 1, w - 1);
    const auto f = static_cast<float>(sx - double(x0));
    for (Index r = 0; r < c * h; ++r) {
      dst[r * new_w + x] = (1 - f) * src[r * w + x0] + f * src[r * w + x1];
    }
  }
  return out;
}

Tensor stretch_nearest(const Tensor& t, double sigma, Index new_w, float value_scale) {
  const Index c = t.dim(0), h = t.dim(1), w = t.dim(2);
  auto out = Tensor::zeros(Shape{c, h, new_w});
  auto dst = out.mutable_data();
  const auto src = t.data();
  for (Index x = 0; x < new_w; ++x) {
    const auto sx = std::clamp<Index>(std::llround((double(x) + 0.5) / sigma - 0.5), 0, w - 1);
    for (Index r = 0; r < c * h; ++r) dst[r * new_w + x] = src[r * w + sx] * value_scale;
  }
  return out;
}

Tensor shift_rows(const Tensor& t, double shift) {
  const Index c = t.dim(0), h = t.dim(1), w = t.dim(2);
  auto out = Tensor::zeros(t.shape());
  auto dst = out.mutable_data();
  const auto src = t.data();
  for (Index y = 0; y < h; ++y) {
    const double sy = std::clamp(double(y) + shift, 0.0, double(h - 1));
    const auto y0 = static_cast<Index>(std::floor(sy));
    const Index y1 = std::min(y0 + 1, h - 1);
    const auto f = static_cast<float>(sy - double(y0));
    for (Index ch = 0; ch < c; ++ch) {
      for (Index x = 0; x < w; ++x) {
        dst[(ch * h + y) * w + x] = (1 - f) * src[(ch * h + y0) * w + x] + f * src[(ch * h + y1) * w + x];
      }
    }
  }
  return out;
}

Tensor crop_window(const Tensor& t, Index top, Index left, Index ch, Index cw) {
  const Index c = t.dim(0), h = t.dim(1), w = t.dim(2);
  auto out = Tensor::zeros(Shape{c, ch, cw});
  auto dst = out.mutable_data();
  const auto src = t.data();
  for (Index k = 0; k < c; ++k) {
    for (Index y = 0; y < ch; ++y) {
      std::copy_n(src.begin() + ((k * h + top + y) * w + left), cw, dst.begin() + (k * ch + y) * cw);
    }
  }
  return out;
}

void saturate(Tensor& img, float s) {
  if (s == 1.f) return;
  auto d = img.mutable_data();
  const Index plane = img.dim(1) * img.dim(2);
  for (Index i = 0; i < plane; ++i) {
    const float r = d[i], g = d[plane + i], b = d[2 * plane + i];
    const float grey = 0.299f * r + 0.587f * g + 0.114f * b;
    for (int c = 0; c < 3; ++c) d[c * plane + i] = std::clamp(grey + s * (d[c * plane + i] - grey), 0.f, 1.f);
  }
}

}  // namespace

StereoSample augment(const StereoSample& sample, const AugmentConfig& cfg, std::mt19937_64& rng) {
  if (cfg.saturation_min < 0 || cfg.saturation_min > cfg.saturation_max) {
    throw ContractError("augment: bad saturation range");
  }
  if (!(cfg.stretch_min > 0) || cfg.stretch_min > cfg.stretch_max) throw ContractError("augment: bad stretch range");
  if (cfg.vertical_shift < 0) throw ContractError("augment: vertical_shift must be >= 0");

  const float sat = static_cast<float>(uniform(rng, cfg.saturation_min, cfg.saturation_max));
  const double sigma = std::exp2(uniform(rng, std::log2(double(cfg.stretch_min)), std::log2(double(cfg.stretch_max))));
  const double shift = cfg.vertical_shift > 0 ? uniform(rng, -cfg.vertical_shift, cfg.vertical_shift) : 0.0;

  const Index h = sample.left.dim(1);
  const Index new_w = std::max<Index>(1, std::llround(double(sample.left.dim(2)) * sigma));
  const Index ch = cfg.crop_height > 0 ? cfg.crop_height : h;
  const Index cw = cfg.crop_width > 0 ? cfg.crop_width : new_w;
  if (ch > h || cw > new_w) {
    throw ContractError("augment: crop " + std::to_string(ch) + "x" + std::to_string(cw) + " larger than image " +
                        std::to_string(h) + "x" + std::to_string(new_w));
  }

  StereoSample out;
  out.left = Tensor::from(sample.left.shape(), sample.left.data());
  out.right = Tensor::from(sample.right.shape(), sample.right.data());
  saturate(out.left, sat);
  saturate(out.right, sat);
  out.left = stretch_linear(out.left, sigma, new_w);
  out.right = stretch_linear(out.right, sigma, new_w);
  out.disparity = stretch_nearest(sample.disparity, sigma, new_w, static_cast<float>(sigma));
  out.mask = stretch_nearest(sample.mask, sigma, new_w, 1.f);
  if (shift != 0.0) out.right = shift_rows(out.right, shift);

  const Index top = std::uniform_int_distribution<Index>(0, h - ch)(rng);
  const Index left = std::uniform_int_distribution<Index>(0, new_w - cw)(rng);
  out.left = crop_window(out.left, top, left, ch, cw);
  out.right = crop_window(out.right, top, left, ch, cw);
  out.disparity = crop_window(out.disparity, top, left, ch, cw);
  out.mask = crop_window(out.mask, top, left, ch, cw);
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw ContractError("train config: " + message);
}

template <typename V>
void read(const json& obj, const char* key, V& out) {
  if (obj.contains(key)) out = obj.at(key).get<V>();
}

void reject_unknown(const json& obj, std::initializer_list<const char*> keys, const std::string& where) {
  require(obj.is_object(), where + " must be an object");
  for (const auto& [k, v] : obj.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    require(known, "unknown key '" + k + "' in " + where);
  }
}

}  // namespace

void TrainConfig::validate() const {
  require(steps > 0, "steps must be positive");
  require(batch > 0, "batch must be positive");
  require(iterations >= 1, "iterations must be >= 1");
  require(gamma > 0 && gamma <= 1, "gamma must lie in (0, 1]");
  require(clip > 0, "clip must be positive");
  require(validate_every >= 0 && checkpoint_every >= 0, "intervals must be >= 0");
  require(validation_samples >= 1 && validation_iterations >= 1, "validation needs samples and iterations");
  lr.validate();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("train config: ") + e.what(), e.byte > 0 ? e.byte - 1 : 0);
  }
  TrainConfig c;
  try {
    reject_unknown(j,
                   {"steps", "batch", "iterations", "gamma", "clip", "lr", "optimizer", "data", "augment", "use_augment",
                    "validate_every", "validation_samples", "validation_iterations", "checkpoint_every",
                    "checkpoint_path", "log_path", "seed"},
                   "train config");
    read(j, "steps", c.steps);
    read(j, "batch", c.batch);
    read(j, "iterations", c.iterations);
    read(j, "gamma", c.gamma);
    read(j, "clip", c.clip);
    read(j, "use_augment", c.use_augment);
    read(j, "validate_every", c.validate_every);
    read(j, "validation_samples", c.validation_samples);
    read(j, "validation_iterations", c.validation_iterations);
    read(j, "checkpoint_every", c.checkpoint_every);
    read(j, "checkpoint_path", c.checkpoint_path);
    read(j, "log_path", c.log_path);
    read(j, "seed", c.seed);
    if (j.contains("lr")) {
      const auto& l = j.at("lr");
      reject_unknown(l, {"peak", "floor", "div_factor", "warmup_fraction"}, "lr");
      read(l, "peak", c.lr.peak);
      read(l, "floor", c.lr.floor);
      read(l, "div_factor", c.lr.div_factor);
      read(l, "warmup_fraction", c.lr.warmup_fraction);
    }
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      reject_unknown(o, {"beta1", "beta2", "eps", "weight_decay"}, "optimizer");
      read(o, "beta1", c.optimizer.beta1);
      read(o, "beta2", c.optimizer.beta2);
      read(o, "eps", c.optimizer.eps);
      read(o, "weight_decay", c.optimizer.weight_decay);
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      reject_unknown(d, {"height", "width", "max_disp", "kinds", "fixed_disparity"}, "data");
      read(d, "height", c.data.height);
      read(d, "width", c.data.width);
      read(d, "max_disp", c.data.max_disp);
      read(d, "fixed_disparity", c.data.fixed_disparity);
      if (d.contains("kinds")) {
        c.data.kinds.clear();
        for (const auto& k : d.at("kinds")) c.data.kinds.push_back(parse_scene(k.get<std::string>()));
      }
    }
    if (j.contains("augment")) {
      const auto& a = j.at("augment");
      reject_unknown(a,
                     {"saturation_min", "saturation_max", "stretch_min", "stretch_max", "vertical_shift",
                      "crop_height", "crop_width"},
                     "augment");
      read(a, "saturation_min", c.augment.saturation_min);
      read(a, "saturation_max", c.augment.saturation_max);
      read(a, "stretch_min", c.augment.stretch_min);
      read(a, "stretch_max", c.augment.stretch_max);
      read(a, "vertical_shift", c.augment.vertical_shift);
      read(a, "crop_height", c.augment.crop_height);
      read(a, "crop_width", c.augment.crop_width);
    }
  } catch (const json::exception& e) {
    throw ContractError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Loop

BatchSource synthetic_source(const TrainConfig& cfg) {
  return [cfg](std::int64_t, std::mt19937_64& rng) {
    std::vector<StereoSample> batch;
    for (Index b = 0; b < cfg.batch; ++b) {
      auto s = generate_synthetic(rng, cfg.data);
      batch.push_back(cfg.use_augment ? augment(s, cfg.augment, rng) : std::move(s));
    }
    return batch;
  };
}

std::vector<StereoSample> validation_set(const SyntheticConfig& cfg, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<StereoSample> out;
  for (int i = 0; i < count; ++i) out.push_back(generate_synthetic(rng, cfg));
  return out;
}

namespace {

Tensor stack(const std::vector<StereoSample>& batch, Tensor StereoSample::*field) {
  const Shape& first = (batch.front().*field).shape();
  std::vector<Index> dims{static_cast<Index>(batch.size())};
  dims.insert(dims.end(), first.dims().begin(), first.dims().end());
  auto out = Tensor::zeros(Shape(dims));
  auto dst = out.mutable_data();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& t = batch[b].*field;
    if (t.shape() != first) throw DimensionError("train: batch samples differ in shape");
    std::copy(t.data().begin(), t.data().end(), dst.begin() + static_cast<std::ptrdiff_t>(b) * first.numel());
  }
  return out;
}

}  // namespace

std::vector<MetricsReport> evaluate_samples(StereoModel<float>& model, const std::vector<StereoSample>& samples,
                                            int iterations) {
  const bool was_training = model.training();
  model.set_training(false);
  std::vector<MetricsReport> out;
  RolloutOptions<float> opts;
  opts.iterations = iterations;
  for (const auto& s : samples) {
    auto r = run_inference(model, ImagePair<float>{s.left, s.right}, opts);
    out.push_back(compute_metrics(r.disparity, s.disparity, s.mask));
  }
  model.set_training(was_training);
  return out;
}

double validation_epe(StereoModel<float>& model, const std::vector<StereoSample>& samples, int iterations) {
  return merge(evaluate_samples(model, samples, iterations)).epe;
}

TrainSummary train(StereoModel<float>& model, const TrainConfig& cfg, const BatchSource& source,
                   const std::vector<StereoSample>& validation) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  auto params = model.parameters();
  AdamW opt(params, cfg.optimizer);
  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path, std::ios::trunc);
    if (!log) throw IoError("train: cannot open log " + cfg.log_path);
  }

  TrainSummary summary;
  model.set_training(true);
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const auto batch = source(step, rng);
    if (batch.empty()) throw ContractError("train: empty batch");
    const auto left = stack(batch, &StereoSample::left), right = stack(batch, &StereoSample::right);
    const auto gt = stack(batch, &StereoSample::disparity), mask = stack(batch, &StereoSample::mask);

    RolloutOptions<float> opts;
    opts.iterations = cfg.iterations;
    opts.keep_sequence = true;
    const double lr = one_cycle_lr(step, cfg.steps, cfg.lr);
    TrainRecord rec{step, lr, 0, 0, std::numeric_limits<double>::quiet_NaN()};
    {
      auto result = model.forward(left, right, opts);
      auto loss = sequence_loss(result.sequence, gt, mask, cfg.gamma);
      rec.loss = loss.item();
      if (!std::isfinite(rec.loss)) {
        throw NumericError("train: non-finite loss at step " + std::to_string(step) + " (lr " + std::to_string(lr) +
                           ")");
      }
      opt.zero_grad();
      loss.backward();
    }
    rec.grad_norm = clip_grad_norm(params, cfg.clip);
    if (!std::isfinite(rec.grad_norm)) {
      throw NumericError("train: non-finite gradient norm at step " + std::to_string(step));
    }
    opt.step(static_cast<float>(lr));
    opt.zero_grad();

    const bool last = step + 1 == cfg.steps;
    if (!validation.empty() && ((cfg.validate_every > 0 && (step + 1) % cfg.validate_every == 0) || last)) {
      rec.val_epe = validation_epe(model, validation, cfg.validation_iterations);
      summary.final_val_epe = rec.val_epe;
    }
    if (!cfg.checkpoint_path.empty() && ((cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) || last)) {
      save_checkpoint(cfg.checkpoint_path, model, &opt);
    }
    if (log) {
      json line{{"step", rec.step}, {"lr", rec.lr}, {"loss", rec.loss}, {"grad_norm", rec.grad_norm}};
      line["val_epe"] = std::isfinite(rec.val_epe) ? json(rec.val_epe) : json(nullptr);
      log << line.dump() << '\n' << std::flush;
    }
    summary.log.push_back(rec);
  }
  model.set_training(false);
  return summary;
}

}  // namespace rstereo
