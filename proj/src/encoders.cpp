#include "rstereo/encoders.hpp"

#include "rstereo/flops.hpp"

namespace rstereo {

namespace {

template <typename T>
BasicTensor<T> as_batched(const BasicTensor<T>& x) {
  if (x.rank() == 4) return x;
  return reshape(x, Shape{1, x.dim(0), x.dim(1), x.dim(2)});
}

template <typename T>
BasicTensor<T> unbatch(const BasicTensor<T>& x) {
  return reshape(x, Shape{x.dim(1), x.dim(2), x.dim(3)});
}

// Replicate padding of [.., H, W] to [.., H+top+bottom, W+left+right].
template <typename T>
BasicTensor<T> replicate_pad(const BasicTensor<T>& x, const CropRecord& r) {
  const Shape& s = x.shape();
  const std::size_t n = s.rank();
  const Index h = s[n - 2], w = s[n - 1];
  const Index oh = h + r.top + r.bottom, ow = w + r.left + r.right;
  const Index planes = x.numel() / (h * w);
  std::vector<Index> dims = s.dims();
  dims[n - 2] = oh;
  dims[n - 1] = ow;
  Buffer<T> out(static_cast<std::size_t>(planes * oh * ow));
  const auto in = x.data();
  for (Index p = 0; p < planes; ++p) {
    for (Index y = 0; y < oh; ++y) {
      const Index sy = std::clamp<Index>(y - r.top, 0, h - 1);
      for (Index xx = 0; xx < ow; ++xx) {
        const Index sx = std::clamp<Index>(xx - r.left, 0, w - 1);
        out[static_cast<std::size_t>((p * oh + y) * ow + xx)] = in[static_cast<std::size_t>((p * h + sy) * w + sx)];
      }
    }
  }
  return BasicTensor<T>::from(Shape(dims), std::span<const T>(out.data(), out.size()));
}

}  // namespace

template <typename T>
std::pair<ImagePair<T>, CropRecord> pad_input(const ImagePair<T>& pair, Index multiple) {
  if (pair.left.shape() != pair.right.shape()) {
    throw DimensionError("pad_input: image shapes differ: " + pair.left.shape().str() + " vs " +
                         pair.right.shape().str());
  }
  if (pair.left.rank() < 2) throw DimensionError("pad_input: images need spatial axes");
  if (multiple < 1) throw ContractError("pad_input: multiple must be positive");
  const std::size_t n = pair.left.rank();
  const Index h = pair.left.dim(n - 2), w = pair.left.dim(n - 1);
  const Index ph = (multiple - h % multiple) % multiple, pw = (multiple - w % multiple) % multiple;
  CropRecord r{ph / 2, ph - ph / 2, pw / 2, pw - pw / 2};
  if (r.empty()) return {pair, r};
  return {ImagePair<T>{replicate_pad(pair.left, r), replicate_pad(pair.right, r)}, r};
}

template <typename T>
BasicTensor<T> crop(const BasicTensor<T>& field, const CropRecord& r) {
  if (r.empty()) return field;
  const std::size_t n = field.rank();
  if (n < 2) throw DimensionError("crop: field needs spatial axes");
  const Index h = field.dim(n - 2), w = field.dim(n - 1);
  if (r.top + r.bottom >= h || r.left + r.right >= w) {
    throw DimensionError("crop: record larger than field " + field.shape().str());
  }
  return narrow(narrow(field, n - 2, r.top, h - r.top - r.bottom), n - 1, r.left, w - r.left - r.right);
}

template <typename T>
Trunk<T>::Trunk(const EncoderConfig& cfg, NormKind norm, std::mt19937_64& rng)
    : stem(3, cfg.widths[0], 3, 2, rng) {
  const Index strides[3] = {1, 2, cfg.downsample == 8 ? 2 : 1};
  Index in = cfg.widths[0];
  for (int s = 0; s < 3; ++s) {
    std::vector<ResidualBlock<T>> blocks;
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      blocks.emplace_back(in, cfg.widths[s], b == 0 ? strides[s] : 1, norm, rng);
      in = cfg.widths[s];
    }
    stages.push_back(std::move(blocks));
  }
}

template <typename T>
BasicTensor<T> Trunk<T>::operator()(const BasicTensor<T>& x) {
  auto y = stem(add_scalar(scale(x, T(2)), T(-1)));
  for (auto& stage : stages) {
    for (auto& block : stage) y = block(y);
  }
  return y;
}

template <typename T>
void Trunk<T>::set_training(bool on) {
  for (auto& stage : stages) {
    for (auto& block : stage) block.set_training(on);
  }
}

template <typename T>
void Trunk<T>::visit(const std::string& prefix, const TensorVisitor<T>& v) {
  stem.visit(prefix + ".stem", v);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (std::size_t b = 0; b < stages[s].size(); ++b) {
      stages[s][b].visit(prefix + ".stage" + std::to_string(s) + "." + std::to_string(b), v);
    }
  }
}

template <typename T>
Encoders<T>::Encoders(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg.validate();
  const auto& e = cfg.encoder;
  const Index width = e.widths[2];
  const Index hid = cfg.update.hidden_dim;
  if (e.shared_backbone) {
    feature_trunk_ = Trunk<T>(e, e.context_norm, rng);
    shared_feature_block_ = ResidualBlock<T>(width, width, 1, NormKind::kInstance, rng);
  } else {
    feature_trunk_ = Trunk<T>(e, NormKind::kInstance, rng);
    context_trunk_ = Trunk<T>(e, e.context_norm, rng);
  }
  feature_norm_ = Norm<T>(NormKind::kInstance, width);
  feature_out_ = Conv2d<T>(width, e.feature_dim, 1, 1, rng);
  for (int l = 0; l < cfg.update.levels; ++l) {
    if (l > 0) context_down_.emplace_back(width, width, 2, e.context_norm, rng);
    context_norms_.emplace_back(e.context_norm, width);
    context_out_.emplace_back(width, 2 * hid, 3, 1, rng);
  }
}

template <typename T>
void Encoders<T>::check_input(const BasicTensor<T>& image) const {
  const Shape& s = image.shape();
  const bool ok = (s.rank() == 3 && s[0] == 3) || (s.rank() == 4 && s[1] == 3);
  if (!ok) throw DimensionError("encoder: expected [3,H,W] or [B,3,H,W], got " + s.str());
  const Index m = cfg_.divisor();
  if (s[s.rank() - 2] % m != 0 || s[s.rank() - 1] % m != 0) {
    throw DimensionError("encoder: input " + s.str() + " not divisible by " + std::to_string(m) +
                         "; pad the images first");
  }
}

template <typename T>
BasicTensor<T> Encoders<T>::feature_head(const BasicTensor<T>& trunk_out) {
  auto y = shared_feature_block_ ? (*shared_feature_block_)(trunk_out) : trunk_out;
  return feature_out_(relu(feature_norm_(y)));
}

template <typename T>
ContextBundle<T> Encoders<T>::context_heads(const BasicTensor<T>& trunk_out) {
  const Index hid = cfg_.update.hidden_dim;
  ContextBundle<T> bundle;
  auto y = trunk_out;
  for (int l = 0; l < cfg_.update.levels; ++l) {
    if (l > 0) y = context_down_[static_cast<std::size_t>(l - 1)](y);
    const auto out = context_out_[static_cast<std::size_t>(l)](relu(context_norms_[static_cast<std::size_t>(l)](y)));
    bundle.push_back({tanh(narrow(out, 1, 0, hid)), relu(narrow(out, 1, hid, hid))});
  }
  return bundle;
}

template <typename T>
BasicTensor<T> Encoders<T>::feature_encode(const BasicTensor<T>& image) {
  check_input(image);
  flops::Scope scope("encoder.feature");
  const auto out = feature_head(feature_trunk_(as_batched(image)));
  return image.rank() == 4 ? out : unbatch(out);
}

template <typename T>
ContextBundle<T> Encoders<T>::context_encode(const BasicTensor<T>& image) {
  check_input(image);
  flops::Scope scope("encoder.context");
  auto& trunk = cfg_.encoder.shared_backbone ? feature_trunk_ : context_trunk_;
  auto bundle = context_heads(trunk(as_batched(image)));
  if (image.rank() == 3) {
    for (auto& level : bundle) {
      level.hidden = unbatch(level.hidden);
      level.context = unbatch(level.context);
    }
  }
  return bundle;
}

template <typename T>
typename Encoders<T>::Output Encoders<T>::operator()(const BasicTensor<T>& left, const BasicTensor<T>& right) {
  if (left.shape() != right.shape()) {
    throw DimensionError("encoder: image shapes differ: " + left.shape().str() + " vs " + right.shape().str());
  }
  check_input(left);
  const auto l = as_batched(left), r = as_batched(right);
  const Index b = l.dim(0);
  Output out;
  if (cfg_.encoder.shared_backbone) {
    BasicTensor<T> trunk;
    {
      flops::Scope scope("encoder.trunk");
      trunk = feature_trunk_(concat<T>({l, r}, 0));
    }
    {
      flops::Scope scope("encoder.feature");
      const auto f = feature_head(trunk);
      out.left = narrow(f, 0, 0, b);
      out.right = narrow(f, 0, b, b);
    }
    flops::Scope scope("encoder.context");
    out.context = context_heads(narrow(trunk, 0, 0, b));
  } else {
    {
      flops::Scope scope("encoder.feature");
      const auto f = feature_head(feature_trunk_(concat<T>({l, r}, 0)));
      out.left = narrow(f, 0, 0, b);
      out.right = narrow(f, 0, b, b);
    }
    flops::Scope scope("encoder.context");
    out.context = context_heads(context_trunk_(l));
  }
  return out;
}

template <typename T>
void Encoders<T>::set_training(bool on) {
  feature_trunk_.set_training(on);
  if (!cfg_.encoder.shared_backbone) context_trunk_.set_training(on);
  if (shared_feature_block_) shared_feature_block_->set_training(on);
  for (auto& b : context_down_) b.set_training(on);
  for (auto& n : context_norms_) n.training = on;
}

template <typename T>
void Encoders<T>::visit(const TensorVisitor<T>& v) {
  const bool shared = cfg_.encoder.shared_backbone;
  feature_trunk_.visit(shared ? "backbone" : "fnet", v);
  if (shared) {
    shared_feature_block_->visit("fnet.block", v);
  } else {
    context_trunk_.visit("cnet", v);
  }
  feature_norm_.visit("fnet.norm", v);
  feature_out_.visit("fnet.out", v);
  for (std::size_t l = 0; l < context_out_.size(); ++l) {
    const std::string p = "cnet.level" + std::to_string(l);
    if (l > 0) context_down_[l - 1].visit(p + ".down", v);
    context_norms_[l].visit(p + ".norm", v);
    context_out_[l].visit(p + ".out", v);
  }
}

#define RSTEREO_INSTANTIATE(T)                                                                         \
  template std::pair<ImagePair<T>, CropRecord> pad_input(const ImagePair<T>&, Index);                \
  template BasicTensor<T> crop(const BasicTensor<T>&, const CropRecord&);                            \
  template struct Trunk<T>;                                                                          \
  template class Encoders<T>;
RSTEREO_INSTANTIATE(float)
RSTEREO_INSTANTIATE(double)
#undef RSTEREO_INSTANTIATE

}  // namespace rstereo
