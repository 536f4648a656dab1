#include "rstereo/update.hpp"

#include <algorithm>
#include <cmath>

#include "rstereo/flops.hpp"

namespace rstereo {

using detail::make_result;
using detail::Node;

template <typename T>
ConvGRU<T>::ConvGRU(Index hidden, Index input, std::mt19937_64& rng)
    : convz(hidden + input, hidden, 3, 1, rng),
      convr(hidden + input, hidden, 3, 1, rng),
      convq(hidden + input, hidden, 3, 1, rng) {}

template <typename T>
BasicTensor<T> ConvGRU<T>::operator()(const BasicTensor<T>& h, const BasicTensor<T>& x, const GateBias<T>* bias) {
  const std::size_t axis = h.rank() - 3;
  if (h.dim(axis) != hidden_dim()) {
    throw DimensionError("gru: hidden " + h.shape().str() + " does not have " + std::to_string(hidden_dim()) +
                         " channels");
  }
  const auto hx = concat<T>({h, x}, axis);
  auto zp = convz(hx), rp = convr(hx);
  if (bias) {
    zp = add(zp, bias->z);
    rp = add(rp, bias->r);
  }
  const auto z = sigmoid(zp);
  const auto r = sigmoid(rp);
  auto qp = convq(concat<T>({mul(r, h), x}, axis));
  if (bias) qp = add(qp, bias->q);
  return gate_blend(h, z, tanh(qp));
}

template <typename T>
void ConvGRU<T>::visit(const std::string& prefix, const TensorVisitor<T>& v) {
  convz.visit(prefix + ".convz", v);
  convr.visit(prefix + ".convr", v);
  convq.visit(prefix + ".convq", v);
}

template <typename T>
MotionEncoder<T>::MotionEncoder(Index corr_channels, const UpdateConfig& cfg, std::mt19937_64& rng)
    : corr1(corr_channels, cfg.corr_dim, 1, 1, rng),
      corr2(cfg.corr_dim, cfg.corr_dim, 3, 1, rng),
      disp1(1, cfg.disp_dim, 7, 1, rng),
      disp2(cfg.disp_dim, cfg.disp_dim, 3, 1, rng),
      merge(cfg.corr_dim + cfg.disp_dim, cfg.motion_dim - 1, 3, 1, rng) {}

template <typename T>
BasicTensor<T> MotionEncoder<T>::operator()(const BasicTensor<T>& corr, const BasicTensor<T>& disparity) {
  const auto c = relu(corr2(relu(corr1(corr))));
  const auto d = relu(disp2(relu(disp1(disparity))));
  return concat<T>({relu(merge(concat<T>({c, d}, 1))), disparity}, 1);
}

template <typename T>
void MotionEncoder<T>::visit(const std::string& prefix, const TensorVisitor<T>& v) {
  corr1.visit(prefix + ".corr1", v);
  corr2.visit(prefix + ".corr2", v);
  disp1.visit(prefix + ".disp1", v);
  disp2.visit(prefix + ".disp2", v);
  merge.visit(prefix + ".merge", v);
}

template <typename T>
Head<T>::Head(Index in, Index mid, Index out, Index kernel2, T scale_, std::mt19937_64& rng)
    : conv1(in, mid, 3, 1, rng), conv2(mid, out, kernel2, 1, rng), output_scale(scale_) {}

template <typename T>
BasicTensor<T> Head<T>::operator()(const BasicTensor<T>& h) {
  auto y = conv2(relu(conv1(h)));
  return output_scale == T(1) ? y : scale(y, output_scale);
}

template <typename T>
void Head<T>::visit(const std::string& prefix, const TensorVisitor<T>& v) {
  conv1.visit(prefix + ".conv1", v);
  conv2.visit(prefix + ".conv2", v);
}

template <typename T>
BasicTensor<T> convex_upsample(const BasicTensor<T>& disparity, const BasicTensor<T>& mask, int factor) {
  const Shape& ds = disparity.shape();
  const bool batched = ds.rank() == 4;
  if (!((batched && ds[1] == 1) || (ds.rank() == 3 && ds[0] == 1))) {
    throw DimensionError("convex_upsample: disparity must be [1,h,w] or [B,1,h,w], got " + ds.str());
  }
  if (factor < 1) throw ContractError("convex_upsample: factor must be positive");
  const Index s = factor, s2 = s * s;
  const Index batch = batched ? ds[0] : 1, h = ds[ds.rank() - 2], w = ds[ds.rank() - 1];
  const Shape expect = batched ? Shape{batch, 9 * s2, h, w} : Shape{9 * s2, h, w};
  if (mask.shape() != expect) {
    throw DimensionError("convex_upsample: mask " + mask.shape().str() + " expected " + expect.str());
  }
  const Index oh = h * s, ow = w * s, plane = h * w;
  Buffer<T> out(static_cast<std::size_t>(batch * oh * ow));
  const T* dv = disparity.data().data();
  const T* mv = mask.data().data();

  // Visits each fine pixel with its neighbour offsets and softmax weights.
  auto for_each = [=](auto&& fn) {
    Index nb[9];
    T wts[9];
    for (Index b = 0; b < batch; ++b) {
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          for (int n = 0; n < 9; ++n) {
            const Index yy = std::clamp<Index>(y + n / 3 - 1, 0, h - 1);
            const Index xx = std::clamp<Index>(x + n % 3 - 1, 0, w - 1);
            nb[n] = b * plane + yy * w + xx;
          }
          for (Index a = 0; a < s; ++a) {
            for (Index c = 0; c < s; ++c) {
              const T* logit = mv + (b * 9 * s2 + a * s + c) * plane + y * w + x;
              T mx = logit[0];
              for (int n = 1; n < 9; ++n) mx = std::max(mx, logit[n * s2 * plane]);
              T total = T(0);
              for (int n = 0; n < 9; ++n) total += wts[n] = std::exp(logit[n * s2 * plane] - mx);
              for (int n = 0; n < 9; ++n) wts[n] /= total;
              const Index o = (b * oh + y * s + a) * ow + x * s + c;
              const Index logit0 = (b * 9 * s2 + a * s + c) * plane + y * w + x;
              fn(o, nb, wts, logit0);
            }
          }
        }
      }
    }
  };
  const T sf = static_cast<T>(s);
  for_each([&](Index o, const Index* nb, const T* wts, Index) {
    T acc = T(0);
    for (int n = 0; n < 9; ++n) acc += wts[n] * sf * dv[nb[n]];
    out[static_cast<std::size_t>(o)] = acc;
  });
  const Shape out_shape = batched ? Shape{batch, 1, oh, ow} : Shape{1, oh, ow};
  return make_result<T>(out_shape, std::move(out), {disparity, mask}, "convex_upsample",
                        [for_each, s2, plane, sf](Node<T>& self) {
                          auto& d = *self.inputs[0];
                          auto& m = *self.inputs[1];
                          T* gd = d.requires_grad ? d.grad_ptr() : nullptr;
                          T* gm = m.requires_grad ? m.grad_ptr() : nullptr;
                          const T* go = self.grad.data();
                          const T* fwd = self.data.data();
                          const T* dv = d.data.data();
                          for_each([&](Index o, const Index* nb, const T* wts, Index logit0) {
                            const T g = go[o];
                            for (int n = 0; n < 9; ++n) {
                              if (gd) gd[nb[n]] += g * wts[n] * sf;
                              if (gm) gm[logit0 + n * s2 * plane] += g * wts[n] * (sf * dv[nb[n]] - fwd[o]);
                            }
                          });
                        });
}

IterationSchedule IterationSchedule::regular(int levels, int iterations) {
  if (levels < 1) throw ContractError("schedule: need at least one level");
  if (iterations < 1) throw ContractError("schedule: need at least one iteration");
  return slow_fast(std::vector<int>(static_cast<std::size_t>(levels), iterations));
}

IterationSchedule IterationSchedule::slow_fast(const std::vector<int>& counts) {
  if (counts.empty()) throw ContractError("schedule: no levels");
  if (counts[0] < 1) throw ContractError("schedule: the finest level must update at least once");
  for (std::size_t l = 1; l < counts.size(); ++l) {
    if (counts[l] < counts[l - 1]) {
      throw ContractError("schedule: coarser levels must update at least as often as finer ones");
    }
  }
  IterationSchedule s;
  s.levels_ = static_cast<int>(counts.size());
  const long nf = counts[0];
  for (long t = 0; t < nf; ++t) {
    std::vector<long> per(counts.size());
    long sub = 0;
    for (std::size_t l = 0; l < counts.size(); ++l) {
      per[l] = ((t + 1) * counts[l]) / nf - (t * counts[l]) / nf;
      sub = std::max(sub, per[l]);
    }
    for (long i = 0; i < sub; ++i) {
      std::vector<bool> step(counts.size());
      for (std::size_t l = 0; l < counts.size(); ++l) step[l] = i >= sub - per[l];
      s.steps_.push_back(std::move(step));
    }
  }
  return s;
}

int IterationSchedule::count(int level) const {
  int n = 0;
  for (const auto& step : steps_) n += step[static_cast<std::size_t>(level)] ? 1 : 0;
  return n;
}

template <typename T>
MultiLevelUpdate<T>::MultiLevelUpdate(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg.validate();
  const auto& u = cfg.update;
  const Index hid = u.hidden_dim;
  const int levels = u.levels;
  for (int l = 0; l < levels; ++l) {
    context_convs_.emplace_back(hid, 3 * hid, 3, 1, rng);
    Index input = 0;
    if (l == 0) input = u.motion_dim;
    if (l > 0) input += hid;           // finer neighbour, downsampled
    if (l + 1 < levels) input += hid;  // coarser neighbour, upsampled
    grus_.emplace_back(hid, input, rng);
  }
  motion_ = MotionEncoder<T>(cfg.correlation.channels(), u, rng);
  const Index s = cfg.encoder.downsample;
  disp_head_ = Head<T>(hid, u.head_dim, 1, 3, T(1), rng);
  mask_head_ = Head<T>(hid, u.mask_dim, 9 * s * s, 1, T(0.25), rng);
}

template <typename T>
std::vector<GateBias<T>> MultiLevelUpdate<T>::gate_bias(const std::vector<BasicTensor<T>>& context) {
  if (context.size() != grus_.size()) throw DimensionError("update: context level count mismatch");
  flops::Scope scope("context.gates");
  const Index hid = cfg_.update.hidden_dim;
  std::vector<GateBias<T>> out;
  for (std::size_t l = 0; l < context.size(); ++l) {
    const auto c = context_convs_[l](context[l]);
    out.push_back({narrow(c, 1, 0, hid), narrow(c, 1, hid, hid), narrow(c, 1, 2 * hid, hid)});
  }
  return out;
}

template <typename T>
void MultiLevelUpdate<T>::step(MultiLevelState<T>& state, const std::vector<bool>& update,
                               const BasicTensor<T>& corr, const BasicTensor<T>& disparity, BasicTensor<T>* delta,
                               BasicTensor<T>* mask) {
  const int levels = static_cast<int>(grus_.size());
  if (static_cast<int>(state.hidden.size()) != levels || static_cast<int>(update.size()) != levels) {
    throw DimensionError("update: state has " + std::to_string(state.hidden.size()) + " levels, model has " +
                         std::to_string(levels));
  }
  auto& hs = state.hidden;
  for (int l = levels - 1; l >= 0; --l) {
    if (!update[static_cast<std::size_t>(l)]) continue;
    const auto li = static_cast<std::size_t>(l);
    std::vector<BasicTensor<T>> parts;
    if (l == 0) {
      flops::Scope scope("motion");
      parts.push_back(motion_(corr, disparity));
    } else {
      parts.push_back(interpolate2d(hs[li - 1], 1, 2));
    }
    if (l + 1 < levels) parts.push_back(interpolate2d(hs[li + 1], 2, 1));
    const auto x = parts.size() == 1 ? parts[0] : concat<T>(parts, 1);
    flops::Scope scope("gru.l" + std::to_string(l));
    hs[li] = grus_[li](hs[li], x, state.bias.empty() ? nullptr : &state.bias[li]);
  }
  if (!update[0]) return;
  if (delta) {
    flops::Scope scope("head.disp");
    *delta = disp_head_(hs[0]);
  }
  if (mask) {
    flops::Scope scope("head.mask");
    *mask = mask_head_(hs[0]);
  }
}

template <typename T>
void MultiLevelUpdate<T>::visit(const TensorVisitor<T>& v) {
  for (std::size_t l = 0; l < grus_.size(); ++l) {
    context_convs_[l].visit("update.context" + std::to_string(l), v);
    grus_[l].visit("update.gru" + std::to_string(l), v);
  }
  motion_.visit("update.motion", v);
  disp_head_.visit("update.disp_head", v);
  mask_head_.visit("update.mask_head", v);
}

#define RSTEREO_INSTANTIATE(T)                                                                    \
  template struct ConvGRU<T>;                                                                   \
  template struct MotionEncoder<T>;                                                             \
  template struct Head<T>;                                                                      \
  template BasicTensor<T> convex_upsample(const BasicTensor<T>&, const BasicTensor<T>&, int);   \
  template class MultiLevelUpdate<T>;
RSTEREO_INSTANTIATE(float)
RSTEREO_INSTANTIATE(double)
#undef RSTEREO_INSTANTIATE

}  // namespace rstereo
