#include "rstereo/correlation.hpp"

#include <cmath>

#include "rstereo/flops.hpp"
#include "rstereo/kernels.hpp"

namespace rstereo {

namespace {

using detail::make_result;
using detail::Node;

struct Grid {
  Index batch, height, width;
  bool batched;
};

Grid disparity_grid(const Shape& d) {
  if (d.rank() == 4 && d[1] == 1) return {d[0], d[2], d[3], true};
  if (d.rank() == 3 && d[0] == 1) return {1, d[1], d[2], false};
  throw DimensionError("disparity must be [1,h,w] or [B,1,h,w], got " + d.str());
}

Shape lookup_shape(const Grid& g, Index channels) {
  return g.batched ? Shape{g.batch, channels, g.height, g.width} : Shape{channels, g.height, g.width};
}

// [D,h,w] or [B,D,h,w] -> batched view.
template <typename T>
BasicTensor<T> as_batched(const BasicTensor<T>& f, const char* op) {
  if (f.rank() == 4) return f;
  if (f.rank() == 3) return reshape(f, Shape{1, f.dim(0), f.dim(1), f.dim(2)});
  throw DimensionError(std::string(op) + ": expected [D,h,w] or [B,D,h,w], got " + f.shape().str());
}

template <typename T>
T volume_norm(Index depth, bool normalize) {
  return normalize ? T(1) / std::sqrt(static_cast<T>(depth)) : T(1);
}

}  // namespace

template <typename T>
T bilinear_sample_1d(std::span<const T> row, T x) {
  const Index n = static_cast<Index>(row.size());
  if (!std::isfinite(x) || x <= T(-1) || x >= static_cast<T>(n)) return T(0);
  const T f = std::floor(x);
  const Index i = static_cast<Index>(f);
  const T frac = x - f;
  const T lo = i >= 0 ? row[static_cast<std::size_t>(i)] : T(0);
  const T hi = i + 1 < n ? row[static_cast<std::size_t>(i + 1)] : T(0);
  return (T(1) - frac) * lo + frac * hi;
}

template <typename T>
BasicTensor<T> bilinear_sample_1d(const BasicTensor<T>& row, const BasicTensor<T>& x) {
  if (row.rank() != 1) throw DimensionError("bilinear_sample_1d: row must be 1-D, got " + row.shape().str());
  if (x.numel() != 1) throw DimensionError("bilinear_sample_1d: x must be a scalar");
  // One pixel at column 0 whose disparity is -x samples the row at x.
  const auto level = reshape(row, Shape{1, 1, row.dim(0)});
  const auto d = reshape(scale(x, T(-1)), Shape{1, 1, 1});
  return reshape(lookup<T>({level}, d, 0), Shape{});
}

template <typename T>
BasicTensor<T> build_volume(const BasicTensor<T>& f, const BasicTensor<T>& g, bool normalize) {
  if (f.shape() != g.shape()) {
    throw DimensionError("build_volume: feature shapes differ: " + f.shape().str() + " vs " + g.shape().str());
  }
  const bool batched = f.rank() == 4;
  const auto fb = as_batched(f, "build_volume"), gb = as_batched(g, "build_volume");
  flops::Scope scope("corr.volume");
  // [B,h,w,D] @ [B,h,D,w] -> [B,h,w,w]
  auto c = matmul(permute(fb, {0, 2, 3, 1}), permute(gb, {0, 2, 1, 3}));
  if (normalize) c = scale(c, volume_norm<T>(f.dim(f.rank() - 3), true));
  return batched ? c : reshape(c, Shape{c.dim(1), c.dim(2), c.dim(3)});
}

template <typename T>
std::vector<BasicTensor<T>> build_pyramid(const BasicTensor<T>& volume, int levels) {
  if (levels < 1) throw ContractError("build_pyramid: need at least one level");
  if (volume.rank() != 3 && volume.rank() != 4) {
    throw DimensionError("build_pyramid: volume must be [h,w,w] or [B,h,w,w], got " + volume.shape().str());
  }
  std::vector<BasicTensor<T>> pyr{volume};
  for (int k = 1; k < levels; ++k) pyr.push_back(avgpool_lastdim(pyr.back()));
  return pyr;
}

template <typename T>
BasicTensor<T> lookup(const std::vector<BasicTensor<T>>& pyramid, const BasicTensor<T>& disparity, int radius) {
  if (pyramid.empty()) throw ContractError("lookup: empty pyramid");
  if (radius < 0) throw ContractError("lookup: negative radius");
  const Grid grid = disparity_grid(disparity.shape());
  const Index taps = 2 * radius + 1;
  const Index channels = taps * static_cast<Index>(pyramid.size());
  for (const auto& level : pyramid) {
    const Shape& s = level.shape();
    const bool ok = grid.batched ? (s.rank() == 4 && s[0] == grid.batch && s[1] == grid.height && s[2] == grid.width)
                                 : (s.rank() == 3 && s[0] == grid.height && s[1] == grid.width);
    if (!ok) throw DimensionError("lookup: level " + s.str() + " does not match disparity " + disparity.shape().str());
  }
  Buffer<T> out(static_cast<std::size_t>(grid.batch * channels * grid.height * grid.width));
  const T* dptr = disparity.data().data();
  for (std::size_t k = 0; k < pyramid.size(); ++k) {
    const kernels::LookupGeometry geo{grid.batch, grid.height, grid.width, radius, static_cast<Index>(k) * taps,
                                      channels};
    kernels::parallel::lookup_forward(geo, pyramid[k].data().data(), pyramid[k].shape().back(),
                                      static_cast<int>(k), dptr, out.data());
  }
  std::vector<BasicTensor<T>> inputs(pyramid.begin(), pyramid.end());
  inputs.push_back(disparity);
  return make_result<T>(lookup_shape(grid, channels), std::move(out), std::move(inputs), "lookup",
                        [grid, radius, taps, channels](Node<T>& self) {
                          const std::size_t nlev = self.inputs.size() - 1;
                          auto& d = *self.inputs.back();
                          T* gd = d.requires_grad ? d.grad_ptr() : nullptr;
                          for (std::size_t k = 0; k < nlev; ++k) {
                            auto& level = *self.inputs[k];
                            T* gl = level.requires_grad ? level.grad_ptr() : nullptr;
                            if (!gl && !gd) continue;
                            const kernels::LookupGeometry geo{grid.batch, grid.height, grid.width, radius,
                                                              static_cast<Index>(k) * taps, channels};
                            kernels::parallel::lookup_backward(geo, level.data.data(), level.shape.back(),
                                                               static_cast<int>(k), d.data.data(), self.grad.data(),
                                                               gl, gd);
                          }
                        });
}

namespace {

// Left features [B,h,w,D], pooled right features per level [B,h,w_k,D].
template <typename T>
BasicTensor<T> fly_lookup(const BasicTensor<T>& left, const std::vector<BasicTensor<T>>& right,
                          const BasicTensor<T>& disparity, int radius, T norm) {
  const Grid grid = disparity_grid(disparity.shape());
  const Index depth = left.dim(3);
  const Index taps = 2 * radius + 1;
  const Index channels = taps * static_cast<Index>(right.size());
  Buffer<T> out(static_cast<std::size_t>(grid.batch * channels * grid.height * grid.width));
  std::uint64_t macs = 0;
  for (std::size_t k = 0; k < right.size(); ++k) {
    const kernels::LookupGeometry geo{grid.batch, grid.height, grid.width, radius, static_cast<Index>(k) * taps,
                                      channels};
    kernels::parallel::fly_forward(geo, depth, left.data().data(), right[k].data().data(), right[k].dim(2),
                                   static_cast<int>(k), norm, disparity.data().data(), out.data());
    macs += static_cast<std::uint64_t>(grid.batch * grid.height * grid.width * (taps + 1) * depth);
  }
  flops::add_macs(macs);
  std::vector<BasicTensor<T>> inputs{left};
  inputs.insert(inputs.end(), right.begin(), right.end());
  inputs.push_back(disparity);
  return make_result<T>(lookup_shape(grid, channels), std::move(out), std::move(inputs), "lookup_on_the_fly",
                        [grid, radius, taps, channels, depth, norm](Node<T>& self) {
                          auto& l = *self.inputs.front();
                          auto& d = *self.inputs.back();
                          T* gl = l.requires_grad ? l.grad_ptr() : nullptr;
                          T* gd = d.requires_grad ? d.grad_ptr() : nullptr;
                          for (std::size_t k = 0; k + 2 < self.inputs.size(); ++k) {
                            auto& r = *self.inputs[k + 1];
                            T* gr = r.requires_grad ? r.grad_ptr() : nullptr;
                            if (!gl && !gr && !gd) continue;
                            const kernels::LookupGeometry geo{grid.batch, grid.height, grid.width, radius,
                                                              static_cast<Index>(k) * taps, channels};
                            kernels::parallel::fly_backward(geo, depth, l.data.data(), r.data.data(), r.shape[2],
                                                            static_cast<int>(k), norm, d.data.data(),
                                                            self.grad.data(), gl, gr, gd);
                          }
                        });
}

// Right features pooled along width for each level, as [B,h,w_k,D].
template <typename T>
std::vector<BasicTensor<T>> pooled_right(const BasicTensor<T>& gb, int levels) {
  std::vector<BasicTensor<T>> out;
  auto cur = permute(gb, {0, 2, 1, 3});  // [B,h,D,w]
  for (int k = 0; k < levels; ++k) {
    if (k > 0) cur = avgpool_lastdim(cur);
    out.push_back(permute(cur, {0, 1, 3, 2}));
  }
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> lookup_on_the_fly(const BasicTensor<T>& f, const BasicTensor<T>& g, const BasicTensor<T>& disparity,
                                 int levels, int radius, bool normalize) {
  if (f.shape() != g.shape()) {
    throw DimensionError("lookup_on_the_fly: feature shapes differ: " + f.shape().str() + " vs " + g.shape().str());
  }
  if (levels < 1 || radius < 0) throw ContractError("lookup_on_the_fly: need levels >= 1 and radius >= 0");
  const Grid grid = disparity_grid(disparity.shape());
  const auto fb = as_batched(f, "lookup_on_the_fly"), gb = as_batched(g, "lookup_on_the_fly");
  if (fb.dim(0) != grid.batch || fb.dim(2) != grid.height || fb.dim(3) != grid.width) {
    throw DimensionError("lookup_on_the_fly: features " + f.shape().str() + " do not match disparity " +
                         disparity.shape().str());
  }
  return fly_lookup(permute(fb, {0, 2, 3, 1}), pooled_right(gb, levels), disparity, radius,
                    volume_norm<T>(fb.dim(1), normalize));
}

template <typename T>
CorrelationSampler<T>::CorrelationSampler(const BasicTensor<T>& f, const BasicTensor<T>& g,
                                          const CorrelationConfig& cfg)
    : cfg_(cfg) {
  if (f.shape() != g.shape()) {
    throw DimensionError("correlation: feature shapes differ: " + f.shape().str() + " vs " + g.shape().str());
  }
  if (cfg.on_the_fly) {
    const auto fb = as_batched(f, "correlation"), gb = as_batched(g, "correlation");
    left_ = permute(fb, {0, 2, 3, 1});
    right_ = pooled_right(gb, cfg.levels);
    norm_ = volume_norm<T>(fb.dim(1), cfg.normalize);
  } else {
    pyramid_ = build_pyramid(build_volume(f, g, cfg.normalize), cfg.levels);
  }
}

template <typename T>
BasicTensor<T> CorrelationSampler<T>::operator()(const BasicTensor<T>& disparity) const {
  flops::Scope scope("corr.lookup");
  if (cfg_.on_the_fly) {
    const Grid grid = disparity_grid(disparity.shape());
    if (left_.dim(0) != grid.batch || left_.dim(1) != grid.height || left_.dim(2) != grid.width) {
      throw DimensionError("correlation: disparity " + disparity.shape().str() + " does not match features");
    }
    return fly_lookup(left_, right_, disparity, cfg_.radius, norm_);
  }
  return lookup(pyramid_, disparity, cfg_.radius);
}

#define RSTEREO_INSTANTIATE(T)                                                                                    \
  template T bilinear_sample_1d<T>(std::span<const T>, T);                                                      \
  template BasicTensor<T> bilinear_sample_1d(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> build_volume(const BasicTensor<T>&, const BasicTensor<T>&, bool);                     \
  template std::vector<BasicTensor<T>> build_pyramid(const BasicTensor<T>&, int);                               \
  template BasicTensor<T> lookup(const std::vector<BasicTensor<T>>&, const BasicTensor<T>&, int);               \
  template BasicTensor<T> lookup_on_the_fly(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                            int, int, bool);                                                    \
  template class CorrelationSampler<T>;
RSTEREO_INSTANTIATE(float)
RSTEREO_INSTANTIATE(double)
#undef RSTEREO_INSTANTIATE

}  // namespace rstereo
