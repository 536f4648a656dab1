#pragma once

// Row-range correlation lookups shared by the serial and parallel kernels.
// A "row" is one (batch, image row) pair; rows own disjoint outputs and
// gradient slices.

#include <algorithm>
#include <cmath>
#include <vector>

#include "rstereo/kernels.hpp"

namespace rstereo::kernels::blocks {

// Base tap and fraction for one pixel, or `valid == false` when every tap of
// the window falls outside the level.
template <typename T>
struct Window {
  Index base = 0;
  T frac = T(0);
  bool valid = false;
};

template <typename T>
Window<T> window_for(Index j, T d, int level_index, Index radius, Index level_width) {
  Window<T> w;
  const T x = (static_cast<T>(j) - d) / static_cast<T>(Index{1} << level_index);
  if (!std::isfinite(x)) return w;
  if (x < -static_cast<T>(radius + 2) || x > static_cast<T>(level_width + radius + 1)) return w;
  const T f = std::floor(x);
  w.base = static_cast<Index>(f);
  w.frac = x - f;
  w.valid = true;
  return w;
}

template <typename T>
inline T tap(const T* v, Index t, Index n) {
  return (t >= 0 && t < n) ? v[t] : T(0);
}

template <typename T>
void lookup_forward_rows(const LookupGeometry& g, Index r0, Index r1, const T* level, Index wk, int k,
                         const T* disparity, T* out) {
  const Index plane = g.height * g.width;
  const Index taps = 2 * g.radius + 1;
  for (Index row = r0; row < r1; ++row) {
    const Index b = row / g.height, i = row % g.height;
    for (Index j = 0; j < g.width; ++j) {
      const Index pix = row * g.width + j;
      const T* v = level + pix * wk;
      T* o = out + (b * g.channels + g.channel_offset) * plane + i * g.width + j;
      const auto w = window_for(j, disparity[pix], k, g.radius, wk);
      for (Index c = 0; c < taps; ++c) {
        T val = T(0);
        if (w.valid) {
          const Index t = w.base + c - g.radius;
          val = (T(1) - w.frac) * tap(v, t, wk) + w.frac * tap(v, t + 1, wk);
        }
        o[c * plane] = val;
      }
    }
  }
}

template <typename T>
void lookup_backward_rows(const LookupGeometry& g, Index r0, Index r1, const T* level, Index wk, int k,
                          const T* disparity, const T* grad_out, T* grad_level, T* grad_disparity) {
  const Index plane = g.height * g.width;
  const Index taps = 2 * g.radius + 1;
  const T inv_scale = T(1) / static_cast<T>(Index{1} << k);
  for (Index row = r0; row < r1; ++row) {
    const Index b = row / g.height, i = row % g.height;
    for (Index j = 0; j < g.width; ++j) {
      const Index pix = row * g.width + j;
      const auto w = window_for(j, disparity[pix], k, g.radius, wk);
      if (!w.valid) continue;
      const T* v = level + pix * wk;
      const T* go = grad_out + (b * g.channels + g.channel_offset) * plane + i * g.width + j;
      T dx = T(0);
      for (Index c = 0; c < taps; ++c) {
        const T gc = go[c * plane];
        const Index t = w.base + c - g.radius;
        if (grad_level) {
          if (t >= 0 && t < wk) grad_level[pix * wk + t] += gc * (T(1) - w.frac);
          if (t + 1 >= 0 && t + 1 < wk) grad_level[pix * wk + t + 1] += gc * w.frac;
        }
        dx += gc * (tap(v, t + 1, wk) - tap(v, t, wk));
      }
      if (grad_disparity) grad_disparity[pix] -= dx * inv_scale;
    }
  }
}

template <typename T>
T dot(const T* a, const T* b, Index n) {
  T s = T(0);
  for (Index h = 0; h < n; ++h) s += a[h] * b[h];
  return s;
}

// Volume entries for taps base-r .. base+r+1 of one pixel; zero off the level.
template <typename T>
void fly_values(const T* f, const T* right_row, Index depth, Index wk, Index first, Index count, T norm,
                T* values) {
  for (Index c = 0; c < count; ++c) {
    const Index t = first + c;
    values[c] = (t >= 0 && t < wk) ? norm * dot(f, right_row + t * depth, depth) : T(0);
  }
}

template <typename T>
void fly_forward_rows(const LookupGeometry& g, Index r0, Index r1, Index depth, const T* left, const T* right,
                      Index wk, int k, T norm, const T* disparity, T* out) {
  const Index plane = g.height * g.width;
  const Index taps = 2 * g.radius + 1;
  std::vector<T> values(static_cast<std::size_t>(taps + 1));
  for (Index row = r0; row < r1; ++row) {
    const Index b = row / g.height, i = row % g.height;
    const T* right_row = right + row * wk * depth;
    for (Index j = 0; j < g.width; ++j) {
      const Index pix = row * g.width + j;
      T* o = out + (b * g.channels + g.channel_offset) * plane + i * g.width + j;
      const auto w = window_for(j, disparity[pix], k, g.radius, wk);
      if (!w.valid) {
        for (Index c = 0; c < taps; ++c) o[c * plane] = T(0);
        continue;
      }
      const Index first = w.base - g.radius;
      fly_values(left + pix * depth, right_row, depth, wk, first, taps + 1, norm, values.data());
      for (Index c = 0; c < taps; ++c) o[c * plane] = (T(1) - w.frac) * values[c] + w.frac * values[c + 1];
    }
  }
}

template <typename T>
void fly_backward_rows(const LookupGeometry& g, Index r0, Index r1, Index depth, const T* left, const T* right,
                       Index wk, int k, T norm, const T* disparity, const T* grad_out, T* grad_left,
                       T* grad_right, T* grad_disparity) {
  const Index plane = g.height * g.width;
  const Index taps = 2 * g.radius + 1;
  const T inv_scale = T(1) / static_cast<T>(Index{1} << k);
  std::vector<T> values(static_cast<std::size_t>(taps + 1)), gv(static_cast<std::size_t>(taps + 1));
  for (Index row = r0; row < r1; ++row) {
    const Index b = row / g.height, i = row % g.height;
    const T* right_row = right + row * wk * depth;
    for (Index j = 0; j < g.width; ++j) {
      const Index pix = row * g.width + j;
      const auto w = window_for(j, disparity[pix], k, g.radius, wk);
      if (!w.valid) continue;
      const T* go = grad_out + (b * g.channels + g.channel_offset) * plane + i * g.width + j;
      const Index first = w.base - g.radius;
      const T* f = left + pix * depth;
      std::fill(gv.begin(), gv.end(), T(0));
      T dx = T(0);
      if (grad_disparity) fly_values(f, right_row, depth, wk, first, taps + 1, norm, values.data());
      for (Index c = 0; c < taps; ++c) {
        const T gc = go[c * plane];
        gv[c] += gc * (T(1) - w.frac);
        gv[c + 1] += gc * w.frac;
        if (grad_disparity) dx += gc * (values[c + 1] - values[c]);
      }
      if (grad_disparity) grad_disparity[pix] -= dx * inv_scale;
      for (Index c = 0; c <= taps; ++c) {
        const Index t = first + c;
        if (t < 0 || t >= wk || gv[c] == T(0)) continue;
        const T s = norm * gv[c];
        const T* rt = right_row + t * depth;
        if (grad_left) {
          T* gl = grad_left + pix * depth;
          for (Index h = 0; h < depth; ++h) gl[h] += s * rt[h];
        }
        if (grad_right) {
          T* gr = grad_right + (row * wk + t) * depth;
          for (Index h = 0; h < depth; ++h) gr[h] += s * f[h];
        }
      }
    }
  }
}

}  // namespace rstereo::kernels::blocks
