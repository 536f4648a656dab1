#pragma once

// Row-range building blocks shared by the serial and parallel kernels. Both
// front ends call exactly these routines, which is what keeps their results
// bitwise identical.

#include <algorithm>
#include <cstring>
#include <vector>

#include "rstereo/kernels.hpp"

namespace rstereo::kernels::blocks {

template <typename T>
inline constexpr Index kTileCols = 64 / sizeof(T) * 2;
inline constexpr Index kTileRows = 4;

// C rows [i0, i1) of C = A·B (+C), A [M,K] and B [K,N] both untransposed.
template <typename T>
void gemm_nn_rows(Index i0, Index i1, Index n, Index k, const T* a, Index lda, const T* b, Index ldb, T* c,
                  Index ldc, bool accumulate) {
  constexpr Index TC = kTileCols<T>;
  for (Index j0 = 0; j0 < n; j0 += TC) {
    const Index jn = std::min(TC, n - j0);
    Index i = i0;
    if (jn == TC) {
      for (; i + kTileRows <= i1; i += kTileRows) {
        T acc[kTileRows][TC];
        for (Index r = 0; r < kTileRows; ++r) {
          for (Index j = 0; j < TC; ++j) acc[r][j] = accumulate ? c[(i + r) * ldc + j0 + j] : T(0);
        }
        const T* a0 = a + i * lda;
        for (Index p = 0; p < k; ++p) {
          const T* brow = b + p * ldb + j0;
          const T v0 = a0[p], v1 = a0[lda + p], v2 = a0[2 * lda + p], v3 = a0[3 * lda + p];
#pragma GCC unroll 8
          for (Index j = 0; j < TC; ++j) {
            const T bj = brow[j];
            acc[0][j] += v0 * bj;
            acc[1][j] += v1 * bj;
            acc[2][j] += v2 * bj;
            acc[3][j] += v3 * bj;
          }
        }
        for (Index r = 0; r < kTileRows; ++r) {
          std::memcpy(c + (i + r) * ldc + j0, acc[r], sizeof(T) * TC);
        }
      }
    }
    for (; i < i1; ++i) {
      T acc[TC];
      for (Index j = 0; j < jn; ++j) acc[j] = accumulate ? c[i * ldc + j0 + j] : T(0);
      const T* arow = a + i * lda;
      for (Index p = 0; p < k; ++p) {
        const T v = arow[p];
        const T* brow = b + p * ldb + j0;
        for (Index j = 0; j < jn; ++j) acc[j] += v * brow[j];
      }
      std::memcpy(c + i * ldc + j0, acc, sizeof(T) * jn);
    }
  }
}

// dst [cols, rows] = src [rows, cols]^T, dst contiguous.
template <typename T>
void transpose(Index rows, Index cols, const T* src, Index ld, T* dst) {
  constexpr Index B = 16;
  for (Index r0 = 0; r0 < rows; r0 += B) {
    for (Index c0 = 0; c0 < cols; c0 += B) {
      const Index r1 = std::min(rows, r0 + B), c1 = std::min(cols, c0 + B);
      for (Index r = r0; r < r1; ++r) {
        for (Index col = c0; col < c1; ++col) dst[col * rows + r] = src[r * ld + col];
      }
    }
  }
}

template <typename T>
void im2col_channels(const ConvGeometry& g, Index c0, Index c1, const T* image, T* cols, Index ld, Index col0) {
  const Index oh = g.out_height(), ow = g.out_width();
  for (Index ch = c0; ch < c1; ++ch) {
    const T* plane = image + ch * g.height * g.width;
    for (Index ky = 0; ky < g.kernel_h; ++ky) {
      for (Index kx = 0; kx < g.kernel_w; ++kx) {
        T* row = cols + ((ch * g.kernel_h + ky) * g.kernel_w + kx) * ld + col0;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * g.stride - g.padding + ky;
          T* out = row + oy * ow;
          if (iy < 0 || iy >= g.height) {
            std::fill(out, out + ow, T(0));
            continue;
          }
          const T* src = plane + iy * g.width;
          if (g.stride == 1) {
            const Index shift = kx - g.padding;
            const Index lo = std::max<Index>(0, -shift), hi = std::min(ow, g.width - shift);
            std::fill(out, out + std::max<Index>(lo, 0), T(0));
            if (hi > lo) std::memcpy(out + lo, src + lo + shift, sizeof(T) * (hi - lo));
            if (hi < ow) std::fill(out + std::max(hi, lo), out + ow, T(0));
          } else {
            for (Index ox = 0; ox < ow; ++ox) {
              const Index ix = ox * g.stride - g.padding + kx;
              out[ox] = (ix >= 0 && ix < g.width) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_channels(const ConvGeometry& g, Index c0, Index c1, const T* cols, Index ld, Index col0, T* image) {
  const Index oh = g.out_height(), ow = g.out_width();
  for (Index ch = c0; ch < c1; ++ch) {
    T* plane = image + ch * g.height * g.width;
    for (Index ky = 0; ky < g.kernel_h; ++ky) {
      for (Index kx = 0; kx < g.kernel_w; ++kx) {
        const T* row = cols + ((ch * g.kernel_h + ky) * g.kernel_w + kx) * ld + col0;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          T* dst = plane + iy * g.width;
          const T* in = row + oy * ow;
          for (Index ox = 0; ox < ow; ++ox) {
            const Index ix = ox * g.stride - g.padding + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}

// Resolves transposes by packing into contiguous untransposed operands.
template <typename T>
struct PackedOperands {
  const T* a;
  Index lda;
  const T* b;
  Index ldb;
  std::vector<T> a_buf, b_buf;

  PackedOperands(Trans ta, Trans tb, Index m, Index n, Index k, const T* a_in, Index lda_in, const T* b_in,
                 Index ldb_in)
      : a(a_in), lda(lda_in), b(b_in), ldb(ldb_in) {
    if (ta == Trans::kYes) {
      a_buf.resize(static_cast<std::size_t>(m * k));
      transpose(k, m, a_in, lda_in, a_buf.data());
      a = a_buf.data();
      lda = k;
    }
    if (tb == Trans::kYes) {
      b_buf.resize(static_cast<std::size_t>(k * n));
      transpose(n, k, b_in, ldb_in, b_buf.data());
      b = b_buf.data();
      ldb = n;
    }
  }
};

}  // namespace rstereo::kernels::blocks
