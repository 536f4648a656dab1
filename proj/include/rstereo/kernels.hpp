#pragma once

// Compute kernels behind the differentiable ops. Each kernel exists as a
// straightforward serial reference and an OpenMP version. The parallel
// versions split work only across independent output elements, so every
// output is reduced in the same order as the reference and results agree
// bit for bit.

#include <cstdint>

namespace rstereo::kernels {

using Index = std::int64_t;

enum class Trans { kNo, kYes };

/// Geometry of a 2-D convolution over one image.
struct ConvGeometry {
  Index channels, height, width;
  Index kernel_h, kernel_w;
  Index stride, padding;

  Index out_height() const { return (height + 2 * padding - kernel_h) / stride + 1; }
  Index out_width() const { return (width + 2 * padding - kernel_w) / stride + 1; }
  Index patch_size() const { return channels * kernel_h * kernel_w; }
};

/// Pixel grid sampled by the correlation lookups. Disparity is [B,1,H,W];
/// lookup output is [B,C,H,W] with this level's 2r+1 channels starting at
/// `channel_offset` out of `channels`.
struct LookupGeometry {
  Index batch, height, width;
  Index radius;
  Index channel_offset, channels;
};

namespace serial {

/// C[M,N] = op(A)·op(B) (+ C when `accumulate`). Row-major with leading dims.
template <typename T>
void gemm(Trans ta, Trans tb, Index m, Index n, Index k, const T* a, Index lda, const T* b, Index ldb, T* c,
          Index ldc, bool accumulate);

/// Unfolds one image [C,H,W] into columns [C·kh·kw, ld] starting at column `col0`.
template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* cols, Index ld, Index col0);

/// Adjoint of im2col: scatters columns back, accumulating into `image`.
template <typename T>
void col2im(const ConvGeometry& g, const T* cols, Index ld, Index col0, T* image);

/// Linear sampling of a precomputed pyramid level [B,H,W,Wk] at
/// (j - d)/2^k + o for o in [-r, r]; taps outside [0, Wk) read as zero.
template <typename T>
void lookup_forward(const LookupGeometry& g, const T* level, Index level_width, int level_index, const T* disparity,
                    T* out);
/// Accumulates into grad_level / grad_disparity (either may be null).
template <typename T>
void lookup_backward(const LookupGeometry& g, const T* level, Index level_width, int level_index,
                     const T* disparity, const T* grad_out, T* grad_level, T* grad_disparity);

/// Same sampling with volume entries formed on demand as dot products of
/// left features [B,H,W,D] with pooled right features [B,H,Wk,D].
template <typename T>
void fly_forward(const LookupGeometry& g, Index depth, const T* left, const T* right, Index level_width,
                 int level_index, T norm, const T* disparity, T* out);
template <typename T>
void fly_backward(const LookupGeometry& g, Index depth, const T* left, const T* right, Index level_width,
                  int level_index, T norm, const T* disparity, const T* grad_out, T* grad_left, T* grad_right,
                  T* grad_disparity);

}  // namespace serial

namespace parallel {

template <typename T>
void gemm(Trans ta, Trans tb, Index m, Index n, Index k, const T* a, Index lda, const T* b, Index ldb, T* c,
          Index ldc, bool accumulate);

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* cols, Index ld, Index col0);

template <typename T>
void col2im(const ConvGeometry& g, const T* cols, Index ld, Index col0, T* image);

/// Linear sampling of a precomputed pyramid level [B,H,W,Wk] at
/// (j - d)/2^k + o for o in [-r, r]; taps outside [0, Wk) read as zero.
template <typename T>
void lookup_forward(const LookupGeometry& g, const T* level, Index level_width, int level_index, const T* disparity,
                    T* out);
/// Accumulates into grad_level / grad_disparity (either may be null).
template <typename T>
void lookup_backward(const LookupGeometry& g, const T* level, Index level_width, int level_index,
                     const T* disparity, const T* grad_out, T* grad_level, T* grad_disparity);

/// Same sampling with volume entries formed on demand as dot products of
/// left features [B,H,W,D] with pooled right features [B,H,Wk,D].
template <typename T>
void fly_forward(const LookupGeometry& g, Index depth, const T* left, const T* right, Index level_width,
                 int level_index, T norm, const T* disparity, T* out);
template <typename T>
void fly_backward(const LookupGeometry& g, Index depth, const T* left, const T* right, Index level_width,
                  int level_index, T norm, const T* disparity, const T* grad_out, T* grad_left, T* grad_right,
                  T* grad_disparity);

}  // namespace parallel

int max_threads();

}  // namespace rstereo::kernels
