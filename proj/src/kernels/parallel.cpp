#include <omp.h>

#include "blocks.hpp"
#include "lookup_blocks.hpp"

namespace rstereo::kernels {

int max_threads() { return omp_get_max_threads(); }

namespace parallel {

template <typename T>
void gemm(Trans ta, Trans tb, Index m, Index n, Index k, const T* a, Index lda, const T* b, Index ldb, T* c,
          Index ldc, bool accumulate) {
  blocks::PackedOperands<T> p(ta, tb, m, n, k, a, lda, b, ldb);
  const Index row_blocks = (m + blocks::kTileRows - 1) / blocks::kTileRows;
  // Small products are not worth a fork.
  if (row_blocks < 2 || m * n * k < (1 << 16) || omp_get_max_threads() == 1) {
    blocks::gemm_nn_rows(0, m, n, k, p.a, p.lda, p.b, p.ldb, c, ldc, accumulate);
    return;
  }
#pragma omp parallel for schedule(static)
  for (Index rb = 0; rb < row_blocks; ++rb) {
    const Index i0 = rb * blocks::kTileRows;
    const Index i1 = std::min(m, i0 + blocks::kTileRows);
    blocks::gemm_nn_rows(i0, i1, n, k, p.a, p.lda, p.b, p.ldb, c, ldc, accumulate);
  }
}

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* cols, Index ld, Index col0) {
#pragma omp parallel for schedule(static) if (g.channels > 1 && omp_get_max_threads() > 1)
  for (Index ch = 0; ch < g.channels; ++ch) blocks::im2col_channels(g, ch, ch + 1, image, cols, ld, col0);
}

template <typename T>
void col2im(const ConvGeometry& g, const T* cols, Index ld, Index col0, T* image) {
  // Channels own disjoint image planes, so the scatter has no write conflicts.
#pragma omp parallel for schedule(static) if (g.channels > 1 && omp_get_max_threads() > 1)
  for (Index ch = 0; ch < g.channels; ++ch) blocks::col2im_channels(g, ch, ch + 1, cols, ld, col0, image);
}

template <typename T>
void lookup_forward(const LookupGeometry& g, const T* level, Index level_width, int level_index, const T* disparity,
                    T* out) {
  const Index rows = g.batch * g.height;
#pragma omp parallel for schedule(static) if (rows > 1 && omp_get_max_threads() > 1)
  for (Index r = 0; r < rows; ++r) blocks::lookup_forward_rows(g, r, r + 1, level, level_width, level_index, disparity, out);
}

template <typename T>
void lookup_backward(const LookupGeometry& g, const T* level, Index level_width, int level_index,
                     const T* disparity, const T* grad_out, T* grad_level, T* grad_disparity) {
  const Index rows = g.batch * g.height;
#pragma omp parallel for schedule(static) if (rows > 1 && omp_get_max_threads() > 1)
  for (Index r = 0; r < rows; ++r) blocks::lookup_backward_rows(g, r, r + 1, level, level_width, level_index, disparity, grad_out, grad_level, grad_disparity);
}

template <typename T>
void fly_forward(const LookupGeometry& g, Index depth, const T* left, const T* right, Index level_width,
                 int level_index, T norm, const T* disparity, T* out) {
  const Index rows = g.batch * g.height;
#pragma omp parallel for schedule(static) if (rows > 1 && omp_get_max_threads() > 1)
  for (Index r = 0; r < rows; ++r) blocks::fly_forward_rows(g, r, r + 1, depth, left, right, level_width, level_index, norm, disparity, out);
}

template <typename T>
void fly_backward(const LookupGeometry& g, Index depth, const T* left, const T* right, Index level_width,
                  int level_index, T norm, const T* disparity, const T* grad_out, T* grad_left, T* grad_right,
                  T* grad_disparity) {
  const Index rows = g.batch * g.height;
#pragma omp parallel for schedule(static) if (rows > 1 && omp_get_max_threads() > 1)
  for (Index r = 0; r < rows; ++r) blocks::fly_backward_rows(g, r, r + 1, depth, left, right, level_width, level_index, norm, disparity, grad_out, grad_left, grad_right, grad_disparity);
}

#define RSTEREO_INSTANTIATE(T)                                                                              \
  template void gemm<T>(Trans, Trans, Index, Index, Index, const T*, Index, const T*, Index, T*, Index, bool); \
  template void im2col<T>(const ConvGeometry&, const T*, T*, Index, Index);                                 \
  template void col2im<T>(const ConvGeometry&, const T*, Index, Index, T*);                                 \
  template void lookup_forward<T>(const LookupGeometry&, const T*, Index, int, const T*, T*);               \
  template void lookup_backward<T>(const LookupGeometry&, const T*, Index, int, const T*, const T*, T*, T*); \
  template void fly_forward<T>(const LookupGeometry&, Index, const T*, const T*, Index, int, T, const T*, T*); \
  template void fly_backward<T>(const LookupGeometry&, Index, const T*, const T*, Index, int, T, const T*,   \
                                const T*, T*, T*, T*);
RSTEREO_INSTANTIATE(float)
RSTEREO_INSTANTIATE(double)
#undef RSTEREO_INSTANTIATE

}  // namespace parallel
}  // namespace rstereo::kernels
