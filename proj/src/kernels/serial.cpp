#include "blocks.hpp"
#include "lookup_blocks.hpp"

namespace rstereo::kernels::serial {

template <typename T>
void gemm(Trans ta, Trans tb, Index m, Index n, Index k, const T* a, Index lda, const T* b, Index ldb, T* c,
          Index ldc, bool accumulate) {
  blocks::PackedOperands<T> p(ta, tb, m, n, k, a, lda, b, ldb);
  blocks::gemm_nn_rows(0, m, n, k, p.a, p.lda, p.b, p.ldb, c, ldc, accumulate);
}

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* cols, Index ld, Index col0) {
  blocks::im2col_channels(g, 0, g.channels, image, cols, ld, col0);
}

template <typename T>
void col2im(const ConvGeometry& g, const T* cols, Index ld, Index col0, T* image) {
  blocks::col2im_channels(g, 0, g.channels, cols, ld, col0, image);
}

template <typename T>
void lookup_forward(const LookupGeometry& g, const T* level, Index level_width, int level_index, const T* disparity,
                    T* out) {
  const Index rows = g.batch * g.height;
  blocks::lookup_forward_rows(g, 0, rows, level, level_width, level_index, disparity, out);
}

template <typename T>
void lookup_backward(const LookupGeometry& g, const T* level, Index level_width, int level_index,
                     const T* disparity, const T* grad_out, T* grad_level, T* grad_disparity) {
  const Index rows = g.batch * g.height;
  blocks::lookup_backward_rows(g, 0, rows, level, level_width, level_index, disparity, grad_out, grad_level, grad_disparity);
}

template <typename T>
void fly_forward(const LookupGeometry& g, Index depth, const T* left, const T* right, Index level_width,
                 int level_index, T norm, const T* disparity, T* out) {
  const Index rows = g.batch * g.height;
  blocks::fly_forward_rows(g, 0, rows, depth, left, right, level_width, level_index, norm, disparity, out);
}

template <typename T>
void fly_backward(const LookupGeometry& g, Index depth, const T* left, const T* right, Index level_width,
                  int level_index, T norm, const T* disparity, const T* grad_out, T* grad_left, T* grad_right,
                  T* grad_disparity) {
  const Index rows = g.batch * g.height;
  blocks::fly_backward_rows(g, 0, rows, depth, left, right, level_width, level_index, norm, disparity, grad_out, grad_left, grad_right, grad_disparity);
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

}  // namespace rstereo::kernels::serial
