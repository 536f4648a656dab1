#include "rstereo/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rstereo/flops.hpp"
#include "rstereo/kernels.hpp"

namespace rstereo {

namespace {

using detail::make_result;
using detail::Node;

template <typename T>
Buffer<T> buffer(Index n) {
  return Buffer<T>(static_cast<std::size_t>(n));
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

struct Spatial {
  Index batch, channels, height, width;
  bool batched;

  static Spatial of(const Shape& s, const char* op) {
    if (s.rank() == 4) return {s[0], s[1], s[2], s[3], true};
    if (s.rank() == 3) return {1, s[0], s[1], s[2], false};
    throw DimensionError(std::string(op) + ": expected [C,H,W] or [B,C,H,W], got " + s.str());
  }
  Shape with(Index c, Index h, Index w) const { return batched ? Shape{batch, c, h, w} : Shape{c, h, w}; }
  Index plane() const { return height * width; }
};

// outer × axis × inner decomposition of a shape around `axis`.
struct AxisSplit {
  Index outer = 1, extent = 1, inner = 1;
  AxisSplit(const Shape& s, std::size_t axis) {
    if (axis >= s.rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + s.str());
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    extent = s[axis];
    for (std::size_t i = axis + 1; i < s.rank(); ++i) inner *= s[i];
  }
};

template <typename T, typename Fwd, typename Deriv>
BasicTensor<T> unary(const BasicTensor<T>& a, const char* name, Fwd fwd, Deriv deriv) {
  auto out = buffer<T>(a.numel());
  const auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_result<T>(a.shape(), std::move(out), {a}, name, [deriv](Node<T>& self) {
    auto& x = *self.inputs[0];
    if (!x.requires_grad) return;
    T* gx = x.grad_ptr();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * deriv(x.data[i], self.data[i]);
  });
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  auto out = buffer<T>(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "add", [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (in->requires_grad) in->accumulate(self.grad);
    }
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same(a.shape(), b.shape(), "sub");
  auto out = buffer<T>(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "sub", [](Node<T>& self) {
    if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(self.grad);
    if (auto& y = *self.inputs[1]; y.requires_grad) {
      T* gy = y.grad_ptr();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gy[i] -= self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same(a.shape(), b.shape(), "mul");
  auto out = buffer<T>(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "mul", [](Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (x.requires_grad) {
      T* gx = x.grad_ptr();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * y.data[i];
    }
    if (y.requires_grad) {
      T* gy = y.grad_ptr();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gy[i] += self.grad[i] * x.data[i];
    }
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  return unary(
      a, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T value) {
  return unary(
      a, "add_scalar", [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  return unary(
      a, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& a) {
  return unary(
      a, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
  return unary(
      a, "sigmoid", [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
BasicTensor<T> gate_blend(const BasicTensor<T>& h, const BasicTensor<T>& z, const BasicTensor<T>& candidate) {
  require_same(h.shape(), z.shape(), "gate_blend");
  require_same(h.shape(), candidate.shape(), "gate_blend");
  auto out = buffer<T>(h.numel());
  const auto hv = h.data(), zv = z.data(), qv = candidate.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (T(1) - zv[i]) * hv[i] + zv[i] * qv[i];
  return make_result<T>(h.shape(), std::move(out), {h, z, candidate}, "gate_blend", [](Node<T>& self) {
    auto& hn = *self.inputs[0];
    auto& zn = *self.inputs[1];
    auto& qn = *self.inputs[2];
    const std::size_t n = self.grad.size();
    if (hn.requires_grad) {
      T* g = hn.grad_ptr();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * (T(1) - zn.data[i]);
    }
    if (zn.requires_grad) {
      T* g = zn.grad_ptr();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * (qn.data[i] - hn.data[i]);
    }
    if (qn.requires_grad) {
      T* g = qn.grad_ptr();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * zn.data[i];
    }
  });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  const auto d = a.data();
  Buffer<T> out(1, std::accumulate(d.begin(), d.end(), T(0)));
  return make_result<T>(Shape{}, std::move(out), {a}, "sum", [](Node<T>& self) {
    auto& x = *self.inputs[0];
    if (!x.requires_grad) return;
    T* g = x.grad_ptr();
    for (std::size_t i = 0; i < x.data.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& a, std::size_t axis) {
  const AxisSplit s(a.shape(), axis);
  auto out = buffer<T>(a.numel());
  const auto in = a.data();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.extent * s.inner + i;
      T peak = in[base];
      for (Index k = 1; k < s.extent; ++k) peak = std::max(peak, in[base + k * s.inner]);
      T total = 0;
      for (Index k = 0; k < s.extent; ++k) {
        const T e = std::exp(in[base + k * s.inner] - peak);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (Index k = 0; k < s.extent; ++k) out[base + k * s.inner] /= total;
    }
  }
  return make_result<T>(a.shape(), std::move(out), {a}, "softmax", [s](Node<T>& self) {
    auto& x = *self.inputs[0];
    if (!x.requires_grad) return;
    T* gx = x.grad_ptr();
    for (Index o = 0; o < s.outer; ++o) {
      for (Index i = 0; i < s.inner; ++i) {
        const Index base = o * s.extent * s.inner + i;
        T dot = 0;
        for (Index k = 0; k < s.extent; ++k) dot += self.grad[base + k * s.inner] * self.data[base + k * s.inner];
        for (Index k = 0; k < s.extent; ++k) {
          const Index idx = base + k * s.inner;
          gx[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.rank()) throw DimensionError("concat axis out of range for " + first.str());
  std::vector<Index> dims = first.dims();
  dims[axis] = 0;
  std::vector<Index> extents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.rank() == first.rank();
    for (std::size_t i = 0; ok && i < s.rank(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw DimensionError("concat: incompatible shapes " + first.str() + " and " + s.str());
    extents.push_back(s[axis]);
    dims[axis] += s[axis];
  }
  const Shape out_shape(dims);
  const AxisSplit total(out_shape, axis);
  auto out = buffer<T>(out_shape.numel());
  Index offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto src = parts[p].data();
    const Index chunk = extents[p] * total.inner;
    for (Index o = 0; o < total.outer; ++o) {
      std::copy_n(src.begin() + o * chunk, chunk, out.begin() + o * total.extent * total.inner + offset);
    }
    offset += chunk;
  }
  return make_result<T>(out_shape, std::move(out), parts, "concat", [extents, total](Node<T>& self) {
    Index offset = 0;
    for (std::size_t p = 0; p < self.inputs.size(); ++p) {
      auto& in = *self.inputs[p];
      const Index chunk = extents[p] * total.inner;
      if (in.requires_grad) {
        T* g = in.grad_ptr();
        for (Index o = 0; o < total.outer; ++o) {
          const T* src = self.grad.data() + o * total.extent * total.inner + offset;
          for (Index i = 0; i < chunk; ++i) g[o * chunk + i] += src[i];
        }
      }
      offset += chunk;
    }
  });
}

template <typename T>
BasicTensor<T> narrow(const BasicTensor<T>& a, std::size_t axis, Index start, Index length) {
  const AxisSplit s(a.shape(), axis);
  if (start < 0 || length <= 0 || start + length > s.extent) {
    throw DimensionError("narrow [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for " + a.shape().str());
  }
  std::vector<Index> dims = a.shape().dims();
  dims[axis] = length;
  auto out = buffer<T>(s.outer * length * s.inner);
  const auto in = a.data();
  for (Index o = 0; o < s.outer; ++o) {
    std::copy_n(in.begin() + (o * s.extent + start) * s.inner, length * s.inner,
                out.begin() + o * length * s.inner);
  }
  return make_result<T>(Shape(dims), std::move(out), {a}, "narrow", [s, start, length](Node<T>& self) {
    auto& x = *self.inputs[0];
    if (!x.requires_grad) return;
    T* g = x.grad_ptr();
    for (Index o = 0; o < s.outer; ++o) {
      T* dst = g + (o * s.extent + start) * s.inner;
      const T* src = self.grad.data() + o * length * s.inner;
      for (Index i = 0; i < length * s.inner; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, const Shape& shape) {
  if (shape.numel() != a.numel()) {
    throw DimensionError("reshape " + a.shape().str() + " to " + shape.str() + " changes element count");
  }
  const auto in = a.data();
  Buffer<T> out(in.begin(), in.end());
  return make_result<T>(shape, std::move(out), {a}, "reshape", [](Node<T>& self) {
    if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(self.grad);
  });
}

namespace {

// Copies `src` (shape dims) into `dst` with axes reordered by `order`.
template <typename T>
void permute_copy(const T* src, const std::vector<Index>& dims, const std::vector<std::size_t>& order, T* dst,
                  bool accumulate) {
  const std::size_t rank = dims.size();
  std::vector<Index> in_stride(rank, 1);
  for (std::size_t i = rank - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * dims[i];
  std::vector<Index> out_dims(rank), stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_dims[i] = dims[order[i]];
    stride[i] = in_stride[order[i]];
  }
  Index total = 1;
  for (Index d : dims) total *= d;
  std::vector<Index> idx(rank, 0);
  const Index last = out_dims[rank - 1], last_stride = stride[rank - 1];
  Index src_off = 0;
  for (Index o = 0; o < total; o += last) {
    for (Index j = 0; j < last; ++j) {
      if (accumulate) {
        dst[o + j] += src[src_off + j * last_stride];
      } else {
        dst[o + j] = src[src_off + j * last_stride];
      }
    }
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      ++idx[ax];
      src_off += stride[ax];
      if (idx[ax] < out_dims[ax]) break;
      src_off -= stride[ax] * out_dims[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& a, const std::vector<std::size_t>& order) {
  const std::size_t rank = a.rank();
  std::vector<bool> seen(rank, false);
  if (order.size() != rank) throw DimensionError("permute order rank mismatch for " + a.shape().str());
  for (std::size_t ax : order) {
    if (ax >= rank || seen[ax]) throw DimensionError("permute order is not a permutation");
    seen[ax] = true;
  }
  std::vector<Index> out_dims(rank);
  for (std::size_t i = 0; i < rank; ++i) out_dims[i] = a.dim(order[i]);
  auto out = buffer<T>(a.numel());
  permute_copy(a.data().data(), a.shape().dims(), order, out.data(), false);
  std::vector<std::size_t> inverse(rank);
  for (std::size_t i = 0; i < rank; ++i) inverse[order[i]] = i;
  return make_result<T>(Shape(out_dims), std::move(out), {a}, "permute",
                        [inverse, out_dims](Node<T>& self) {
                          auto& x = *self.inputs[0];
                          if (!x.requires_grad) return;
                          permute_copy(self.grad.data(), out_dims, inverse, x.grad_ptr(), true);
                        });
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&] { return DimensionError("matmul: incompatible shapes " + sa.str() + " and " + sb.str()); };
  if (sa.rank() < 2 || sb.rank() < 2) throw mismatch();
  const Index m = sa[sa.rank() - 2], k = sa.back(), n = sb.back();
  if (sb[sb.rank() - 2] != k) throw mismatch();

  // Broadcast the leading (batch) dims, right aligned.
  const std::size_t ba = sa.rank() - 2, bb = sb.rank() - 2, br = std::max(ba, bb);
  std::vector<Index> batch(br), stride_a(br, 0), stride_b(br, 0);
  Index sa_acc = m * k, sb_acc = k * n;
  for (std::size_t i = br; i-- > 0;) {
    const std::ptrdiff_t ia = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(br - ba);
    const std::ptrdiff_t ib = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(br - bb);
    const Index da = ia >= 0 ? sa[static_cast<std::size_t>(ia)] : 1;
    const Index db = ib >= 0 ? sb[static_cast<std::size_t>(ib)] : 1;
    if (da != db && da != 1 && db != 1) throw mismatch();
    batch[i] = std::max(da, db);
    if (da != 1) stride_a[i] = sa_acc;
    if (db != 1) stride_b[i] = sb_acc;
    sa_acc *= da;
    sb_acc *= db;
  }
  Index batches = 1;
  for (Index d : batch) batches *= d;
  std::vector<Index> off_a(static_cast<std::size_t>(batches)), off_b(static_cast<std::size_t>(batches));
  {
    std::vector<Index> idx(br, 0);
    for (Index t = 0; t < batches; ++t) {
      Index oa = 0, ob = 0;
      for (std::size_t i = 0; i < br; ++i) {
        oa += idx[i] * stride_a[i];
        ob += idx[i] * stride_b[i];
      }
      off_a[static_cast<std::size_t>(t)] = oa;
      off_b[static_cast<std::size_t>(t)] = ob;
      for (std::size_t ax = br; ax-- > 0;) {
        if (++idx[ax] < batch[ax]) break;
        idx[ax] = 0;
      }
    }
  }

  std::vector<Index> out_dims = batch;
  out_dims.push_back(m);
  out_dims.push_back(n);
  auto out = buffer<T>(batches * m * n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (Index t = 0; t < batches; ++t) {
    kernels::parallel::gemm(kernels::Trans::kNo, kernels::Trans::kNo, m, n, k, pa + off_a[t], k, pb + off_b[t], n,
                            out.data() + t * m * n, n, false);
  }
  flops::add_macs(static_cast<std::uint64_t>(batches * m * n * k));

  return make_result<T>(Shape(out_dims), std::move(out), {a, b}, "matmul",
                        [m, n, k, batches, off_a, off_b](Node<T>& self) {
                          auto& x = *self.inputs[0];
                          auto& y = *self.inputs[1];
                          using kernels::Trans;
                          for (Index t = 0; t < batches; ++t) {
                            const T* g = self.grad.data() + t * m * n;
                            if (x.requires_grad) {
                              kernels::parallel::gemm(Trans::kNo, Trans::kYes, m, k, n, g, n,
                                                      y.data.data() + off_b[t], n, x.grad_ptr() + off_a[t], k,
                                                      true);
                            }
                            if (y.requires_grad) {
                              kernels::parallel::gemm(Trans::kYes, Trans::kNo, k, n, m, x.data.data() + off_a[t], k,
                                                      g, n, y.grad_ptr() + off_b[t], n, true);
                            }
                          }
                          flops::add_macs(static_cast<std::uint64_t>(2 * batches * m * n * k));
                        });
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                      const std::optional<BasicTensor<T>>& bias, Index stride, Index padding) {
  const Spatial sp = Spatial::of(input.shape(), "conv2d");
  const Shape& ws = weights.shape();
  if (ws.rank() != 4 || ws[1] != sp.channels) {
    throw DimensionError("conv2d: weights " + ws.str() + " incompatible with input " + input.shape().str());
  }
  if (ws[2] % 2 == 0 || ws[3] % 2 == 0) throw DimensionError("conv2d: kernel extents must be odd, got " + ws.str());
  if (stride < 1 || padding < 0) throw ContractError("conv2d: stride must be >= 1 and padding >= 0");
  if (ws[2] > sp.height + 2 * padding || ws[3] > sp.width + 2 * padding) {
    throw DimensionError("conv2d: kernel " + ws.str() + " larger than padded input " + input.shape().str());
  }
  const Index cout = ws[0];
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) {
    throw DimensionError("conv2d: bias " + bias->shape().str() + " does not match " + std::to_string(cout) +
                         " output channels");
  }
  const kernels::ConvGeometry g{sp.channels, sp.height, sp.width, ws[2], ws[3], stride, padding};
  const Index oh = g.out_height(), ow = g.out_width(), ohw = oh * ow;
  const Index kdim = g.patch_size(), ncols = sp.batch * ohw;
  const bool pointwise = ws[2] == 1 && ws[3] == 1 && stride == 1 && padding == 0;

  // Columns [K, B·OH·OW]; a 1x1 conv on a single image uses the input directly.
  auto cols = std::make_shared<Buffer<T>>();
  const T* colp = nullptr;
  const T* in = input.data().data();
  if (pointwise && sp.batch == 1) {
    colp = in;
  } else {
    cols->resize(static_cast<std::size_t>(kdim * ncols));
    for (Index b = 0; b < sp.batch; ++b) {
      kernels::parallel::im2col(g, in + b * sp.channels * sp.plane(), cols->data(), ncols, b * ohw);
    }
    colp = cols->data();
  }

  auto out = buffer<T>(sp.batch * cout * ohw);
  {
    Buffer<T> tmp;
    T* dst = out.data();
    if (sp.batch > 1) {
      tmp.resize(static_cast<std::size_t>(cout * ncols));
      dst = tmp.data();
    }
    kernels::parallel::gemm(kernels::Trans::kNo, kernels::Trans::kNo, cout, ncols, kdim, weights.data().data(), kdim,
                            colp, ncols, dst, ncols, false);
    if (sp.batch > 1) {
      for (Index b = 0; b < sp.batch; ++b) {
        for (Index c = 0; c < cout; ++c) {
          std::copy_n(tmp.data() + c * ncols + b * ohw, ohw, out.data() + (b * cout + c) * ohw);
        }
      }
    }
  }
  if (bias) {
    const auto bv = bias->data();
    for (Index b = 0; b < sp.batch; ++b) {
      for (Index c = 0; c < cout; ++c) {
        T* o = out.data() + (b * cout + c) * ohw;
        for (Index i = 0; i < ohw; ++i) o[i] += bv[c];
      }
    }
  }
  flops::add_macs(static_cast<std::uint64_t>(cout * ncols * kdim));

  std::vector<BasicTensor<T>> inputs{input, weights};
  if (bias) inputs.push_back(*bias);
  const bool direct = pointwise && sp.batch == 1;
  return make_result<T>(
      sp.with(cout, oh, ow), std::move(out), std::move(inputs), "conv2d",
      [g, sp, cout, ohw, kdim, ncols, cols, direct](Node<T>& self) {
        using kernels::Trans;
        auto& x = *self.inputs[0];
        auto& w = *self.inputs[1];
        // Output gradient as [Cout, B·OH·OW].
        const T* gmat = self.grad.data();
        Buffer<T> regrouped;
        if (sp.batch > 1) {
          regrouped.resize(static_cast<std::size_t>(cout * ncols));
          for (Index b = 0; b < sp.batch; ++b) {
            for (Index c = 0; c < cout; ++c) {
              std::copy_n(self.grad.data() + (b * cout + c) * ohw, ohw, regrouped.data() + c * ncols + b * ohw);
            }
          }
          gmat = regrouped.data();
        }
        const T* colp = direct ? x.data.data() : cols->data();
        if (w.requires_grad) {
          // dW^T [K, Cout] = cols [K, N] · gmat^T, then transpose-accumulate.
          Buffer<T> dwt(static_cast<std::size_t>(kdim * cout));
          kernels::parallel::gemm(Trans::kNo, Trans::kYes, kdim, cout, ncols, colp, ncols, gmat, ncols, dwt.data(),
                                  cout, false);
          T* gw = w.grad_ptr();
          for (Index c = 0; c < cout; ++c) {
            for (Index p = 0; p < kdim; ++p) gw[c * kdim + p] += dwt[p * cout + c];
          }
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
          T* gb = self.inputs[2]->grad_ptr();
          for (Index c = 0; c < cout; ++c) {
            T s = 0;
            for (Index i = 0; i < ncols; ++i) s += gmat[c * ncols + i];
            gb[c] += s;
          }
        }
        if (x.requires_grad) {
          T* gx = x.grad_ptr();
          if (direct) {
            kernels::parallel::gemm(Trans::kYes, Trans::kNo, kdim, ncols, cout, w.data.data(), kdim, gmat, ncols, gx,
                                    ncols, true);
          } else {
            Buffer<T> dcols(static_cast<std::size_t>(kdim * ncols));
            kernels::parallel::gemm(Trans::kYes, Trans::kNo, kdim, ncols, cout, w.data.data(), kdim, gmat, ncols,
                                    dcols.data(), ncols, false);
            for (Index b = 0; b < sp.batch; ++b) {
              kernels::parallel::col2im(g, dcols.data(), ncols, b * ohw, gx + b * sp.channels * sp.plane());
            }
          }
        }
        flops::add_macs(static_cast<std::uint64_t>(2 * cout * ncols * kdim));
      });
}

template <typename T>
BasicTensor<T> avgpool_lastdim(const BasicTensor<T>& t) {
  if (t.rank() < 1) throw DimensionError("avgpool_lastdim on a scalar");
  const Index len = t.shape().back();
  const Index half = (len + 1) / 2;
  const Index rows = t.numel() / len;
  std::vector<Index> dims = t.shape().dims();
  dims.back() = half;
  auto out = buffer<T>(rows * half);
  const auto in = t.data();
  for (Index r = 0; r < rows; ++r) {
    const T* src = in.data() + r * len;
    T* dst = out.data() + r * half;
    for (Index i = 0; i < half; ++i) {
      const T lo = src[2 * i];
      const T hi = 2 * i + 1 < len ? src[2 * i + 1] : lo;
      dst[i] = (lo + hi) / T(2);
    }
  }
  return make_result<T>(Shape(dims), std::move(out), {t}, "avgpool_lastdim", [rows, len, half](Node<T>& self) {
    auto& x = *self.inputs[0];
    if (!x.requires_grad) return;
    T* gx = x.grad_ptr();
    for (Index r = 0; r < rows; ++r) {
      const T* g = self.grad.data() + r * half;
      T* dst = gx + r * len;
      for (Index i = 0; i < half; ++i) {
        if (2 * i + 1 < len) {
          dst[2 * i] += g[i] / T(2);
          dst[2 * i + 1] += g[i] / T(2);
        } else {
          dst[2 * i] += g[i];
        }
      }
    }
  });
}

namespace {

// Two-tap linear resampling weights for doubling one axis.
struct UpTaps {
  std::vector<Index> lo, hi;
  std::vector<double> w_lo;

  explicit UpTaps(Index n) {
    for (Index o = 0; o < 2 * n; ++o) {
      const double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
      const double f = std::floor(src);
      const Index i0 = static_cast<Index>(f);
      const double frac = src - f;
      lo.push_back(std::clamp<Index>(i0, 0, n - 1));
      hi.push_back(std::clamp<Index>(i0 + 1, 0, n - 1));
      w_lo.push_back(1.0 - frac);
    }
  }
};

}  // namespace

template <typename T>
BasicTensor<T> interpolate2d(const BasicTensor<T>& t, int num, int den) {
  const Spatial sp = Spatial::of(t.shape(), "interpolate2d");
  const Index planes = sp.batch * sp.channels;
  if (num == den) return reshape(t, t.shape());
  if (num == 2 && den == 1) {
    const Index h = sp.height, w = sp.width, oh = 2 * h, ow = 2 * w;
    const UpTaps ty(h), tx(w);
    auto out = buffer<T>(planes * oh * ow);
    const auto in = t.data();
    for (Index p = 0; p < planes; ++p) {
      const T* src = in.data() + p * h * w;
      T* dst = out.data() + p * oh * ow;
      for (Index y = 0; y < oh; ++y) {
        const T wy = static_cast<T>(ty.w_lo[y]);
        const T* r0 = src + ty.lo[y] * w;
        const T* r1 = src + ty.hi[y] * w;
        for (Index x = 0; x < ow; ++x) {
          const T wx = static_cast<T>(tx.w_lo[x]);
          const T top = wx * r0[tx.lo[x]] + (T(1) - wx) * r0[tx.hi[x]];
          const T bot = wx * r1[tx.lo[x]] + (T(1) - wx) * r1[tx.hi[x]];
          dst[y * ow + x] = wy * top + (T(1) - wy) * bot;
        }
      }
    }
    return make_result<T>(sp.with(sp.channels, oh, ow), std::move(out), {t}, "upsample2x",
                          [planes, h, w, oh, ow, ty, tx](Node<T>& self) {
                            auto& x = *self.inputs[0];
                            if (!x.requires_grad) return;
                            T* gx = x.grad_ptr();
                            for (Index p = 0; p < planes; ++p) {
                              const T* g = self.grad.data() + p * oh * ow;
                              T* dst = gx + p * h * w;
                              for (Index y = 0; y < oh; ++y) {
                                const T wy = static_cast<T>(ty.w_lo[y]);
                                for (Index xo = 0; xo < ow; ++xo) {
                                  const T wx = static_cast<T>(tx.w_lo[xo]);
                                  const T gv = g[y * ow + xo];
                                  dst[ty.lo[y] * w + tx.lo[xo]] += gv * wy * wx;
                                  dst[ty.lo[y] * w + tx.hi[xo]] += gv * wy * (T(1) - wx);
                                  dst[ty.hi[y] * w + tx.lo[xo]] += gv * (T(1) - wy) * wx;
                                  dst[ty.hi[y] * w + tx.hi[xo]] += gv * (T(1) - wy) * (T(1) - wx);
                                }
                              }
                            }
                          });
  }
  if (num == 1 && den == 2) {
    if (sp.height % 2 || sp.width % 2) {
      throw DimensionError("interpolate2d: halving " + t.shape().str() + " gives non-integral extents");
    }
    const Index h = sp.height, w = sp.width, oh = h / 2, ow = w / 2;
    auto out = buffer<T>(planes * oh * ow);
    const auto in = t.data();
    for (Index p = 0; p < planes; ++p) {
      const T* src = in.data() + p * h * w;
      T* dst = out.data() + p * oh * ow;
      for (Index y = 0; y < oh; ++y) {
        for (Index x = 0; x < ow; ++x) {
          const T* s = src + 2 * y * w + 2 * x;
          dst[y * ow + x] = (s[0] + s[1] + s[w] + s[w + 1]) / T(4);
        }
      }
    }
    return make_result<T>(sp.with(sp.channels, oh, ow), std::move(out), {t}, "downsample2x",
                          [planes, h, w, oh, ow](Node<T>& self) {
                            auto& x = *self.inputs[0];
                            if (!x.requires_grad) return;
                            T* gx = x.grad_ptr();
                            for (Index p = 0; p < planes; ++p) {
                              const T* g = self.grad.data() + p * oh * ow;
                              T* dst = gx + p * h * w;
                              for (Index y = 0; y < oh; ++y) {
                                for (Index xo = 0; xo < ow; ++xo) {
                                  const T q = g[y * ow + xo] / T(4);
                                  T* d = dst + 2 * y * w + 2 * xo;
                                  d[0] += q;
                                  d[1] += q;
                                  d[w] += q;
                                  d[w + 1] += q;
                                }
                              }
                            }
                          });
  }
  throw ContractError("interpolate2d supports factors 1, 2 and 1/2 only, got " + std::to_string(num) + "/" +
                      std::to_string(den));
}

template <typename T>
BasicTensor<T> instance_norm(const BasicTensor<T>& x, T eps) {
  const Spatial sp = Spatial::of(x.shape(), "instance_norm");
  const Index planes = sp.batch * sp.channels, n = sp.plane();
  auto out = buffer<T>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(planes));
  const auto in = x.data();
  for (Index p = 0; p < planes; ++p) {
    const T* src = in.data() + p * n;
    T mu = 0;
    for (Index i = 0; i < n; ++i) mu += src[i];
    mu /= static_cast<T>(n);
    T var = 0;
    for (Index i = 0; i < n; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[p] = is;
    T* dst = out.data() + p * n;
    for (Index i = 0; i < n; ++i) dst[i] = (src[i] - mu) * is;
  }
  return make_result<T>(x.shape(), std::move(out), {x}, "instance_norm", [planes, n, inv_std](Node<T>& self) {
    auto& xn = *self.inputs[0];
    if (!xn.requires_grad) return;
    T* gx = xn.grad_ptr();
    for (Index p = 0; p < planes; ++p) {
      const T* g = self.grad.data() + p * n;
      const T* y = self.data.data() + p * n;
      T gm = 0, gy = 0;
      for (Index i = 0; i < n; ++i) {
        gm += g[i];
        gy += g[i] * y[i];
      }
      gm /= static_cast<T>(n);
      gy /= static_cast<T>(n);
      const T is = (*inv_std)[p];
      T* dst = gx + p * n;
      for (Index i = 0; i < n; ++i) dst[i] += is * (g[i] - gm - y[i] * gy);
    }
  });
}

template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          BasicTensor<T>& running_mean, BasicTensor<T>& running_var, bool training, T momentum,
                          T eps) {
  const Spatial sp = Spatial::of(x.shape(), "batch_norm");
  const Index c = sp.channels, n = sp.plane(), count = sp.batch * n;
  for (const BasicTensor<T>* p : {&gamma, &beta, static_cast<const BasicTensor<T>*>(&running_mean),
                                  static_cast<const BasicTensor<T>*>(&running_var)}) {
    if (p->rank() != 1 || p->dim(0) != c) {
      throw DimensionError("batch_norm: parameter " + p->shape().str() + " does not match " + x.shape().str());
    }
  }
  const auto in = x.data();
  std::vector<T> mu(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
  if (training) {
    if (count < 2) throw ContractError("batch_norm in training mode needs more than one value per channel");
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (Index ch = 0; ch < c; ++ch) {
      T m = 0;
      for (Index b = 0; b < sp.batch; ++b) {
        const T* src = in.data() + (b * c + ch) * n;
        for (Index i = 0; i < n; ++i) m += src[i];
      }
      m /= static_cast<T>(count);
      T v = 0;
      for (Index b = 0; b < sp.batch; ++b) {
        const T* src = in.data() + (b * c + ch) * n;
        for (Index i = 0; i < n; ++i) v += (src[i] - m) * (src[i] - m);
      }
      v /= static_cast<T>(count);
      mu[ch] = m;
      inv_std[ch] = T(1) / std::sqrt(v + eps);
      rm[ch] = (T(1) - momentum) * rm[ch] + momentum * m;
      rv[ch] = (T(1) - momentum) * rv[ch] + momentum * v * static_cast<T>(count) / static_cast<T>(count - 1);
    }
  } else {
    for (Index ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(running_var[ch] + eps);
    }
  }
  auto xhat = std::make_shared<Buffer<T>>(static_cast<std::size_t>(x.numel()));
  auto out = buffer<T>(x.numel());
  for (Index b = 0; b < sp.batch; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index base = (b * c + ch) * n;
      for (Index i = 0; i < n; ++i) {
        const T h = (in[base + i] - mu[ch]) * inv_std[ch];
        (*xhat)[base + i] = h;
        out[base + i] = gamma[ch] * h + beta[ch];
      }
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta}, "batch_norm",
      [sp, c, n, count, xhat, inv_std, training](Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& gn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        std::vector<T> gsum(static_cast<std::size_t>(c), 0), ghsum(static_cast<std::size_t>(c), 0);
        for (Index b = 0; b < sp.batch; ++b) {
          for (Index ch = 0; ch < c; ++ch) {
            const Index base = (b * c + ch) * n;
            for (Index i = 0; i < n; ++i) {
              gsum[ch] += self.grad[base + i];
              ghsum[ch] += self.grad[base + i] * (*xhat)[base + i];
            }
          }
        }
        if (gn.requires_grad) {
          T* g = gn.grad_ptr();
          for (Index ch = 0; ch < c; ++ch) g[ch] += ghsum[ch];
        }
        if (bn.requires_grad) {
          T* g = bn.grad_ptr();
          for (Index ch = 0; ch < c; ++ch) g[ch] += gsum[ch];
        }
        if (!xn.requires_grad) return;
        T* gx = xn.grad_ptr();
        for (Index b = 0; b < sp.batch; ++b) {
          for (Index ch = 0; ch < c; ++ch) {
            const Index base = (b * c + ch) * n;
            const T scale_c = gn.data[ch] * inv_std[ch];
            const T gm = gsum[ch] / static_cast<T>(count), ghm = ghsum[ch] / static_cast<T>(count);
            for (Index i = 0; i < n; ++i) {
              const T g = self.grad[base + i];
              gx[base + i] += training ? scale_c * (g - gm - (*xhat)[base + i] * ghm) : scale_c * g;
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> masked_l1_mean(const BasicTensor<T>& pred, const BasicTensor<T>& target, const BasicTensor<T>& mask) {
  require_same(pred.shape(), target.shape(), "masked_l1_mean");
  require_same(pred.shape(), mask.shape(), "masked_l1_mean");
  const auto p = pred.data(), t = target.data(), m = mask.data();
  Index valid = 0;
  T total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (m[i] > T(0)) {
      ++valid;
      total += std::abs(p[i] - t[i]);
    }
  }
  if (valid == 0) throw ContractError("masked_l1_mean: mask selects no pixels");
  const T inv = T(1) / static_cast<T>(valid);
  Buffer<T> out(1, total * inv);
  auto tgt = std::make_shared<Buffer<T>>(t.begin(), t.end());
  auto msk = std::make_shared<Buffer<T>>(m.begin(), m.end());
  return make_result<T>(Shape{}, std::move(out), {pred}, "masked_l1_mean", [tgt, msk, inv](Node<T>& self) {
    auto& x = *self.inputs[0];
    if (!x.requires_grad) return;
    T* g = x.grad_ptr();
    const T go = self.grad[0] * inv;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      if ((*msk)[i] <= T(0)) continue;
      const T diff = x.data[i] - (*tgt)[i];
      g[i] += diff > T(0) ? go : (diff < T(0) ? -go : T(0));
    }
  });
}

#define RSTEREO_INSTANTIATE(T)                                                                                 \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                     \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                                \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> tanh(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> gate_blend(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);     \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);                                         \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, std::size_t);                             \
  template BasicTensor<T> narrow(const BasicTensor<T>&, std::size_t, Index, Index);                            \
  template BasicTensor<T> reshape(const BasicTensor<T>&, const Shape&);                                        \
  template BasicTensor<T> permute(const BasicTensor<T>&, const std::vector<std::size_t>&);                     \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                                 \
                                 const std::optional<BasicTensor<T>>&, Index, Index);                          \
  template BasicTensor<T> avgpool_lastdim(const BasicTensor<T>&);                                              \
  template BasicTensor<T> interpolate2d(const BasicTensor<T>&, int, int);                                      \
  template BasicTensor<T> instance_norm(const BasicTensor<T>&, T);                                             \
  template BasicTensor<T> batch_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,      \
                                     BasicTensor<T>&, BasicTensor<T>&, bool, T, T);                            \
  template BasicTensor<T> masked_l1_mean(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);
RSTEREO_INSTANTIATE(float)
RSTEREO_INSTANTIATE(double)
#undef RSTEREO_INSTANTIATE

}  // namespace rstereo
