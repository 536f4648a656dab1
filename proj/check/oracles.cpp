#include <algorithm>
#include <cmath>

#include "rstereo/check.hpp"

namespace rstereo::check::oracle {

std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, Index m, Index k, Index n) {
  std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j)
      for (Index p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

std::vector<double> conv2d(const std::vector<double>& input, Index c, Index h, Index w,
                           const std::vector<double>& weights, Index o, Index kh, Index kw, Index stride,
                           Index padding) {
  const Index oh = (h + 2 * padding - kh) / stride + 1, ow = (w + 2 * padding - kw) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(o * oh * ow), 0.0);
  for (Index oc = 0; oc < o; ++oc)
    for (Index y = 0; y < oh; ++y)
      for (Index x = 0; x < ow; ++x) {
        double s = 0;
        for (Index ic = 0; ic < c; ++ic)
          for (Index ky = 0; ky < kh; ++ky)
            for (Index kx = 0; kx < kw; ++kx) {
              const Index iy = y * stride - padding + ky, ix = x * stride - padding + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              s += input[(ic * h + iy) * w + ix] * weights[((oc * c + ic) * kh + ky) * kw + kx];
            }
        out[(oc * oh + y) * ow + x] = s;
      }
  return out;
}

std::vector<double> volume(const std::vector<double>& f, const std::vector<double>& g, Index d, Index h, Index w,
                           double scale) {
  std::vector<double> c(static_cast<std::size_t>(h * w * w), 0.0);
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j)
      for (Index k = 0; k < w; ++k) {
        double s = 0;
        for (Index p = 0; p < d; ++p) s += f[(p * h + i) * w + j] * g[(p * h + i) * w + k];
        c[(i * w + j) * w + k] = scale * s;
      }
  return c;
}

std::vector<double> pairwise_mean(const std::vector<double>& row) {
  std::vector<double> out;
  for (std::size_t i = 0; i < row.size(); i += 2) {
    const double b = i + 1 < row.size() ? row[i + 1] : row[i];
    out.push_back((row[i] + b) / 2);
  }
  return out;
}

std::vector<double> lookup(const std::vector<std::vector<double>>& levels, const std::vector<Index>& level_widths,
                           const std::vector<double>& disparity, Index h, Index w, int radius) {
  const Index taps = 2 * radius + 1;
  const Index ch = taps * static_cast<Index>(levels.size());
  std::vector<double> out(static_cast<std::size_t>(ch * h * w), 0.0);
  for (std::size_t k = 0; k < levels.size(); ++k) {
    const Index wk = level_widths[k];
    auto at = [&](Index i, Index j, Index t) {
      return (t < 0 || t >= wk) ? 0.0 : levels[k][static_cast<std::size_t>((i * w + j) * wk + t)];
    };
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j)
        for (Index o = -radius; o <= radius; ++o) {
          const double x = (static_cast<double>(j) - disparity[i * w + j]) / std::ldexp(1.0, static_cast<int>(k)) + o;
          const double x0 = std::floor(x);
          const double a = x - x0;
          const Index t = static_cast<Index>(x0);
          const Index c = static_cast<Index>(k) * taps + o + radius;
          out[(c * h + i) * w + j] = (1 - a) * at(i, j, t) + a * at(i, j, t + 1);
        }
  }
  return out;
}

double ScalarGru::operator()(double h, double x) const {
  const auto sig = [](double v) { return 1 / (1 + std::exp(-v)); };
  const double z = sig(wz_h * h + wz_x * x + bz);
  const double r = sig(wr_h * h + wr_x * x + br);
  const double q = std::tanh(wq_h * r * h + wq_x * x + bq);
  return (1 - z) * h + z * q;
}

std::vector<double> convex_upsample(const std::vector<double>& d, const std::vector<double>& logits, Index h, Index w,
                                    Index s) {
  std::vector<double> out(static_cast<std::size_t>(h * s * w * s));
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index a = 0; a < s; ++a)
        for (Index b = 0; b < s; ++b) {
          double wts[9], total = 0, acc = 0;
          for (int n = 0; n < 9; ++n) {
            wts[n] = std::exp(logits[((n * s * s + a * s + b) * h + y) * w + x]);
            total += wts[n];
          }
          for (int n = 0; n < 9; ++n) {
            const Index yy = std::clamp<Index>(y + n / 3 - 1, 0, h - 1);
            const Index xx = std::clamp<Index>(x + n % 3 - 1, 0, w - 1);
            acc += wts[n] / total * static_cast<double>(s) * d[yy * w + xx];
          }
          out[(y * s + a) * w * s + x * s + b] = acc;
        }
  return out;
}

}  // namespace rstereo::check::oracle
