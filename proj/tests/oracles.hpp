#pragma once

// Reference implementations used only by the tests. They are written as
// plainly as possible and share no code with the library kernels.

#include <cmath>
#include <cstdint>
#include <vector>

#include "binreplay/autograd.hpp"
#include "binreplay/rng.hpp"

namespace oracle {

using binreplay::Rng;

/// Round half to even without relying on the floating-point environment.
inline double round_half_even(double x) {
  const double f = std::floor(x);
  const double d = x - f;
  if (d < 0.5) return f;
  if (d > 0.5) return f + 1.0;
  return std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
}

inline std::vector<int> random_pm1(Rng& rng, int64_t n) {
  std::vector<int> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.below(2) ? 1 : -1;
  return v;
}

/// (M x K) * (K x N) over plain ints.
inline std::vector<int64_t> int_gemm(const std::vector<int>& a, const std::vector<int>& b, int64_t m, int64_t k,
                                     int64_t n) {
  std::vector<int64_t> out(static_cast<size_t>(m * n), 0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;  // float accumulation of small integers is exact
      for (int64_t p = 0; p < k; ++p) acc += static_cast<double>(a[i * k + p]) * static_cast<double>(b[p * n + j]);
      out[i * n + j] = static_cast<int64_t>(acc);
    }
  return out;
}

/// Direct NHWC convolution with a fill value for out-of-image taps.
inline std::vector<double> conv_nhwc(const std::vector<double>& x, int64_t n, int64_t h, int64_t w, int64_t c,
                                     const std::vector<double>& wt, int64_t co, int64_t kh, int64_t kw,
                                     int64_t stride, int64_t pad, double fill) {
  const int64_t ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<size_t>(n * ho * wo * co), 0.0);
  for (int64_t b = 0; b < n; ++b)
    for (int64_t oy = 0; oy < ho; ++oy)
      for (int64_t ox = 0; ox < wo; ++ox)
        for (int64_t o = 0; o < co; ++o) {
          double acc = 0.0;
          for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx)
              for (int64_t ci = 0; ci < c; ++ci) {
                const int64_t iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                const double v = (iy < 0 || iy >= h || ix < 0 || ix >= w) ? fill : x[((b * h + iy) * w + ix) * c + ci];
                acc += v * wt[((o * kh + ky) * kw + kx) * c + ci];
              }
          out[((b * ho + oy) * wo + ox) * co + o] = acc;
        }
  return out;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  long double ab = 0, aa = 0, bb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<long double>(a[i]) * b[i];
    aa += static_cast<long double>(a[i]) * a[i];
    bb += static_cast<long double>(b[i]) * b[i];
  }
  if (aa == 0 && bb == 0) return 1.0;
  if (aa == 0 || bb == 0) return 0.0;
  return static_cast<double>(ab / std::sqrt(aa * bb));
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  long double d = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    d += static_cast<long double>(a[i] - b[i]) * (a[i] - b[i]);
    na += static_cast<long double>(a[i]) * a[i];
    nb += static_cast<long double>(b[i]) * b[i];
  }
  const long double den = std::sqrt(std::max(na, nb));
  return den == 0 ? 0.0 : static_cast<double>(std::sqrt(d) / den);
}

/// Scalar probe loss sum(r * y) of a graph output; `r` fixed per instance.
inline double probe_loss(const binreplay::Graph& g, const binreplay::Tensor& x, const binreplay::Tensor& r) {
  const auto y = g.forward(x, binreplay::Mode::infer);
  long double s = 0;
  for (int64_t i = 0; i < y.numel(); ++i) s += static_cast<long double>(y[i]) * r[i];
  return static_cast<double>(s);
}

/// Central finite difference of probe_loss with respect to every entry of `v`.
template <class Setter>
std::vector<double> central_difference(std::vector<double>& v, double h, Setter&& eval) {
  std::vector<double> g(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + h;
    const double up = eval();
    v[i] = keep - h;
    const double down = eval();
    v[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

}  // namespace oracle
