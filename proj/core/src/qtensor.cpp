#include "binreplay/qtensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace binreplay {

bool is_supported_bitwidth(int bits) { return bits == 4 || bits == 8 || bits == 16 || bits == 32; }

void QuantParams::validate() const {
  if (!is_supported_bitwidth(bits))
    throw ValidationError("unsupported quantization bitwidth " + std::to_string(bits));
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ValidationError("quantization scale must be > 0");
  if (is_signed && zero_point != 0) throw ValidationError("signed quantization requires zero_point 0");
  if (!is_signed && (zero_point < 0 || zero_point > qmax()))
    throw ValidationError("zero_point outside unsigned range");
}

void RangeCalibrator::observe_one(double v) {
  if (!std::isfinite(v)) throw ValidationError("calibration sample is not finite");
  if (count_ == 0) {
    lo_ = hi_ = v;
  } else {
    lo_ = std::min(lo_, v);
    hi_ = std::max(hi_, v);
  }
  ++count_;
}

std::pair<double, double> RangeCalibrator::range() const {
  if (count_ == 0) throw ValidationError("no calibration data");
  if (lo_ == hi_) return {lo_ - 0.5, hi_ + 0.5};
  return {lo_, hi_};
}

QuantParams quant_params(double min, double max, int bits, bool is_signed) {
  if (!(min < max)) throw ValidationError("quant_params requires min < max");
  if (!is_supported_bitwidth(bits))
    throw ValidationError("unsupported quantization bitwidth " + std::to_string(bits));
  const double levels = std::ldexp(1.0, bits) - 1.0;
  QuantParams p;
  p.bits = bits;
  p.is_signed = is_signed;
  if (is_signed) {
    const double m = std::max(std::abs(min), std::abs(max));
    p.scale = 2.0 * m / levels;
    p.zero_point = 0;
  } else {
    p.scale = (max - min) / levels;
    const double zp = std::nearbyint(-min / p.scale);
    p.zero_point = static_cast<int64_t>(std::clamp(zp, 0.0, levels));
  }
  return p;
}

QuantParams dynamic_symmetric_params(std::span<const double> values, int bits) {
  double m = 0.0;
  for (double v : values) m = std::max(m, std::abs(v));
  if (m == 0.0 || !std::isfinite(m)) m = 1.0;
  return quant_params(-m, m, bits, true);
}

int64_t quantize_value(double v, const QuantParams& p) {
  // nearbyint under the default FE_TONEAREST mode is round-half-to-even.
  const double r = std::nearbyint(v / p.scale) + static_cast<double>(p.zero_point);
  const double lo = static_cast<double>(p.qmin());
  const double hi = static_cast<double>(p.qmax());
  if (!(r >= lo)) return p.qmin();  // also catches NaN
  if (r > hi) return p.qmax();
  return static_cast<int64_t>(r);
}

Tensor dequantize(const QuantizedTensor& q) {
  Tensor out(q.shape);
  for (size_t i = 0; i < q.data.size(); ++i)
    out.data[i] = static_cast<double>(q.data[i] - q.params.zero_point) * q.params.scale;
  return out;
}

FloatTensor dequantize_f32(const QuantizedTensor& q) { return dequantize(q).cast<float>(); }

void fake_quantize(std::span<double> values, const QuantParams& p) {
  for (double& v : values)
    v = static_cast<double>(quantize_value(v, p) - p.zero_point) * p.scale;
}

FixedPointMultiplier FixedPointMultiplier::from_ratio(double ratio) {
  if (!(ratio > 0.0) || !std::isfinite(ratio)) throw ValidationError("multiplier ratio must be > 0");
  int exp = 0;
  const double frac = std::frexp(ratio, &exp);  // ratio = frac * 2^exp, frac in [0.5, 1)
  auto mant = static_cast<uint64_t>(std::llround(std::ldexp(frac, 32)));
  if (mant == (uint64_t{1} << 32)) {
    mant >>= 1;
    ++exp;
  }
  return {static_cast<uint32_t>(mant), 32 - exp};
}

int64_t FixedPointMultiplier::apply(int64_t x) const {
  const __int128 prod = static_cast<__int128>(x) * static_cast<__int128>(mantissa);
  if (shift <= 0) {
    const int s = -shift;
    if (s >= 62) return x == 0 ? 0 : (x > 0 ? INT64_MAX : INT64_MIN);
    const __int128 r = prod << s;
    if (r > INT64_MAX) return INT64_MAX;
    if (r < INT64_MIN) return INT64_MIN;
    return static_cast<int64_t>(r);
  }
  if (shift >= 120) return 0;
  const __int128 one = 1;
  const __int128 q = prod >> shift;  // floor
  const __int128 rem = prod - (q << shift);
  const __int128 half = one << (shift - 1);
  __int128 r = q;
  if (rem > half || (rem == half && (q & 1) != 0)) r += 1;
  return static_cast<int64_t>(r);
}

QuantizedTensor requantize(const QuantizedTensor& q, const QuantParams& target) {
  q.params.validate();
  target.validate();
  QuantizedTensor out{q.shape, std::vector<int64_t>(q.data.size()), target};
  if (q.params == target) {
    out.data = q.data;
    return out;
  }
  const auto mult = FixedPointMultiplier::from_ratio(q.params.scale / target.scale);
  const int64_t lo = target.qmin();
  const int64_t hi = target.qmax();
  for (size_t i = 0; i < q.data.size(); ++i) {
    const int64_t centered = q.data[i] - q.params.zero_point;
    int64_t v = mult.apply(centered);
    // saturating add of the target zero-point
    if (v > hi - target.zero_point)
      v = hi;
    else if (v < lo - target.zero_point)
      v = lo;
    else
      v += target.zero_point;
    out.data[i] = v;
  }
  return out;
}

bool fits_int32_accumulator(const QuantParams& a, const QuantParams& b, int64_t inner) {
  const long double bound = static_cast<long double>(inner) * static_cast<long double>(a.max_offset()) *
                            static_cast<long double>(b.max_offset());
  return bound < 2147483648.0L;
}

namespace {

void require_matrix(const QuantizedTensor& t, const char* name) {
  if (t.shape.rank() != 2) throw ValidationError(std::string(name) + " must be a rank-2 matrix");
}

template <class Acc>
void int_gemm(const QuantizedTensor& a, const QuantizedTensor& b, bool b_t, int64_t m, int64_t k, int64_t n,
              double scale, std::vector<double>& out) {
  const int64_t za = a.params.zero_point;
  const int64_t zb = b.params.zero_point;
  std::vector<int64_t> brow(static_cast<size_t>(k));
  for (int64_t j = 0; j < n; ++j) {
    for (int64_t p = 0; p < k; ++p) brow[p] = (b_t ? b.data[j * k + p] : b.data[p * n + j]) - zb;
    for (int64_t i = 0; i < m; ++i) {
      const int64_t* arow = a.data.data() + i * k;
      Acc acc = 0;
      for (int64_t p = 0; p < k; ++p) acc += static_cast<Acc>(arow[p] - za) * static_cast<Acc>(brow[p]);
      out[i * n + j] = static_cast<double>(acc) * scale;
    }
  }
}

}  // namespace

QuantizedTensor qmatmul(const QuantizedTensor& a, const QuantizedTensor& b) {
  require_matrix(a, "qmatmul lhs");
  require_matrix(b, "qmatmul rhs");
  a.params.validate();
  b.params.validate();
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  if (b.shape[0] != k)
    throw ValidationError("qmatmul inner dimensions differ: " + a.shape.str() + " x " + b.shape.str());
  if (!fits_int32_accumulator(a.params, b.params, k))
    throw ValidationError("qmatmul: inner dimension " + std::to_string(k) +
                          " risks overflowing the 32-bit accumulator");
  QuantizedTensor out{Shape{m, n}, std::vector<int64_t>(static_cast<size_t>(m * n)),
                      QuantParams{32, a.params.scale * b.params.scale, 0, true}};
  const int64_t za = a.params.zero_point;
  const int64_t zb = b.params.zero_point;
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      int32_t acc = 0;
      for (int64_t p = 0; p < k; ++p)
        acc += static_cast<int32_t>(a.data[i * k + p] - za) * static_cast<int32_t>(b.data[p * n + j] - zb);
      out.data[i * n + j] = acc;
    }
  }
  return out;
}

Tensor qmatmul_real(const QuantizedTensor& a, const QuantizedTensor& b, bool b_transposed) {
  require_matrix(a, "qmatmul lhs");
  require_matrix(b, "qmatmul rhs");
  const int64_t m = a.shape[0], k = a.shape[1];
  const int64_t bk = b_transposed ? b.shape[1] : b.shape[0];
  const int64_t n = b_transposed ? b.shape[0] : b.shape[1];
  if (bk != k) throw ValidationError("qmatmul inner dimensions differ: " + a.shape.str() + " x " + b.shape.str());
  Tensor out(Shape{m, n});
  const double scale = a.params.scale * b.params.scale;
  const long double bound = static_cast<long double>(k) * static_cast<long double>(a.params.max_offset()) *
                            static_cast<long double>(b.params.max_offset());
  if (bound < 9.2e18L)
    int_gemm<int64_t>(a, b, b_transposed, m, k, n, scale, out.data);
  else
    int_gemm<__int128>(a, b, b_transposed, m, k, n, scale, out.data);
  return out;
}

}  // namespace binreplay
