#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "binreplay/tensor.hpp"

namespace binreplay {

/// Per-tensor affine quantization: real = (stored - zero_point) * scale.
///
/// Forward activations use the unsigned-affine form; weights and gradients use
/// the signed-symmetric form (zero_point == 0). `bits` is one of {4, 8, 16, 32};
/// 4 is reserved for binary-layer latent grids.
struct QuantParams {
  int bits = 8;
  double scale = 1.0;
  int64_t zero_point = 0;
  bool is_signed = true;

  [[nodiscard]] int64_t qmin() const { return is_signed ? -(int64_t{1} << (bits - 1)) : 0; }
  [[nodiscard]] int64_t qmax() const {
    return is_signed ? (int64_t{1} << (bits - 1)) - 1 : (int64_t{1} << bits) - 1;
  }
  /// Largest |stored - zero_point| reachable on this grid.
  [[nodiscard]] int64_t max_offset() const {
    return std::max(zero_point - qmin(), qmax() - zero_point);
  }
  void validate() const;

  bool operator==(const QuantParams&) const = default;
};

bool is_supported_bitwidth(int bits);

struct QuantizedTensor {
  Shape shape;
  std::vector<int64_t> data;
  QuantParams params;

  [[nodiscard]] int64_t numel() const { return static_cast<int64_t>(data.size()); }
  bool operator==(const QuantizedTensor&) const = default;
};

/// Streaming min/max observer used to calibrate activation ranges.
class RangeCalibrator {
 public:
  template <class T>
  void observe(std::span<const T> values) {
    for (T v : values) observe_one(static_cast<double>(v));
  }
  template <class T>
  void observe(const DenseTensor<T>& t) {
    observe(t.values());
  }
  [[nodiscard]] bool empty() const { return count_ == 0; }
  /// Observed (min, max); a degenerate range is widened by 0.5 on each side.
  [[nodiscard]] std::pair<double, double> range() const;

 private:
  void observe_one(double v);
  double lo_ = 0.0;
  double hi_ = 0.0;
  int64_t count_ = 0;
};

template <class T>
std::pair<double, double> calibrate_range(std::span<const DenseTensor<T>> samples) {
  RangeCalibrator c;
  for (const auto& s : samples) c.observe(s);
  return c.range();
}

template <class T>
std::pair<double, double> calibrate_range(const std::vector<DenseTensor<T>>& samples) {
  return calibrate_range(std::span<const DenseTensor<T>>(samples));
}

QuantParams quant_params(double min, double max, int bits, bool is_signed);

/// Signed-symmetric parameters sized to the tensor's own max |value|. An
/// all-zero tensor gets a unit range so that zero stays exactly representable.
QuantParams dynamic_symmetric_params(std::span<const double> values, int bits);

/// round-half-to-even(v / scale) + zero_point, saturated to the grid.
int64_t quantize_value(double v, const QuantParams& p);

template <class T>
QuantizedTensor quantize(const DenseTensor<T>& x, const QuantParams& p) {
  p.validate();
  QuantizedTensor q{x.shape, std::vector<int64_t>(x.data.size()), p};
  for (size_t i = 0; i < x.data.size(); ++i) q.data[i] = quantize_value(x.data[i], p);
  return q;
}

Tensor dequantize(const QuantizedTensor& q);
FloatTensor dequantize_f32(const QuantizedTensor& q);

/// In-place snap of every value onto the grid of `p` (quantize then dequantize).
void fake_quantize(std::span<double> values, const QuantParams& p);

/// Scale ratio held as a 32-bit mantissa and a power-of-two exponent:
/// ratio ~= mantissa * 2^-shift, mantissa in [2^31, 2^32).
struct FixedPointMultiplier {
  uint32_t mantissa = 0;
  int shift = 0;

  static FixedPointMultiplier from_ratio(double ratio);
  /// round-half-to-even(x * mantissa * 2^-shift), exact in 128-bit.
  [[nodiscard]] int64_t apply(int64_t x) const;
};

/// Re-grid `q` onto `target` using only integer arithmetic.
QuantizedTensor requantize(const QuantizedTensor& q, const QuantParams& target);

/// True when inner * max|a - za| * max|b - zb| < 2^31.
bool fits_int32_accumulator(const QuantParams& a, const QuantParams& b, int64_t inner);

/// Integer GEMM with 32-bit accumulators: (M x K) * (K x N). The result holds
/// the raw accumulators with scale = scale_a * scale_b, zero_point 0, 32 bits.
/// Throws ValidationError when the accumulator precondition is violated.
QuantizedTensor qmatmul(const QuantizedTensor& a, const QuantizedTensor& b);

/// Exact integer GEMM for any supported widths (64- or 128-bit accumulation),
/// returned as reals: out[m, n] = scale_a * scale_b * sum_k (a - za)(b - zb).
/// With `b_transposed`, b is laid out (N x K).
Tensor qmatmul_real(const QuantizedTensor& a, const QuantizedTensor& b, bool b_transposed = false);

}  // namespace binreplay
