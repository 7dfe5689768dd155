#include "binreplay/binkernel.hpp"

#include <algorithm>
#include <string>

namespace binreplay {

BitTensor BitTensor::reshaped(Shape s) const {
  if (s.numel() != numel()) throw ValidationError("reshape " + shape_.str() + " -> " + s.str());
  BitTensor out;
  out.shape_ = std::move(s);
  out.words_ = words_;
  return out;
}

bool BitTensor::is_canonical() const {
  const int64_t n = numel();
  if (static_cast<int64_t>(words_.size()) != word_count(n)) return false;
  if (n % 64 == 0 || words_.empty()) return true;
  return (words_.back() >> (n % 64)) == 0;
}

BitTensor BitTensor::from_words(Shape shape, std::vector<uint64_t> words) {
  BitTensor out;
  out.shape_ = std::move(shape);
  out.words_ = std::move(words);
  if (!out.is_canonical()) throw FormatError("bit tensor payload has non-zero pad bits or wrong length");
  return out;
}

void BinConvSpec::validate() const {
  if (kernel_h < 1 || kernel_w < 1) throw ValidationError("conv kernel extents must be >= 1");
  if (stride < 1) throw ValidationError("conv stride must be >= 1");
  if (padding < 0) throw ValidationError("conv padding must be >= 0");
  if (in_channels < 1 || out_channels < 1) throw ValidationError("conv channel counts must be >= 1");
}

void copy_bits(const uint64_t* src, int64_t src_offset, uint64_t* dst, int64_t dst_offset, int64_t nbits) {
  while (nbits > 0) {
    const int64_t sw = src_offset >> 6, sb = src_offset & 63;
    const int64_t dw = dst_offset >> 6, db = dst_offset & 63;
    const int64_t take = std::min<int64_t>({nbits, 64 - sb, 64 - db});
    const uint64_t mask = take == 64 ? ~uint64_t{0} : ((uint64_t{1} << take) - 1);
    const uint64_t chunk = (src[sw] >> sb) & mask;
    dst[dw] = (dst[dw] & ~(mask << db)) | (chunk << db);
    src_offset += take;
    dst_offset += take;
    nbits -= take;
  }
}

BitTensor pack(std::span<const int> values, Shape shape) {
  if (shape.numel() != static_cast<int64_t>(values.size()))
    throw ValidationError("pack: value count does not match shape " + shape.str());
  BitTensor out(std::move(shape));
  for (size_t i = 0; i < values.size(); ++i) {
    if (values[i] == 1)
      out.set(static_cast<int64_t>(i), true);
    else if (values[i] != -1)
      throw ValidationError("pack: value " + std::to_string(values[i]) + " is not +1 or -1");
  }
  return out;
}

BitTensor pack(std::span<const int> values) {
  if (values.empty()) throw ValidationError("pack: empty input");
  return pack(values, Shape{static_cast<int64_t>(values.size())});
}

std::vector<int> unpack(const BitTensor& b) {
  std::vector<int> out(static_cast<size_t>(b.numel()));
  for (int64_t i = 0; i < b.numel(); ++i) out[i] = b.value(i);
  return out;
}

BitTensor binarize(const QuantizedTensor& q) {
  BitTensor out(q.shape);
  for (size_t i = 0; i < q.data.size(); ++i)
    if (q.data[i] >= q.params.zero_point) out.set(static_cast<int64_t>(i), true);
  return out;
}

Tensor to_real(const BitTensor& b) {
  Tensor out(b.shape());
  for (int64_t i = 0; i < b.numel(); ++i) out[i] = b.bit(i) ? 1.0 : -1.0;
  return out;
}

int64_t xnor_dot_words(const uint64_t* a, const uint64_t* b, int64_t words, int64_t nbits) {
  int64_t diff = 0;
  for (int64_t w = 0; w < words; ++w) diff += std::popcount(a[w] ^ b[w]);
  return nbits - 2 * diff;
}

int64_t xnor_dot(const BitTensor& a, const BitTensor& b) {
  if (a.numel() != b.numel())
    throw ValidationError("xnor_dot length mismatch: " + std::to_string(a.numel()) + " vs " +
                          std::to_string(b.numel()));
  return xnor_dot_words(a.words().data(), b.words().data(), static_cast<int64_t>(a.words().size()), a.numel());
}

PackedBitRows pack_rows(const BitTensor& m) {
  if (m.shape().rank() != 2) throw ValidationError("expected a rank-2 bit matrix, got " + m.shape().str());
  PackedBitRows out(m.shape()[0], m.shape()[1]);
  for (int64_t r = 0; r < out.rows; ++r) copy_bits(m.words().data(), r * out.cols, out.row(r), 0, out.cols);
  return out;
}

PackedBitRows pack_columns(const BitTensor& m) {
  if (m.shape().rank() != 2) throw ValidationError("expected a rank-2 bit matrix, got " + m.shape().str());
  const int64_t k = m.shape()[0], n = m.shape()[1];
  PackedBitRows out(n, k);
  for (int64_t r = 0; r < k; ++r)
    for (int64_t c = 0; c < n; ++c)
      if (m.bit(r * n + c)) out.row(c)[r >> 6] |= uint64_t{1} << (r & 63);
  return out;
}

IntTensor bin_matmul_rows(const PackedBitRows& a, const PackedBitRows& b) {
  if (a.cols != b.cols)
    throw ValidationError("bin_matmul inner dimensions differ: " + std::to_string(a.cols) + " vs " +
                          std::to_string(b.cols));
  IntTensor out(Shape{a.rows, b.rows});
  for (int64_t i = 0; i < a.rows; ++i) {
    const uint64_t* ar = a.row(i);
    int32_t* orow = out.data.data() + i * b.rows;
    for (int64_t j = 0; j < b.rows; ++j)
      orow[j] = static_cast<int32_t>(xnor_dot_words(ar, b.row(j), a.words_per_row, a.cols));
  }
  return out;
}

IntTensor bin_matmul(const BitTensor& a, const BitTensor& w) {
  if (a.shape().rank() != 2 || w.shape().rank() != 2)
    throw ValidationError("bin_matmul expects rank-2 operands");
  if (a.shape()[1] != w.shape()[0])
    throw ValidationError("bin_matmul shape mismatch: " + a.shape().str() + " x " + w.shape().str());
  return bin_matmul_rows(pack_rows(a), pack_columns(w));
}

PackedBitRows im2col_bits(const BitTensor& x, int64_t image, const BinConvSpec& spec) {
  const int64_t h = x.shape()[1], w = x.shape()[2], c = x.shape()[3];
  const int64_t ho = spec.out_h(h), wo = spec.out_w(w);
  PackedBitRows cols(ho * wo, spec.patch_size());
  const uint64_t* src = x.words().data();
  for (int64_t oy = 0; oy < ho; ++oy) {
    for (int64_t ox = 0; ox < wo; ++ox) {
      uint64_t* dst = cols.row(oy * wo + ox);
      int64_t off = 0;
      for (int64_t ky = 0; ky < spec.kernel_h; ++ky) {
        const int64_t iy = oy * spec.stride - spec.padding + ky;
        for (int64_t kx = 0; kx < spec.kernel_w; ++kx, off += c) {
          const int64_t ix = ox * spec.stride - spec.padding + kx;
          if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;  // -1 padding: bits stay clear
          copy_bits(src, ((image * h + iy) * w + ix) * c, dst, off, c);
        }
      }
    }
  }
  return cols;
}

IntTensor bin_conv2d(const BitTensor& x, const BitTensor& w, const BinConvSpec& spec) {
  spec.validate();
  if (x.shape().rank() != 4) throw ValidationError("bin_conv2d input must be NHWC, got " + x.shape().str());
  const Shape expect_w{spec.out_channels, spec.kernel_h, spec.kernel_w, spec.in_channels};
  if (w.shape() != expect_w)
    throw ValidationError("bin_conv2d weight shape " + w.shape().str() + " does not match spec " + expect_w.str());
  if (x.shape()[3] != spec.in_channels)
    throw ValidationError("bin_conv2d input channels " + std::to_string(x.shape()[3]) + " != spec " +
                          std::to_string(spec.in_channels));
  const int64_t n = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const int64_t ho = spec.out_h(h), wo = spec.out_w(wd);
  if (ho < 1 || wo < 1) throw ValidationError("bin_conv2d kernel larger than padded input");
  const PackedBitRows wrows = pack_rows(w.reshaped(Shape{spec.out_channels, spec.patch_size()}));
  IntTensor out(Shape{n, ho, wo, spec.out_channels});
  for (int64_t img = 0; img < n; ++img) {
    const IntTensor part = bin_matmul_rows(im2col_bits(x, img, spec), wrows);
    std::copy(part.data.begin(), part.data.end(), out.data.begin() + img * ho * wo * spec.out_channels);
  }
  return out;
}

}  // namespace binreplay
