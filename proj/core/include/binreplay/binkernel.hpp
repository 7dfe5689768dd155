#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <vector>

#include "binreplay/qtensor.hpp"
#include "binreplay/tensor.hpp"

namespace binreplay {

using IntTensor = DenseTensor<int32_t>;

/// Bitpacked tensor of +/-1 values.
///
/// Element i of the row-major flattening lives at bit (i % 64) of word i / 64.
/// A set bit encodes +1, a clear bit -1. Bits past numel() in the final word are
/// always zero, so word-wise equality is value equality.
class BitTensor {
 public:
  BitTensor() = default;
  /// All elements -1.
  explicit BitTensor(Shape shape)
      : shape_(std::move(shape)), words_(static_cast<size_t>(word_count(shape_.numel())), 0) {}

  static int64_t word_count(int64_t bits) { return (bits + 63) / 64; }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] int64_t numel() const { return shape_.numel(); }
  [[nodiscard]] std::span<const uint64_t> words() const { return words_; }
  std::span<uint64_t> mutable_words() { return words_; }

  [[nodiscard]] bool bit(int64_t i) const { return (words_[i >> 6] >> (i & 63)) & 1u; }
  /// +1 or -1.
  [[nodiscard]] int value(int64_t i) const { return bit(i) ? 1 : -1; }
  void set(int64_t i, bool positive) {
    const uint64_t m = uint64_t{1} << (i & 63);
    if (positive)
      words_[i >> 6] |= m;
    else
      words_[i >> 6] &= ~m;
  }
  [[nodiscard]] int64_t popcount() const {
    int64_t c = 0;
    for (auto w : words_) c += std::popcount(w);
    return c;
  }
  /// Reinterprets the same bits under a new shape with equal element count.
  [[nodiscard]] BitTensor reshaped(Shape s) const;
  /// True when every pad bit of the final word is zero.
  [[nodiscard]] bool is_canonical() const;

  /// Builds from raw words; throws FormatError if pad bits are set.
  static BitTensor from_words(Shape shape, std::vector<uint64_t> words);

  bool operator==(const BitTensor&) const = default;

 private:
  Shape shape_;
  std::vector<uint64_t> words_;
};

struct BinConvSpec {
  int64_t kernel_h = 3;
  int64_t kernel_w = 3;
  int64_t stride = 1;
  int64_t padding = 0;
  int64_t in_channels = 1;
  int64_t out_channels = 1;

  void validate() const;
  [[nodiscard]] int64_t patch_size() const { return kernel_h * kernel_w * in_channels; }
  [[nodiscard]] int64_t out_h(int64_t in_h) const { return (in_h + 2 * padding - kernel_h) / stride + 1; }
  [[nodiscard]] int64_t out_w(int64_t in_w) const { return (in_w + 2 * padding - kernel_w) / stride + 1; }
  bool operator==(const BinConvSpec&) const = default;
};

/// Matrix whose rows are independently bitpacked and word aligned.
struct PackedBitRows {
  int64_t rows = 0;
  int64_t cols = 0;
  int64_t words_per_row = 0;
  std::vector<uint64_t> words;

  PackedBitRows() = default;
  PackedBitRows(int64_t r, int64_t c)
      : rows(r), cols(c), words_per_row(BitTensor::word_count(c)),
        words(static_cast<size_t>(r * BitTensor::word_count(c)), 0) {}
  [[nodiscard]] const uint64_t* row(int64_t r) const { return words.data() + r * words_per_row; }
  uint64_t* row(int64_t r) { return words.data() + r * words_per_row; }
  [[nodiscard]] bool bit(int64_t r, int64_t c) const { return (row(r)[c >> 6] >> (c & 63)) & 1u; }
};

/// Copies `nbits` bits from `src` starting at bit `src_offset` to `dst` starting at
/// bit `dst_offset`. Destination bits outside the range are untouched.
void copy_bits(const uint64_t* src, int64_t src_offset, uint64_t* dst, int64_t dst_offset, int64_t nbits);

BitTensor pack(std::span<const int> values, Shape shape);
BitTensor pack(std::span<const int> values);
std::vector<int> unpack(const BitTensor& b);

/// Sign binarization: bit set iff value >= 0.
template <class T>
BitTensor binarize(const DenseTensor<T>& x) {
  BitTensor out(x.shape);
  auto words = out.mutable_words();
  for (size_t i = 0; i < x.data.size(); ++i)
    if (x.data[i] >= T{0}) words[i >> 6] |= uint64_t{1} << (i & 63);
  return out;
}
BitTensor binarize(const QuantizedTensor& q);

/// +/-1 expansion as reals.
Tensor to_real(const BitTensor& b);

/// sum_i a_i * b_i under +/-1 semantics: n - 2 * popcount(a XOR b).
int64_t xnor_dot(const BitTensor& a, const BitTensor& b);
int64_t xnor_dot_words(const uint64_t* a, const uint64_t* b, int64_t words, int64_t nbits);

/// Row-aligned view of a rank-2 BitTensor (rows of the matrix).
PackedBitRows pack_rows(const BitTensor& m);
/// Row-aligned view of the columns of a rank-2 BitTensor.
PackedBitRows pack_columns(const BitTensor& m);

/// (M x K) * (K x N) over +/-1; exact integers in [-K, K].
IntTensor bin_matmul(const BitTensor& a, const BitTensor& w);
/// rows_a (M x K) against rows_b (N x K): out[m, n] = xnor_dot(row m, row n).
IntTensor bin_matmul_rows(const PackedBitRows& a, const PackedBitRows& b);

/// Patches of one NHWC image as packed rows (Ho*Wo x kh*kw*Cin), in
/// (ky, kx, c) order. Padded positions are -1.
PackedBitRows im2col_bits(const BitTensor& x, int64_t image, const BinConvSpec& spec);

/// Binary convolution. x is NHWC, w is (Cout, kh, kw, Cin); output is
/// (N, Ho, Wo, Cout) with every element in [-K, K], K = kh*kw*Cin.
IntTensor bin_conv2d(const BitTensor& x, const BitTensor& w, const BinConvSpec& spec);

}  // namespace binreplay
