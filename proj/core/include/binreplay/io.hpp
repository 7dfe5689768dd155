#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "binreplay/binkernel.hpp"
#include "binreplay/qtensor.hpp"
#include "binreplay/tensor.hpp"

namespace binreplay {

/// Little-endian byte sink.
class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(uint16_t v) { put_le(v); }
  void u32(uint32_t v) { put_le(v); }
  void u64(uint64_t v) { put_le(v); }
  void i32(int32_t v) { put_le(static_cast<uint32_t>(v)); }
  void i64(int64_t v) { put_le(static_cast<uint64_t>(v)); }
  void f32(float v);
  void f64(double v);
  void bytes(std::string_view s) { buf_.append(s); }
  void str(std::string_view s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s);
  }

  [[nodiscard]] const std::string& buffer() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  template <class U>
  void put_le(U v) {
    for (size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

/// Little-endian byte source; every underrun throws FormatError.
class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  uint8_t u8() { return static_cast<uint8_t>(take(1)[0]); }
  uint16_t u16() { return get_le<uint16_t>(); }
  uint32_t u32() { return get_le<uint32_t>(); }
  uint64_t u64() { return get_le<uint64_t>(); }
  int32_t i32() { return static_cast<int32_t>(get_le<uint32_t>()); }
  int64_t i64() { return static_cast<int64_t>(get_le<uint64_t>()); }
  float f32();
  double f64();
  std::string_view bytes(size_t n) { return take(n); }
  std::string str() { return std::string(take(u32())); }
  void expect_magic(std::string_view magic, std::string_view what);

  [[nodiscard]] bool at_end() const { return pos_ == data_.size(); }
  [[nodiscard]] size_t position() const { return pos_; }

 private:
  std::string_view take(size_t n);
  template <class U>
  U get_le() {
    auto s = take(sizeof(U));
    U v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<uint8_t>(s[i])) << (8 * i);
    return v;
  }
  std::string_view data_;
  size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

/// dtype tags of the repo tensor format.
enum class DType : uint8_t { f32 = 0, i8 = 1, i16 = 2, i32 = 3, bitpacked = 4 };

using AnyTensor = std::variant<FloatTensor, QuantizedTensor, BitTensor>;

/// Tensor record: "QTNS", version, dtype, rank, u32 extents, then for
/// quantized dtypes f64 scale, i32 zero_point, u8 bits, then the payload.
/// The bits byte carries 0x80 when the grid is unsigned.
void write_tensor(ByteWriter& w, const FloatTensor& t);
void write_tensor(ByteWriter& w, const QuantizedTensor& t);
void write_tensor(ByteWriter& w, const BitTensor& t);

AnyTensor read_tensor(ByteReader& r);
FloatTensor read_float_tensor(ByteReader& r);
QuantizedTensor read_quantized_tensor(ByteReader& r);
BitTensor read_bit_tensor(ByteReader& r);

/// Lower-case hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

}  // namespace binreplay
