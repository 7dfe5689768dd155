#include "binreplay/io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace binreplay {

void ByteWriter::f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<uint64_t>(v)); }

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string_view ByteReader::take(size_t n) {
  if (n > data_.size() - pos_)
    throw FormatError("truncated data: need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_));
  auto s = data_.substr(pos_, n);
  pos_ += n;
  return s;
}

void ByteReader::expect_magic(std::string_view magic, std::string_view what) {
  if (data_.size() - pos_ < magic.size() || take(magic.size()) != magic)
    throw FormatError("bad magic: not a " + std::string(what) + " file");
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace {

constexpr std::string_view kTensorMagic = "QTNS";
constexpr uint8_t kTensorVersion = 1;
constexpr uint8_t kUnsignedFlag = 0x80;

void write_header(ByteWriter& w, DType dtype, const Shape& shape) {
  w.bytes(kTensorMagic);
  w.u8(kTensorVersion);
  w.u8(static_cast<uint8_t>(dtype));
  if (shape.rank() > 255) throw ValidationError("tensor rank exceeds 255");
  w.u8(static_cast<uint8_t>(shape.rank()));
  for (auto d : shape.dims()) {
    if (d > UINT32_MAX) throw ValidationError("tensor extent exceeds u32");
    w.u32(static_cast<uint32_t>(d));
  }
}

DType storage_dtype(int bits) {
  switch (bits) {
    case 4:
    case 8: return DType::i8;
    case 16: return DType::i16;
    case 32: return DType::i32;
    default: throw ValidationError("no storage dtype for " + std::to_string(bits) + " bits");
  }
}

}  // namespace

void write_tensor(ByteWriter& w, const FloatTensor& t) {
  write_header(w, DType::f32, t.shape);
  for (float v : t.data) w.f32(v);
}

void write_tensor(ByteWriter& w, const QuantizedTensor& t) {
  t.params.validate();
  const DType dt = storage_dtype(t.params.bits);
  write_header(w, dt, t.shape);
  w.f64(t.params.scale);
  if (t.params.zero_point > INT32_MAX) throw ValidationError("zero_point does not fit the i32 header field");
  w.i32(static_cast<int32_t>(t.params.zero_point));
  w.u8(static_cast<uint8_t>(t.params.bits | (t.params.is_signed ? 0 : kUnsignedFlag)));
  for (int64_t v : t.data) {
    // Two's complement for signed grids, plain binary for unsigned ones.
    const auto raw = static_cast<uint64_t>(v);
    switch (dt) {
      case DType::i8: w.u8(static_cast<uint8_t>(raw)); break;
      case DType::i16: w.u16(static_cast<uint16_t>(raw)); break;
      default: w.u32(static_cast<uint32_t>(raw)); break;
    }
  }
}

void write_tensor(ByteWriter& w, const BitTensor& t) {
  write_header(w, DType::bitpacked, t.shape());
  w.u64(static_cast<uint64_t>(t.numel()));
  for (auto word : t.words()) w.u64(word);
}

AnyTensor read_tensor(ByteReader& r) {
  r.expect_magic(kTensorMagic, "tensor");
  const uint8_t version = r.u8();
  if (version != kTensorVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
  const uint8_t dtype = r.u8();
  const uint8_t rank = r.u8();
  std::vector<int64_t> dims(rank);
  for (auto& d : dims) {
    d = r.u32();
    if (d == 0) throw FormatError("tensor extent of zero");
  }
  Shape shape(std::move(dims));
  const auto n = static_cast<size_t>(shape.numel());
  switch (static_cast<DType>(dtype)) {
    case DType::f32: {
      FloatTensor t(shape);
      for (auto& v : t.data) v = r.f32();
      return t;
    }
    case DType::i8:
    case DType::i16:
    case DType::i32: {
      QuantizedTensor q;
      q.shape = shape;
      q.params.scale = r.f64();
      q.params.zero_point = r.i32();
      const uint8_t bits = r.u8();
      q.params.is_signed = (bits & kUnsignedFlag) == 0;
      q.params.bits = bits & 0x7f;
      try {
        q.params.validate();
      } catch (const ValidationError& e) {
        throw FormatError(std::string("bad quantization header: ") + e.what());
      }
      if (storage_dtype(q.params.bits) != static_cast<DType>(dtype))
        throw FormatError("dtype tag does not match quantization bits");
      q.data.resize(n);
      const bool sgn = q.params.is_signed;
      for (auto& v : q.data) {
        switch (static_cast<DType>(dtype)) {
          case DType::i8: {
            const uint8_t b = r.u8();
            v = sgn ? static_cast<int8_t>(b) : static_cast<int64_t>(b);
            break;
          }
          case DType::i16: {
            const uint16_t b = r.u16();
            v = sgn ? static_cast<int16_t>(b) : static_cast<int64_t>(b);
            break;
          }
          default: {
            const uint32_t b = r.u32();
            v = sgn ? static_cast<int32_t>(b) : static_cast<int64_t>(b);
            break;
          }
        }
        if (v < q.params.qmin() || v > q.params.qmax()) throw FormatError("stored value outside its grid");
      }
      return q;
    }
    case DType::bitpacked: {
      const uint64_t len = r.u64();
      if (len != n) throw FormatError("bit tensor length does not match its shape");
      std::vector<uint64_t> words(static_cast<size_t>(BitTensor::word_count(static_cast<int64_t>(n))));
      for (auto& w : words) w = r.u64();
      return BitTensor::from_words(shape, std::move(words));
    }
  }
  throw FormatError("unknown tensor dtype tag " + std::to_string(dtype));
}

FloatTensor read_float_tensor(ByteReader& r) {
  auto t = read_tensor(r);
  if (auto* f = std::get_if<FloatTensor>(&t)) return std::move(*f);
  throw FormatError("expected an f32 tensor");
}

QuantizedTensor read_quantized_tensor(ByteReader& r) {
  auto t = read_tensor(r);
  if (auto* q = std::get_if<QuantizedTensor>(&t)) return std::move(*q);
  throw FormatError("expected a quantized tensor");
}

BitTensor read_bit_tensor(ByteReader& r) {
  auto t = read_tensor(r);
  if (auto* b = std::get_if<BitTensor>(&t)) return std::move(*b);
  throw FormatError("expected a bitpacked tensor");
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

}  // namespace binreplay
