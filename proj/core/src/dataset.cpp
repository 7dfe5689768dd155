#include "binreplay/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "binreplay/io.hpp"
#include "binreplay/rng.hpp"

namespace binreplay {

namespace {

constexpr std::string_view kMagic = "BRDS";
constexpr uint32_t kVersion = 1;

}  // namespace

void Dataset::validate() const {
  if (num_classes < 1 || num_classes > 65535) throw ValidationError("class count must be in [1, 65535]");
  if (inputs.size() != labels.size()) throw ValidationError("input and label counts differ");
  for (size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].shape != input_shape)
      throw ValidationError("sample " + std::to_string(i) + " has shape " + inputs[i].shape.str() + ", expected " +
                            input_shape.str());
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw ValidationError("sample " + std::to_string(i) + " label " + std::to_string(labels[i]) +
                            " outside the class count");
  }
}

Tensor Dataset::batch(std::span<const int64_t> indices) const {
  if (indices.empty()) throw ValidationError("empty batch");
  const int64_t n = input_shape.numel();
  std::vector<int64_t> dims{static_cast<int64_t>(indices.size())};
  dims.insert(dims.end(), input_shape.dims().begin(), input_shape.dims().end());
  Tensor out{Shape(dims)};
  for (size_t i = 0; i < indices.size(); ++i) {
    const auto& src = inputs.at(indices[i]).data;
    std::copy(src.begin(), src.end(), out.data.begin() + static_cast<int64_t>(i) * n);
  }
  return out;
}

std::vector<int> Dataset::batch_labels(std::span<const int64_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  ds.validate();
  ByteWriter w;
  w.bytes(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<uint32_t>(ds.size()));
  w.u8(static_cast<uint8_t>(ds.input_shape.rank()));
  for (auto d : ds.input_shape.dims()) w.u32(static_cast<uint32_t>(d));
  w.u16(static_cast<uint16_t>(ds.num_classes));
  for (int64_t i = 0; i < ds.size(); ++i) {
    write_tensor(w, ds.inputs[i]);
    w.u16(static_cast<uint16_t>(ds.labels[i]));
  }
  write_file_atomic(path, w.buffer());
}

Dataset read_dataset(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  ByteReader r(bytes);
  r.expect_magic(kMagic, "dataset");
  if (r.u32() != kVersion) throw FormatError("unsupported dataset version");
  Dataset ds;
  const uint32_t n = r.u32();
  std::vector<int64_t> dims(r.u8());
  for (auto& d : dims) d = r.u32();
  try {
    ds.input_shape = Shape(std::move(dims));
  } catch (const ValidationError& e) {
    throw FormatError(std::string("bad dataset shape: ") + e.what());
  }
  ds.num_classes = r.u16();
  ds.inputs.reserve(n);
  ds.labels.reserve(n);
  for (uint32_t i = 0; i < n; ++i) {
    ds.inputs.push_back(read_float_tensor(r));
    ds.labels.push_back(r.u16());
  }
  if (!r.at_end()) throw FormatError("trailing bytes after dataset");
  try {
    ds.validate();
  } catch (const ValidationError& e) {
    throw FormatError(std::string("invalid dataset: ") + e.what());
  }
  return ds;
}

namespace {

/// Sum of a few random oriented waves and blobs per channel.
std::vector<double> prototype(const Shape& s, Rng& rng) {
  const int64_t h = s[0], w = s[1], c = s[2];
  std::vector<double> img(static_cast<size_t>(h * w * c), 0.0);
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int k = 0; k < 3; ++k) {
      const double fx = rng.uniform(-2.0, 2.0) * 2.0 * std::numbers::pi / static_cast<double>(w);
      const double fy = rng.uniform(-2.0, 2.0) * 2.0 * std::numbers::pi / static_cast<double>(h);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double amp = rng.uniform(0.5, 1.0);
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) img[(y * w + x) * c + ch] += amp * std::cos(fx * x + fy * y + phase);
    }
    for (int k = 0; k < 2; ++k) {
      const double cy = rng.uniform(0.0, static_cast<double>(h)), cx = rng.uniform(0.0, static_cast<double>(w));
      const double r = rng.uniform(1.5, 4.0);
      const double amp = rng.uniform(-2.0, 2.0);
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          img[(y * w + x) * c + ch] += amp * std::exp(-d2 / (2.0 * r * r));
        }
    }
  }
  return img;
}

FloatTensor make_sample(const std::vector<double>& proto, const Shape& s, const SynthOptions& opt, Rng& rng) {
  const int64_t h = s[0], w = s[1], c = s[2];
  const int64_t span = 2 * opt.max_shift + 1;
  const int64_t dy = static_cast<int64_t>(rng.below(span)) - opt.max_shift;
  const int64_t dx = static_cast<int64_t>(rng.below(span)) - opt.max_shift;
  const double gain = rng.uniform(0.8, 1.2);
  FloatTensor out(s);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      // shifted with edge clamping
      const int64_t sy = std::clamp<int64_t>(y - dy, 0, h - 1), sx = std::clamp<int64_t>(x - dx, 0, w - 1);
      for (int64_t ch = 0; ch < c; ++ch)
        out[(y * w + x) * c + ch] =
            static_cast<float>(gain * proto[(sy * w + sx) * c + ch] + opt.noise * rng.normal());
    }
  return out;
}

}  // namespace

std::pair<Dataset, Dataset> synthesize(const SynthOptions& opt) {
  if (opt.classes < 2) throw ValidationError("synth needs at least 2 classes");
  if (opt.samples_per_class < 2) throw ValidationError("synth needs at least 2 samples per class");
  if (opt.input_shape.rank() != 3) throw ValidationError("synth input shape must be (H, W, C)");
  if (opt.max_shift < 0 || opt.noise < 0.0) throw ValidationError("synth shift and noise must be >= 0");
  if (!(opt.test_fraction > 0.0 && opt.test_fraction < 1.0)) throw ValidationError("test fraction must be in (0, 1)");
  Rng rng(opt.seed);
  Dataset train{opt.input_shape, opt.classes, {}, {}};
  Dataset test = train;
  const int n_test = std::max(1, static_cast<int>(std::lround(opt.samples_per_class * opt.test_fraction)));
  for (int cls = 0; cls < opt.classes; ++cls) {
    const auto proto = prototype(opt.input_shape, rng);
    for (int i = 0; i < opt.samples_per_class; ++i) {
      Dataset& dst = i < opt.samples_per_class - n_test ? train : test;
      dst.inputs.push_back(make_sample(proto, opt.input_shape, opt, rng));
      dst.labels.push_back(cls);
    }
  }
  return {std::move(train), std::move(test)};
}

namespace {

uint32_t read_be32(ByteReader& r) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | r.u8();
  return v;
}

}  // namespace

Dataset import_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const std::string ib = read_file(images), lb = read_file(labels);
  ByteReader ir(ib), lr(lb);
  const uint32_t im = read_be32(ir), lm = read_be32(lr);
  if ((im >> 8) != 0x08 || ((im & 0xff) != 3 && (im & 0xff) != 4)) throw FormatError("not a u8 IDX image file");
  if (lm != 0x0801) throw FormatError("not a u8 IDX label file");
  const int rank = static_cast<int>(im & 0xff);
  const uint32_t n = read_be32(ir);
  std::vector<int64_t> dims;
  for (int i = 1; i < rank; ++i) dims.push_back(read_be32(ir));
  if (rank == 3) dims.push_back(1);
  if (read_be32(lr) != n) throw FormatError("IDX image and label counts differ");
  Dataset ds;
  ds.input_shape = Shape(dims);
  const int64_t per = ds.input_shape.numel();
  int max_label = 0;
  for (uint32_t i = 0; i < n; ++i) {
    FloatTensor t(ds.input_shape);
    const auto px = ir.bytes(static_cast<size_t>(per));
    for (int64_t j = 0; j < per; ++j) t[j] = static_cast<float>(static_cast<uint8_t>(px[j])) / 255.0f;
    ds.inputs.push_back(std::move(t));
    ds.labels.push_back(lr.u8());
    max_label = std::max(max_label, ds.labels.back());
  }
  ds.num_classes = max_label + 1;
  return ds;
}

}  // namespace binreplay
