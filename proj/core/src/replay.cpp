#include "binreplay/replay.hpp"

#include <numeric>

namespace binreplay {

namespace {

constexpr std::string_view kMagic = "BRRM";
constexpr uint32_t kVersion = 1;
// per bucket: class id (16), stored count (32), stream counter (64)
constexpr int64_t kBucketBookkeepingBits = 16 + 32 + 64;

}  // namespace

ReplayMemory::ReplayMemory(int64_t quota, int64_t max_classes, Shape latent_shape)
    : quota_(quota), max_classes_(max_classes), shape_(std::move(latent_shape)) {
  if (quota < 1) throw ValidationError("replay quota N must be >= 1");
  if (max_classes < 1 || max_classes > 65535) throw ValidationError("replay class count must be in [1, 65535]");
  if (shape_.rank() == 0) throw ValidationError("replay latent shape is empty");
}

void ReplayMemory::update_after_experience(const std::vector<LatentSample>& new_samples, Rng& rng) {
  for (const auto& s : new_samples) {
    if (s.activation.shape() != shape_)
      throw ValidationError("latent shape " + s.activation.shape().str() + " does not match memory shape " +
                            shape_.str());
    if (s.label < 0 || s.label >= max_classes_)
      throw ValidationError("latent label " + std::to_string(s.label) + " outside [0, " +
                            std::to_string(max_classes_) + ")");
  }
  for (const auto& s : new_samples) {
    Bucket& b = buckets_[s.label];
    ++b.seen;
    if (static_cast<int64_t>(b.samples.size()) < quota_) {
      b.samples.push_back(s);
      continue;
    }
    const uint64_t j = rng.below(static_cast<uint64_t>(b.seen));
    if (j < static_cast<uint64_t>(quota_)) b.samples[j] = s;
  }
}

std::vector<const LatentSample*> ReplayMemory::sample_minibatch(int64_t count, Rng& rng) const {
  if (empty()) throw ValidationError("cannot sample from an empty replay memory");
  std::vector<const LatentSample*> out;
  if (count <= 0) return out;
  out.reserve(static_cast<size_t>(count));
  std::vector<int> order = classes();
  rng.shuffle(order);
  // per class: a lazily drawn permutation of its bucket
  std::map<int, std::vector<size_t>> pending;
  for (size_t visit = 0; static_cast<int64_t>(out.size()) < count; ++visit) {
    const int cls = order[visit % order.size()];
    const auto& samples = buckets_.at(cls).samples;
    auto& left = pending[cls];
    if (left.empty()) {
      left.resize(samples.size());
      std::iota(left.begin(), left.end(), size_t{0});
    }
    const size_t pick = rng.below(left.size());
    out.push_back(&samples[left[pick]]);
    left[pick] = left.back();
    left.pop_back();
  }
  return out;
}

int64_t ReplayMemory::size() const {
  int64_t n = 0;
  for (const auto& [c, b] : buckets_) n += static_cast<int64_t>(b.samples.size());
  return n;
}

std::vector<int> ReplayMemory::classes() const {
  std::vector<int> out;
  for (const auto& [c, b] : buckets_)
    if (!b.samples.empty()) out.push_back(c);
  return out;
}

const std::vector<LatentSample>& ReplayMemory::bucket(int cls) const {
  static const std::vector<LatentSample> none;
  auto it = buckets_.find(cls);
  return it == buckets_.end() ? none : it->second.samples;
}

int64_t ReplayMemory::seen_count(int cls) const {
  auto it = buckets_.find(cls);
  return it == buckets_.end() ? 0 : it->second.seen;
}

Footprint ReplayMemory::memory_footprint() const {
  Footprint f;
  for (const auto& [c, b] : buckets_) {
    for (const auto& s : b.samples) f.payload_bits += s.activation.numel();
    f.bookkeeping_bits += kBucketBookkeepingBits;
  }
  f.float_baseline_bits = 32 * f.payload_bits;
  return f;
}

void ReplayMemory::write(ByteWriter& w) const {
  w.bytes(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<uint32_t>(quota_));
  w.u32(static_cast<uint32_t>(max_classes_));
  w.u8(static_cast<uint8_t>(shape_.rank()));
  for (auto d : shape_.dims()) w.u32(static_cast<uint32_t>(d));
  w.u32(static_cast<uint32_t>(buckets_.size()));
  for (const auto& [c, b] : buckets_) {
    w.u16(static_cast<uint16_t>(c));
    w.u64(static_cast<uint64_t>(b.seen));
    w.u32(static_cast<uint32_t>(b.samples.size()));
  }
  for (const auto& [c, b] : buckets_)
    for (const auto& s : b.samples) write_tensor(w, s.activation);
}

ReplayMemory ReplayMemory::read(ByteReader& r) {
  r.expect_magic(kMagic, "replay memory");
  if (r.u32() != kVersion) throw FormatError("unsupported replay memory version");
  const int64_t quota = r.u32();
  const int64_t classes = r.u32();
  std::vector<int64_t> dims(r.u8());
  for (auto& d : dims) d = r.u32();
  ReplayMemory m;
  try {
    m = ReplayMemory(quota, classes, Shape(std::move(dims)));
  } catch (const ValidationError& e) {
    throw FormatError(std::string("bad replay memory header: ") + e.what());
  }
  const uint32_t nb = r.u32();
  std::vector<std::pair<int, int64_t>> table;
  for (uint32_t i = 0; i < nb; ++i) {
    const int c = r.u16();
    Bucket b;
    b.seen = static_cast<int64_t>(r.u64());
    const int64_t n = r.u32();
    if (c >= classes || n > quota || n > b.seen || m.buckets_.count(c))
      throw FormatError("inconsistent replay class table");
    m.buckets_[c] = std::move(b);
    table.emplace_back(c, n);
  }
  for (auto [c, n] : table) {
    auto& samples = m.buckets_[c].samples;
    for (int64_t i = 0; i < n; ++i) {
      BitTensor t = read_bit_tensor(r);
      if (t.shape() != m.shape_) throw FormatError("stored latent has the wrong shape");
      samples.push_back(LatentSample{std::move(t), c});
    }
  }
  if (!r.at_end()) throw FormatError("trailing bytes after replay memory");
  return m;
}

void ReplayMemory::save(const std::filesystem::path& path) const {
  ByteWriter w;
  write(w);
  write_file_atomic(path, w.buffer());
}

ReplayMemory ReplayMemory::load(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  ByteReader r(bytes);
  return read(r);
}

bool ReplayMemory::operator==(const ReplayMemory& o) const {
  if (quota_ != o.quota_ || max_classes_ != o.max_classes_ || shape_ != o.shape_) return false;
  if (buckets_.size() != o.buckets_.size()) return false;
  for (const auto& [c, b] : buckets_) {
    auto it = o.buckets_.find(c);
    if (it == o.buckets_.end() || it->second.seen != b.seen || it->second.samples.size() != b.samples.size())
      return false;
    for (size_t i = 0; i < b.samples.size(); ++i)
      if (!(b.samples[i].activation == it->second.samples[i].activation) ||
          b.samples[i].label != it->second.samples[i].label)
        return false;
  }
  return true;
}

}  // namespace binreplay
