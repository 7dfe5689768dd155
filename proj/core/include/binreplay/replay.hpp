#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "binreplay/binkernel.hpp"
#include "binreplay/io.hpp"
#include "binreplay/rng.hpp"

namespace binreplay {

struct LatentSample {
  BitTensor activation;
  int label = 0;
};

/// Bit accounting of the stored latents. The float baseline is what the same
/// activation payload would take as 32-bit floats.
struct Footprint {
  int64_t payload_bits = 0;
  int64_t bookkeeping_bits = 0;
  int64_t float_baseline_bits = 0;

  [[nodiscard]] int64_t total_bits() const { return payload_bits + bookkeeping_bits; }
};

/// Per-class store of 1-bit latents, at most `quota` per class.
///
/// Each class bucket is a reservoir over the class's whole sample stream:
/// after M samples of a class have been offered, every one of them is held
/// with probability min(1, quota / M).
class ReplayMemory {
 public:
  ReplayMemory() = default;
  ReplayMemory(int64_t quota, int64_t max_classes, Shape latent_shape);

  [[nodiscard]] int64_t quota() const { return quota_; }
  [[nodiscard]] int64_t max_classes() const { return max_classes_; }
  [[nodiscard]] const Shape& latent_shape() const { return shape_; }

  void update_after_experience(const std::vector<LatentSample>& new_samples, Rng& rng);

  /// `count` samples, class balanced: classes are visited round-robin in a
  /// shuffled order and each visit draws one sample of that class, without
  /// repeats inside the minibatch until the class bucket is exhausted.
  [[nodiscard]] std::vector<const LatentSample*> sample_minibatch(int64_t count, Rng& rng) const;

  [[nodiscard]] int64_t size() const;
  [[nodiscard]] bool empty() const { return size() == 0; }
  /// Class ids with a non-empty bucket, ascending.
  [[nodiscard]] std::vector<int> classes() const;
  [[nodiscard]] const std::vector<LatentSample>& bucket(int cls) const;
  [[nodiscard]] int64_t seen_count(int cls) const;

  [[nodiscard]] Footprint memory_footprint() const;

  void write(ByteWriter& w) const;
  static ReplayMemory read(ByteReader& r);
  void save(const std::filesystem::path& path) const;
  static ReplayMemory load(const std::filesystem::path& path);

  bool operator==(const ReplayMemory&) const;

 private:
  struct Bucket {
    std::vector<LatentSample> samples;
    int64_t seen = 0;
  };
  int64_t quota_ = 0;
  int64_t max_classes_ = 0;
  Shape shape_;
  std::map<int, Bucket> buckets_;
};

}  // namespace binreplay
