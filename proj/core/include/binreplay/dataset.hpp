#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "binreplay/tensor.hpp"

namespace binreplay {

/// Labelled image set. Inputs are per-sample (H, W, C) f32 tensors.
struct Dataset {
  Shape input_shape;
  int num_classes = 0;
  std::vector<FloatTensor> inputs;
  std::vector<int> labels;

  [[nodiscard]] int64_t size() const { return static_cast<int64_t>(labels.size()); }
  void validate() const;
  /// Stacks the selected samples into a (B, H, W, C) batch.
  [[nodiscard]] Tensor batch(std::span<const int64_t> indices) const;
  [[nodiscard]] std::vector<int> batch_labels(std::span<const int64_t> indices) const;
};

/// "BRDS" file: magic, u32 version, u32 sample count, shape, u16 class count,
/// then per sample a tensor record and a u16 label.
void write_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& path);

struct SynthOptions {
  int classes = 10;
  int samples_per_class = 200;
  Shape input_shape{16, 16, 3};
  uint64_t seed = 1;
  double noise = 0.6;
  int max_shift = 2;
  double test_fraction = 0.2;
};

/// Synthetic image classes: each class is a smooth random prototype; samples
/// add a random shift, a random contrast change and pixel noise. Returns
/// (train, test), split per class.
std::pair<Dataset, Dataset> synthesize(const SynthOptions& opt);

/// Reads an IDX image file (u8, rank 3 or 4) and its IDX label file. Pixels are
/// scaled to [0, 1].
Dataset import_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

}  // namespace binreplay
