#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "binreplay/autograd.hpp"
#include "binreplay/cwr.hpp"
#include "binreplay/dataset.hpp"
#include "binreplay/replay.hpp"
#include "binreplay/rng.hpp"

namespace binreplay {

struct ContinualConfig {
  BitwidthConfig bits{8, 16, 4};
  int64_t quota = 30;        // replay samples kept per class
  int64_t batch_new = 16;    // B_N
  int64_t batch_replay = 64; // B_R; 0 disables replay
  int epochs = 5;
  double lr = 0.01;
  int num_experiences = 5;
  uint64_t seed = 1;
  /// Full-network float training on the first experience.
  int pretrain_epochs = 8;
  double pretrain_lr = 0.05;
  /// When false only the head learns after the first experience.
  bool train_backbone = true;
  /// Wall-clock columns are written as 0 unless enabled, so that metrics stay
  /// byte-reproducible.
  bool record_timing = false;

  void validate() const;
  bool operator==(const ContinualConfig&) const = default;
};

/// Desk-scale binary VGG-style model. Node "replay" (a sign node) is the
/// replay level; the output node is the pooled feature vector.
Graph build_reference_model(const Shape& input, Rng& rng);

struct Experience {
  int index = 0;
  std::vector<int> classes;
  std::vector<int64_t> samples;  // indices into the training set
};

/// New-classes stream: classes are shuffled with the seed and dealt into
/// `num_experiences` groups whose sizes differ by at most one.
std::vector<Experience> make_nc_stream(const Dataset& train, int num_experiences, uint64_t seed);

struct ExperienceMetrics {
  int experience = 0;
  double test_accuracy = 0.0;
  double mean_train_loss = 0.0;
  int64_t fwd_macs = 0;
  int64_t bwd_macs = 0;
  int64_t replay_bits = 0;
  int64_t elapsed_ms = 0;
};

struct MetricsLog {
  std::vector<ExperienceMetrics> rows;
  std::string test_set_sha256;

  [[nodiscard]] std::string to_csv() const;
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<int64_t> class_correct;
  std::vector<int64_t> class_total;
  std::vector<int> predictions;
};

/// Number of worker threads for evaluation and latent extraction: the
/// BINREPLAY_THREADS environment variable when set, else the hardware count.
int worker_threads();

std::string dataset_sha256(const Dataset& ds);

class ContinualLearner {
 public:
  ContinualLearner(Graph graph, ContinualConfig cfg, int num_classes);

  [[nodiscard]] const Graph& graph() const { return graph_; }
  Graph& graph() { return graph_; }
  [[nodiscard]] const CwrHead& head() const { return head_; }
  [[nodiscard]] const ReplayMemory& memory() const { return memory_; }
  [[nodiscard]] const ContinualConfig& config() const { return cfg_; }
  /// Replaces the run settings; meant for a learner that has only been through
  /// pretrain_float, so several configurations can share one pretraining.
  void set_config(const ContinualConfig& cfg);

  /// Trains every layer and the head in float on the first experience.
  double pretrain_float(const Dataset& train, const Experience& first);
  /// Switches to the configured bitwidths, calibrates activation ranges on
  /// the first experience, consolidates the head and fills the replay memory.
  ExperienceMetrics deploy(const Dataset& train, const Experience& first, const Dataset& test, double pretrain_loss);
  ExperienceMetrics run_experience(const Dataset& train, const Experience& e, const Dataset& test);

  [[nodiscard]] EvalResult evaluate(const Dataset& test) const;
  MetricsLog run_protocol(const Dataset& train, const Dataset& test);

  /// Pooled features for (B, ...) inputs, infer mode.
  [[nodiscard]] Tensor features(const Tensor& inputs) const;
  /// Replay-level latents of dataset samples, infer mode.
  [[nodiscard]] std::vector<LatentSample> latents(const Dataset& ds, const std::vector<int64_t>& indices) const;

  void save_checkpoint(const std::filesystem::path& path) const;
  static ContinualLearner load_checkpoint(const std::filesystem::path& path);

 private:
  Graph graph_;
  ContinualConfig cfg_;
  int num_classes_;
  CwrHead head_;
  ReplayMemory memory_;
  Rng rng_;
  int replay_level_;
  std::vector<int> first_classes_;
};

}  // namespace binreplay
