#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "binreplay/learner.hpp"

namespace binreplay {

/// Configuration problem, with the offending line when known.
class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// One entry of a custom layer list.
struct LayerSpec {
  std::string kind;
  std::string name;
  std::vector<std::string> inputs;  // empty: the previous layer
  int64_t units = 0;                // dense, binary_dense
  int64_t filters = 0;              // conv2d, binary_conv2d
  int64_t kernel = 3;
  int64_t stride = 1;
  int64_t padding = 0;
  double alpha = 0.25;  // prelu

  bool operator==(const LayerSpec&) const = default;
};

struct RunConfig {
  std::string preset = "reference";
  std::vector<LayerSpec> layers;      // used instead of the preset when non-empty
  std::string replay_level = "replay"; // node name or index
  ContinualConfig continual;
  std::string dataset;                 // directory with train.brds and test.brds
  std::string output_dir = "out";

  /// Parses a JSON document; unknown keys and bad values raise ConfigError
  /// naming `source` and the line.
  static RunConfig parse(const std::string& text, const std::string& source = "config");
  static RunConfig load(const std::filesystem::path& path);

  [[nodiscard]] nlohmann::ordered_json to_json() const;
  [[nodiscard]] std::string dump() const;

  bool operator==(const RunConfig&) const = default;
};

/// Builds the configured graph with its replay level set.
Graph build_model(const RunConfig& cfg, const Shape& input, Rng& rng);

/// Help text listing every key with its default.
std::string config_reference();

}  // namespace binreplay
