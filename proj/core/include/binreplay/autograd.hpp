#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "binreplay/binkernel.hpp"
#include "binreplay/io.hpp"
#include "binreplay/qtensor.hpp"
#include "binreplay/rng.hpp"
#include "binreplay/tensor.hpp"

namespace binreplay {

/// Bitwidth value meaning "no quantization" (64-bit float arithmetic, 32-bit
/// float parameter storage).
inline constexpr int kFloatBits = 0;

std::string bitwidth_name(int bits);
/// Parses "float", "32", "16", "8", "4" or "1".
int parse_bitwidth(const std::string& s);

/// Forward (q_f) and backward (q_b) bitwidths. Binary layers always run their
/// forward pass at 1 bit; q_b_bin == 1 freezes binary weights.
struct BitwidthConfig {
  int q_f = kFloatBits;
  int q_b_nonbin = kFloatBits;
  int q_b_bin = kFloatBits;

  void validate() const;
  [[nodiscard]] bool all_float() const { return q_f == 0 && q_b_nonbin == 0 && q_b_bin == 0; }
  bool operator==(const BitwidthConfig&) const = default;
};

enum class LayerKind : uint8_t {
  input = 0,
  dense,
  conv2d,
  binary_dense,
  binary_conv2d,
  batchnorm,
  add,
  concat,
  prelu,
  global_avg_pool,
  sign,
};

const char* layer_kind_name(LayerKind k);
LayerKind parse_layer_kind(const std::string& s);
bool is_binary(LayerKind k);

/// A trainable non-binary tensor. In quantized mode `value` lies exactly on
/// `grid`; in float mode every value is f32-representable.
struct Param {
  Tensor value;
  std::optional<QuantParams> grid;
};

/// Binary layer weights: effective = binarize(latent). The latent is absent
/// when the weights are frozen at 1 bit.
struct BinaryWeight {
  BitTensor effective;
  std::optional<Tensor> latent;
  std::optional<QuantParams> latent_grid;
};

struct LayerNode {
  LayerKind kind = LayerKind::input;
  std::string name;
  std::vector<int> inputs;
  Shape out_shape;  // per sample, without the batch dimension
  BinConvSpec conv;
  int64_t units = 0;  // dense output features

  /// dense/conv2d: {weight, bias}; batchnorm: {gamma, beta}; prelu: {alpha}.
  std::vector<Param> params;
  BinaryWeight binary;
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;

  /// Calibrated q_f grids: of this node's input (dense/conv2d) and output.
  std::optional<QuantParams> in_q;
  std::optional<QuantParams> out_q;
  bool trainable = true;

  [[nodiscard]] bool has_weights() const;
};

enum class Mode { train, infer };

/// Inputs saved by a train-mode forward for the backward pass, stored at the
/// layer's forward precision.
struct CachedInput {
  Shape input_shape;  // batched
  std::variant<std::monostate, Tensor, QuantizedTensor, BitTensor> value;
};

struct ActivationCache {
  int from_node = 0;
  int64_t batch = 0;
  std::map<int, CachedInput> entries;
};

/// Gradients of one node's trainable tensors, aligned with LayerNode::params;
/// `latent` holds the binary-weight gradient.
struct ParamGrads {
  std::vector<Tensor> params;
  std::optional<Tensor> latent;
};
using GradientMap = std::map<int, ParamGrads>;

struct BackwardResult {
  GradientMap grads;
  std::optional<Tensor> input_grad;  // at the start node, when requested
};

/// Directed acyclic layer graph. Nodes are appended in topological order and
/// the last node is the single output.
class Graph {
 public:
  int add_input(Shape per_sample);
  int add_dense(int in, int64_t units, Rng& rng, std::string name = {});
  int add_conv2d(int in, BinConvSpec spec, Rng& rng, std::string name = {});
  int add_binary_dense(int in, int64_t units, Rng& rng, std::string name = {});
  int add_binary_conv2d(int in, BinConvSpec spec, Rng& rng, std::string name = {});
  int add_batchnorm(int in, std::string name = {});
  int add_add(int a, int b, std::string name = {});
  int add_concat(std::vector<int> ins, std::string name = {});
  int add_prelu(int in, double alpha = 0.25, std::string name = {});
  int add_global_avg_pool(int in, std::string name = {});
  int add_sign(int in, std::string name = {});

  [[nodiscard]] int size() const { return static_cast<int>(nodes_.size()); }
  [[nodiscard]] int output() const { return size() - 1; }
  [[nodiscard]] const LayerNode& node(int i) const { return nodes_.at(i); }
  LayerNode& node(int i) { return nodes_.at(i); }
  [[nodiscard]] const std::vector<LayerNode>& nodes() const { return nodes_; }
  [[nodiscard]] Shape input_shape() const { return nodes_.at(0).out_shape; }

  /// Nodes with index <= level are frozen and never receive gradients; the
  /// level node's output is the replay latent. -1 means no frozen region.
  void set_replay_level(int level);
  [[nodiscard]] int replay_level() const { return replay_level_; }

  /// Switches arithmetic. Snaps parameters onto their q_b grids, converts or
  /// drops binary latents, and checks 32-bit accumulator headroom for 8-bit
  /// integer GEMMs.
  void set_bitwidths(const BitwidthConfig& cfg);
  [[nodiscard]] const BitwidthConfig& bitwidths() const { return bits_; }

  /// Whether node i's weights are updated by sgd_step.
  [[nodiscard]] bool is_trainable(int i) const;

  double ste_clip = 1.0;

  /// Runs nodes (from, to]. `input` is the batched output of node `from`.
  Tensor forward(const Tensor& input, Mode mode, ActivationCache* cache = nullptr, int from = 0, int to = -1) const;

  /// Backpropagates `grad_output` (gradient at the output node) through the
  /// region cached by a train-mode forward.
  BackwardResult backward(const ActivationCache& cache, const Tensor& grad_output, bool want_input_grad = false) const;

  /// Records every quantizable activation range over float-mode forwards of
  /// `batches` and stores q_f grids; no-op when q_f is float.
  void calibrate(const std::vector<Tensor>& batches);

  /// Re-estimates batchnorm running statistics (in node order) from `batches`.
  void estimate_batchnorm_stats(const std::vector<Tensor>& batches);

  /// Binary serialization of topology, bitwidths and all tensors.
  void write(ByteWriter& w) const;
  static Graph read(ByteReader& r);

  /// Serialized tensors and quantization state of nodes 0..level.
  [[nodiscard]] std::string frozen_region_bytes() const;

 private:
  int append(LayerNode n);
  void require_node(int i, const char* what) const;
  std::vector<LayerNode> nodes_;
  int replay_level_ = -1;
  BitwidthConfig bits_;
};

/// Straight-through estimator: g_out where |input| <= clip, else 0.
Tensor ste_backward(const Tensor& g_out, const Tensor& cached_input, double clip = 1.0);

/// Inference-style batch normalization over the last axis.
Tensor batchnorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& mean,
                         const Tensor& var, double eps);
struct BatchnormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};
BatchnormGrads batchnorm_backward(const Tensor& g_out, const Tensor& x, const Tensor& gamma, const Tensor& mean,
                                  const Tensor& var, double eps);

struct LossResult {
  double loss = 0.0;  // mean over the batch
  Tensor grad;        // d loss / d logits
};
/// Softmax cross-entropy over (B, K) logits. When `active` is given only those
/// classes take part in the softmax; the others get zero gradient.
LossResult softmax_ce(const Tensor& logits, const std::vector<int>& labels,
                      const std::vector<bool>* active = nullptr);

/// Plain SGD. Non-binary parameters update on their fixed-point grid;
/// binary latents are clamped to [-1, 1] and re-binarized.
void sgd_step(Graph& g, const GradientMap& grads, double lr);

enum class MacMode { forward, backward };
/// MACs per sample over nodes after `from` (default: the replay level).
/// Backward counts two products (input and weight gradient) per trainable
/// dense/conv layer, one for a frozen layer that still has to pass the
/// gradient on to a trainable layer below it, and nothing otherwise.
int64_t mac_count(const Graph& g, MacMode mode, std::optional<int> from = std::nullopt);

/// Snaps a gradient onto a signed grid sized to its own max |value|; no-op for
/// float.
void quantize_gradient(Tensor& g, int bits);

/// Rounds every value to the nearest f32.
void snap_f32(std::span<double> values);

}  // namespace binreplay
