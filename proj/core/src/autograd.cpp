#include "binreplay/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace binreplay {

std::string bitwidth_name(int bits) { return bits == kFloatBits ? "float" : std::to_string(bits); }

int parse_bitwidth(const std::string& s) {
  if (s == "float") return kFloatBits;
  if (s == "32") return 32;
  if (s == "16") return 16;
  if (s == "8") return 8;
  if (s == "4") return 4;
  if (s == "1") return 1;
  throw ValidationError("unknown bitwidth \"" + s + "\" (expected float, 32, 16, 8, 4 or 1)");
}

void BitwidthConfig::validate() const {
  auto nonbin_ok = [](int b) { return b == 0 || b == 8 || b == 16 || b == 32; };
  if (!nonbin_ok(q_f)) throw ValidationError("q_f must be float, 8, 16 or 32");
  if (!nonbin_ok(q_b_nonbin)) throw ValidationError("q_b_nonbin must be float, 8, 16 or 32");
  if (!(nonbin_ok(q_b_bin) || q_b_bin == 1 || q_b_bin == 4))
    throw ValidationError("q_b_bin must be float, 32, 16, 8, 4 or 1");
}

namespace {

constexpr const char* kKindNames[] = {"input",         "dense",     "conv2d", "binary_dense",
                                      "binary_conv2d", "batchnorm", "add",    "concat",
                                      "prelu",         "global_avg_pool", "sign"};

}  // namespace

const char* layer_kind_name(LayerKind k) { return kKindNames[static_cast<int>(k)]; }

LayerKind parse_layer_kind(const std::string& s) {
  for (int i = 0; i < static_cast<int>(std::size(kKindNames)); ++i)
    if (s == kKindNames[i]) return static_cast<LayerKind>(i);
  throw ValidationError("unknown layer kind \"" + s + "\"");
}

bool is_binary(LayerKind k) { return k == LayerKind::binary_dense || k == LayerKind::binary_conv2d; }

bool LayerNode::has_weights() const {
  switch (kind) {
    case LayerKind::dense:
    case LayerKind::conv2d:
    case LayerKind::binary_dense:
    case LayerKind::binary_conv2d:
    case LayerKind::batchnorm:
    case LayerKind::prelu: return true;
    default: return false;
  }
}

void quantize_gradient(Tensor& g, int bits) {
  if (bits == kFloatBits) return;
  fake_quantize(g.data, dynamic_symmetric_params(g.data, bits));
}

void snap_f32(std::span<double> values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

// ---------------------------------------------------------------------------
// small dense kernels

namespace {

int64_t per_sample(const Tensor& t) { return t.numel() / t.shape[0]; }

/// out (M x N) = a (M x K) * b^T, b is (N x K).
void gemm_nt(const double* a, const double* b, double* out, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ar = a + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const double* br = b + j * k;
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      out[i * n + j] = acc;
    }
  }
}

/// out (M x K) += a (M x N) * b, b is (N x K).
void gemm_nn_acc(const double* a, const double* b, double* out, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    double* orow = out + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const double s = a[i * n + j];
      if (s == 0.0) continue;
      const double* br = b + j * k;
      for (int64_t p = 0; p < k; ++p) orow[p] += s * br[p];
    }
  }
}

/// out (N x K) += a^T * b, a is (M x N), b is (M x K).
void gemm_tn_acc(const double* a, const double* b, double* out, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const double* br = b + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const double s = a[i * n + j];
      if (s == 0.0) continue;
      double* orow = out + j * k;
      for (int64_t p = 0; p < k; ++p) orow[p] += s * br[p];
    }
  }
}

template <class T>
std::vector<T> im2col(const T* img, int64_t h, int64_t w, int64_t c, const BinConvSpec& s, T pad) {
  const int64_t ho = s.out_h(h), wo = s.out_w(w), k = s.patch_size();
  std::vector<T> cols(static_cast<size_t>(ho * wo * k), pad);
  for (int64_t oy = 0; oy < ho; ++oy)
    for (int64_t ox = 0; ox < wo; ++ox) {
      T* dst = cols.data() + (oy * wo + ox) * k;
      for (int64_t ky = 0; ky < s.kernel_h; ++ky) {
        const int64_t iy = oy * s.stride - s.padding + ky;
        for (int64_t kx = 0; kx < s.kernel_w; ++kx, dst += c) {
          const int64_t ix = ox * s.stride - s.padding + kx;
          if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
          std::copy_n(img + (iy * w + ix) * c, c, dst);
        }
      }
    }
  return cols;
}

void col2im_add(const double* cols, double* img, int64_t h, int64_t w, int64_t c, const BinConvSpec& s) {
  const int64_t ho = s.out_h(h), wo = s.out_w(w);
  for (int64_t oy = 0; oy < ho; ++oy)
    for (int64_t ox = 0; ox < wo; ++ox) {
      const double* src = cols + (oy * wo + ox) * s.patch_size();
      for (int64_t ky = 0; ky < s.kernel_h; ++ky) {
        const int64_t iy = oy * s.stride - s.padding + ky;
        for (int64_t kx = 0; kx < s.kernel_w; ++kx, src += c) {
          const int64_t ix = ox * s.stride - s.padding + kx;
          if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
          double* dst = img + (iy * w + ix) * c;
          for (int64_t q = 0; q < c; ++q) dst[q] += src[q];
        }
      }
    }
}

QuantizedTensor transpose(const QuantizedTensor& q) {
  const int64_t r = q.shape[0], c = q.shape[1];
  QuantizedTensor t{Shape{c, r}, std::vector<int64_t>(q.data.size()), q.params};
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) t.data[j * r + i] = q.data[i * c + j];
  return t;
}

QuantizedTensor as_matrix(QuantizedTensor q, int64_t rows) {
  q.shape = Shape{rows, q.numel() / rows};
  return q;
}

Tensor as_matrix(Tensor t, int64_t rows) {
  t.shape = Shape{rows, t.numel() / rows};
  return t;
}

/// Real-valued +/-1 matrix view of binary weights: (rows x K).
std::vector<double> sign_matrix(const BitTensor& b) {
  std::vector<double> m(static_cast<size_t>(b.numel()));
  for (int64_t i = 0; i < b.numel(); ++i) m[i] = b.bit(i) ? 1.0 : -1.0;
  return m;
}

std::vector<double> sign_rows(const PackedBitRows& rows) {
  std::vector<double> m(static_cast<size_t>(rows.rows * rows.cols));
  for (int64_t r = 0; r < rows.rows; ++r)
    for (int64_t c = 0; c < rows.cols; ++c) m[r * rows.cols + c] = rows.bit(r, c) ? 1.0 : -1.0;
  return m;
}

QuantParams latent_grid(int bits) { return quant_params(-1.0, 1.0, bits, true); }

// Nearest grid point inside [-1, 1]; the lowest code (below -1) is never used.
double latent_on_grid(double v, const QuantParams& grid) {
  const int64_t k = std::max(quantize_value(std::clamp(v, -1.0, 1.0), grid), -grid.qmax());
  return static_cast<double>(k) * grid.scale;
}

bool quantizes_output(LayerKind k) {
  switch (k) {
    case LayerKind::binary_dense:
    case LayerKind::binary_conv2d:
    case LayerKind::sign: return false;
    default: return true;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// free-standing layer math

Tensor ste_backward(const Tensor& g_out, const Tensor& cached_input, double clip) {
  if (g_out.shape != cached_input.shape) throw ValidationError("ste_backward shape mismatch");
  Tensor g(g_out.shape);
  for (int64_t i = 0; i < g.numel(); ++i) g[i] = std::abs(cached_input[i]) <= clip ? g_out[i] : 0.0;
  return g;
}

Tensor batchnorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& mean,
                         const Tensor& var, double eps) {
  const int64_t c = gamma.numel();
  if (x.shape.dims().back() != c || beta.numel() != c || mean.numel() != c || var.numel() != c)
    throw ValidationError("batchnorm channel mismatch: input " + x.shape.str() + " vs " + std::to_string(c));
  Tensor y(x.shape);
  std::vector<double> mul(c), add(c);
  for (int64_t j = 0; j < c; ++j) {
    const double inv = 1.0 / std::sqrt(var[j] + eps);
    mul[j] = gamma[j] * inv;
    add[j] = beta[j] - gamma[j] * mean[j] * inv;
  }
  for (int64_t i = 0; i < x.numel(); ++i) {
    const int64_t j = i % c;
    y[i] = x[i] * mul[j] + add[j];
  }
  return y;
}

BatchnormGrads batchnorm_backward(const Tensor& g_out, const Tensor& x, const Tensor& gamma, const Tensor& mean,
                                  const Tensor& var, double eps) {
  const int64_t c = gamma.numel();
  if (x.shape.dims().back() != c || g_out.shape != x.shape) throw ValidationError("batchnorm channel mismatch");
  BatchnormGrads g{Tensor(x.shape), Tensor(Shape{c}), Tensor(Shape{c})};
  std::vector<double> inv(c);
  for (int64_t j = 0; j < c; ++j) inv[j] = 1.0 / std::sqrt(var[j] + eps);
  for (int64_t i = 0; i < x.numel(); ++i) {
    const int64_t j = i % c;
    const double xhat = (x[i] - mean[j]) * inv[j];
    g.input[i] = g_out[i] * gamma[j] * inv[j];
    g.gamma[j] += g_out[i] * xhat;
    g.beta[j] += g_out[i];
  }
  return g;
}

LossResult softmax_ce(const Tensor& logits, const std::vector<int>& labels, const std::vector<bool>* active) {
  if (logits.shape.rank() != 2) throw ValidationError("softmax_ce expects (batch, classes) logits");
  const int64_t b = logits.shape[0], k = logits.shape[1];
  if (static_cast<int64_t>(labels.size()) != b) throw ValidationError("softmax_ce: label count != batch");
  LossResult r{0.0, Tensor(logits.shape)};
  for (int64_t i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= k) throw ValidationError("softmax_ce: label out of range");
    if (active && !(*active)[y]) throw ValidationError("softmax_ce: label of an inactive class");
    const double* z = logits.data.data() + i * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < k; ++j)
      if (!active || (*active)[j]) mx = std::max(mx, z[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < k; ++j)
      if (!active || (*active)[j]) sum += std::exp(z[j] - mx);
    const double lse = mx + std::log(sum);
    r.loss += lse - z[y];
    for (int64_t j = 0; j < k; ++j) {
      if (active && !(*active)[j]) continue;
      const double p = std::exp(z[j] - lse);
      r.grad[i * k + j] = (p - (j == y ? 1.0 : 0.0)) / static_cast<double>(b);
    }
  }
  r.loss /= static_cast<double>(b);
  return r;
}

// ---------------------------------------------------------------------------
// graph construction

int Graph::append(LayerNode n) {
  for (int i : n.inputs) require_node(i, layer_kind_name(n.kind));
  if (n.name.empty()) n.name = std::string(layer_kind_name(n.kind)) + "_" + std::to_string(nodes_.size());
  nodes_.push_back(std::move(n));
  return size() - 1;
}

void Graph::require_node(int i, const char* what) const {
  if (i < 0 || i >= size())
    throw ValidationError(std::string(what) + ": input node " + std::to_string(i) + " does not exist");
}

int Graph::add_input(Shape per_sample) {
  if (!nodes_.empty()) throw ValidationError("the input node must be the first node");
  LayerNode n;
  n.kind = LayerKind::input;
  n.out_shape = std::move(per_sample);
  n.trainable = false;
  return append(std::move(n));
}

int Graph::add_dense(int in, int64_t units, Rng& rng, std::string name) {
  require_node(in, "dense");
  if (units < 1) throw ValidationError("dense units must be >= 1");
  const int64_t f = node(in).out_shape.numel();
  LayerNode n;
  n.kind = LayerKind::dense;
  n.name = std::move(name);
  n.inputs = {in};
  n.units = units;
  n.out_shape = Shape{units};
  Tensor w(Shape{units, f});
  const double sd = std::sqrt(2.0 / static_cast<double>(f));
  for (auto& v : w.data) v = rng.normal() * sd;
  snap_f32(w.data);
  n.params = {Param{std::move(w), {}}, Param{Tensor(Shape{units}), {}}};
  return append(std::move(n));
}

int Graph::add_conv2d(int in, BinConvSpec spec, Rng& rng, std::string name) {
  require_node(in, "conv2d");
  spec.validate();
  const Shape& is = node(in).out_shape;
  if (is.rank() != 3 || is[2] != spec.in_channels)
    throw ValidationError("conv2d expects (H, W, " + std::to_string(spec.in_channels) + ") input, got " + is.str());
  LayerNode n;
  n.kind = LayerKind::conv2d;
  n.name = std::move(name);
  n.inputs = {in};
  n.conv = spec;
  n.out_shape = Shape{spec.out_h(is[0]), spec.out_w(is[1]), spec.out_channels};
  Tensor w(Shape{spec.out_channels, spec.kernel_h, spec.kernel_w, spec.in_channels});
  const double sd = std::sqrt(2.0 / static_cast<double>(spec.patch_size()));
  for (auto& v : w.data) v = rng.normal() * sd;
  snap_f32(w.data);
  n.params = {Param{std::move(w), {}}, Param{Tensor(Shape{spec.out_channels}), {}}};
  return append(std::move(n));
}

namespace {

BinaryWeight init_binary(Shape shape, Rng& rng) {
  Tensor latent(std::move(shape));
  for (auto& v : latent.data) v = rng.uniform(-0.1, 0.1);
  snap_f32(latent.data);
  BinaryWeight b;
  b.effective = binarize(latent);
  b.latent = std::move(latent);
  return b;
}

}  // namespace

int Graph::add_binary_dense(int in, int64_t units, Rng& rng, std::string name) {
  require_node(in, "binary_dense");
  if (units < 1) throw ValidationError("binary_dense units must be >= 1");
  const int64_t f = node(in).out_shape.numel();
  LayerNode n;
  n.kind = LayerKind::binary_dense;
  n.name = std::move(name);
  n.inputs = {in};
  n.units = units;
  n.out_shape = Shape{units};
  n.binary = init_binary(Shape{units, f}, rng);
  return append(std::move(n));
}

int Graph::add_binary_conv2d(int in, BinConvSpec spec, Rng& rng, std::string name) {
  require_node(in, "binary_conv2d");
  spec.validate();
  const Shape& is = node(in).out_shape;
  if (is.rank() != 3 || is[2] != spec.in_channels)
    throw ValidationError("binary_conv2d expects (H, W, " + std::to_string(spec.in_channels) + ") input, got " +
                          is.str());
  LayerNode n;
  n.kind = LayerKind::binary_conv2d;
  n.name = std::move(name);
  n.inputs = {in};
  n.conv = spec;
  n.out_shape = Shape{spec.out_h(is[0]), spec.out_w(is[1]), spec.out_channels};
  if (n.out_shape.numel() < 1) throw ValidationError("binary_conv2d kernel larger than padded input");
  n.binary = init_binary(Shape{spec.out_channels, spec.kernel_h, spec.kernel_w, spec.in_channels}, rng);
  return append(std::move(n));
}

int Graph::add_batchnorm(int in, std::string name) {
  require_node(in, "batchnorm");
  const Shape& is = node(in).out_shape;
  const int64_t c = is.dims().back();
  LayerNode n;
  n.kind = LayerKind::batchnorm;
  n.name = std::move(name);
  n.inputs = {in};
  n.out_shape = is;
  n.params = {Param{Tensor(Shape{c}, 1.0), {}}, Param{Tensor(Shape{c}), {}}};
  n.running_mean = Tensor(Shape{c});
  n.running_var = Tensor(Shape{c}, 1.0);
  return append(std::move(n));
}

int Graph::add_add(int a, int b, std::string name) {
  require_node(a, "add");
  require_node(b, "add");
  if (node(a).out_shape != node(b).out_shape)
    throw ValidationError("add operands differ: " + node(a).out_shape.str() + " vs " + node(b).out_shape.str());
  LayerNode n;
  n.kind = LayerKind::add;
  n.name = std::move(name);
  n.inputs = {a, b};
  n.out_shape = node(a).out_shape;
  n.trainable = false;
  return append(std::move(n));
}

int Graph::add_concat(std::vector<int> ins, std::string name) {
  if (ins.size() < 2) throw ValidationError("concat needs at least two inputs");
  for (int i : ins) require_node(i, "concat");
  auto dims = node(ins[0]).out_shape.dims();
  int64_t channels = 0;
  for (int i : ins) {
    const auto& d = node(i).out_shape.dims();
    if (d.size() != dims.size() || !std::equal(d.begin(), d.end() - 1, dims.begin()))
      throw ValidationError("concat inputs must agree on all but the last axis");
    channels += d.back();
  }
  dims.back() = channels;
  LayerNode n;
  n.kind = LayerKind::concat;
  n.name = std::move(name);
  n.inputs = std::move(ins);
  n.out_shape = Shape(dims);
  n.trainable = false;
  return append(std::move(n));
}

int Graph::add_prelu(int in, double alpha, std::string name) {
  require_node(in, "prelu");
  const int64_t c = node(in).out_shape.dims().back();
  LayerNode n;
  n.kind = LayerKind::prelu;
  n.name = std::move(name);
  n.inputs = {in};
  n.out_shape = node(in).out_shape;
  Tensor a(Shape{c}, alpha);
  snap_f32(a.data);
  n.params = {Param{std::move(a), {}}};
  return append(std::move(n));
}

int Graph::add_global_avg_pool(int in, std::string name) {
  require_node(in, "global_avg_pool");
  const Shape& is = node(in).out_shape;
  if (is.rank() != 3) throw ValidationError("global_avg_pool expects (H, W, C) input, got " + is.str());
  LayerNode n;
  n.kind = LayerKind::global_avg_pool;
  n.name = std::move(name);
  n.inputs = {in};
  n.out_shape = Shape{is[2]};
  n.trainable = false;
  return append(std::move(n));
}

int Graph::add_sign(int in, std::string name) {
  require_node(in, "sign");
  LayerNode n;
  n.kind = LayerKind::sign;
  n.name = std::move(name);
  n.inputs = {in};
  n.out_shape = node(in).out_shape;
  n.trainable = false;
  return append(std::move(n));
}

void Graph::set_replay_level(int level) {
  if (level < -1 || level >= output())
    throw ValidationError("replay level " + std::to_string(level) + " must lie in [-1, " +
                          std::to_string(output() - 1) + "]");
  for (int n = level + 1; n < size(); ++n)
    for (int i : node(n).inputs)
      if (i < level)
        throw ValidationError("node " + node(n).name + " reads node " + node(i).name +
                              " from below the replay level; the level must cut the graph");
  replay_level_ = level;
}

bool Graph::is_trainable(int i) const {
  const auto& n = node(i);
  if (!n.trainable || i <= replay_level_ || !n.has_weights()) return false;
  if (is_binary(n.kind)) return n.binary.latent.has_value();
  return true;
}

void Graph::set_bitwidths(const BitwidthConfig& cfg) {
  cfg.validate();
  if (cfg.q_f == 8) {
    const QuantParams wgt{8, 1.0, 0, true};
    for (const auto& n : nodes_) {
      int64_t inner = 0;
      if (n.kind == LayerKind::dense) inner = node(n.inputs[0]).out_shape.numel();
      if (n.kind == LayerKind::conv2d) inner = n.conv.patch_size();
      if (inner > 0 && !fits_int32_accumulator(QuantParams{8, 1.0, 0, false}, wgt, inner))
        throw ValidationError("node " + n.name + ": inner dimension " + std::to_string(inner) +
                              " overflows 32-bit accumulators at 8 bits");
    }
  }
  if (cfg.q_f != bits_.q_f)
    for (auto& n : nodes_) {
      n.in_q.reset();
      n.out_q.reset();
    }
  for (auto& n : nodes_) {
    for (auto& p : n.params) {
      if (cfg.q_b_nonbin != kFloatBits) {
        p.grid = dynamic_symmetric_params(p.value.data, cfg.q_b_nonbin);
        fake_quantize(p.value.data, *p.grid);
      } else {
        p.grid.reset();
        snap_f32(p.value.data);
      }
    }
    if (!is_binary(n.kind)) continue;
    auto& b = n.binary;
    if (cfg.q_b_bin == 1) {
      b.latent.reset();
      b.latent_grid.reset();
      continue;
    }
    if (!b.latent) b.latent = to_real(b.effective);
    if (cfg.q_b_bin == kFloatBits) {
      b.latent_grid.reset();
      snap_f32(b.latent->data);
    } else {
      b.latent_grid = latent_grid(cfg.q_b_bin);
      const double step = b.latent_grid->scale;
      for (auto& v : b.latent->data) {
        const bool positive = v >= 0.0;
        v = latent_on_grid(v, *b.latent_grid);
        // keep the effective sign when a small latent rounds across zero
        if (positive && v < 0.0) v = 0.0;
        if (!positive && v >= 0.0) v = -step;
      }
    }
    b.effective = binarize(*b.latent);
  }
  bits_ = cfg;
}

// ---------------------------------------------------------------------------
// forward

namespace {

struct ForwardCtx {
  const Graph& g;
  bool quantized;
  Mode mode;
  ActivationCache* cache;
  int cache_after;
  std::function<void(int, const Tensor&)> observer;
};

Tensor run_node(const ForwardCtx& ctx, int id, const std::vector<std::optional<Tensor>>& vals) {
  const LayerNode& n = ctx.g.node(id);
  const Tensor& x = *vals[n.inputs[0]];
  const int64_t b = x.shape[0];
  const bool store = ctx.mode == Mode::train && ctx.cache && id > ctx.cache_after;
  CachedInput entry{x.shape, std::monostate{}};
  const int q_f = ctx.g.bitwidths().q_f;
  auto need_in_q = [&]() -> const QuantParams& {
    if (!n.in_q) throw ValidationError("node " + n.name + " has no calibrated input range for " +
                                       std::to_string(q_f) + "-bit forward");
    return *n.in_q;
  };

  Tensor y;
  switch (n.kind) {
    case LayerKind::input: throw ValidationError("input node cannot be evaluated");
    case LayerKind::dense: {
      const auto& w = n.params[0].value;
      const auto& bias = n.params[1].value;
      const int64_t f = per_sample(x);
      y = Tensor(Shape{b, n.units});
      if (!ctx.quantized) {
        gemm_nt(x.data.data(), w.data.data(), y.data.data(), b, f, n.units);
        for (int64_t i = 0; i < b; ++i)
          for (int64_t j = 0; j < n.units; ++j) y[i * n.units + j] += bias[j];
        if (store) entry.value = x;
      } else {
        auto xq = as_matrix(quantize(x, need_in_q()), b);
        auto wq = quantize(w, dynamic_symmetric_params(w.data, q_f));
        const double acc_scale = xq.params.scale * wq.params.scale;
        if (q_f == 8) {
          y = dequantize(qmatmul(xq, transpose(wq)));
        } else {
          y = qmatmul_real(xq, wq, true);
        }
        y.shape = Shape{b, n.units};
        for (int64_t i = 0; i < b; ++i)
          for (int64_t j = 0; j < n.units; ++j)
            y[i * n.units + j] += std::nearbyint(bias[j] / acc_scale) * acc_scale;
        if (store) entry.value = std::move(xq);
      }
      break;
    }
    case LayerKind::conv2d: {
      const auto& s = n.conv;
      const int64_t h = x.shape[1], wd = x.shape[2], c = x.shape[3];
      const int64_t ho = s.out_h(h), wo = s.out_w(wd), k = s.patch_size(), p = ho * wo;
      const auto& w = n.params[0].value;
      const auto& bias = n.params[1].value;
      y = Tensor(Shape{b, ho, wo, s.out_channels});
      if (!ctx.quantized) {
        for (int64_t img = 0; img < b; ++img) {
          auto cols = im2col(x.data.data() + img * h * wd * c, h, wd, c, s, 0.0);
          double* out = y.data.data() + img * p * s.out_channels;
          gemm_nt(cols.data(), w.data.data(), out, p, k, s.out_channels);
          for (int64_t i = 0; i < p; ++i)
            for (int64_t o = 0; o < s.out_channels; ++o) out[i * s.out_channels + o] += bias[o];
        }
        if (store) entry.value = x;
      } else {
        const auto& inq = need_in_q();
        auto xq = quantize(x, inq);
        auto wq = as_matrix(quantize(w, dynamic_symmetric_params(w.data, q_f)), s.out_channels);
        const auto wq_t = transpose(wq);
        const double acc_scale = inq.scale * wq.params.scale;
        for (int64_t img = 0; img < b; ++img) {
          QuantizedTensor cols{Shape{p, k},
                               im2col(xq.data.data() + img * h * wd * c, h, wd, c, s, inq.zero_point), inq};
          Tensor part = q_f == 8 ? dequantize(qmatmul(cols, wq_t)) : qmatmul_real(cols, wq, true);
          double* out = y.data.data() + img * p * s.out_channels;
          for (int64_t i = 0; i < p; ++i)
            for (int64_t o = 0; o < s.out_channels; ++o)
              out[i * s.out_channels + o] = part[i * s.out_channels + o] +
                                            std::nearbyint(bias[o] / acc_scale) * acc_scale;
        }
        if (store) entry.value = std::move(xq);
      }
      break;
    }
    case LayerKind::binary_dense: {
      BitTensor xb = binarize(as_matrix(x, b));
      const IntTensor acc = bin_matmul_rows(pack_rows(xb), pack_rows(n.binary.effective));
      y = acc.cast<double>();
      if (store) entry.value = std::move(xb);
      break;
    }
    case LayerKind::binary_conv2d: {
      BitTensor xb = binarize(x);
      y = bin_conv2d(xb, n.binary.effective, n.conv).cast<double>();
      if (store) entry.value = std::move(xb);
      break;
    }
    case LayerKind::batchnorm: {
      y = batchnorm_forward(x, n.params[0].value, n.params[1].value, n.running_mean, n.running_var, n.eps);
      if (store) entry.value = x;
      break;
    }
    case LayerKind::add: {
      const Tensor& x2 = *vals[n.inputs[1]];
      if (x2.shape != x.shape) throw ValidationError("node " + n.name + ": add operand shapes differ");
      y = x;
      for (int64_t i = 0; i < y.numel(); ++i) y[i] += x2[i];
      break;
    }
    case LayerKind::concat: {
      auto dims = x.shape.dims();
      int64_t total = 0;
      for (int i : n.inputs) total += vals[i]->shape.dims().back();
      dims.back() = total;
      y = Tensor(Shape(dims));
      const int64_t rows = y.numel() / total;
      int64_t off = 0;
      for (int i : n.inputs) {
        const Tensor& part = *vals[i];
        const int64_t c = part.shape.dims().back();
        for (int64_t r = 0; r < rows; ++r)
          std::copy_n(part.data.data() + r * c, c, y.data.data() + r * total + off);
        off += c;
      }
      break;
    }
    case LayerKind::prelu: {
      const auto& a = n.params[0].value;
      const int64_t c = a.numel();
      y = x;
      for (int64_t i = 0; i < y.numel(); ++i)
        if (y[i] <= 0.0) y[i] *= a[i % c];
      if (store) entry.value = x;
      break;
    }
    case LayerKind::global_avg_pool: {
      const int64_t hw = x.shape[1] * x.shape[2], c = x.shape[3];
      y = Tensor(Shape{b, c});
      for (int64_t img = 0; img < b; ++img)
        for (int64_t i = 0; i < hw; ++i)
          for (int64_t j = 0; j < c; ++j) y[img * c + j] += x[(img * hw + i) * c + j];
      for (auto& v : y.data) v /= static_cast<double>(hw);
      break;
    }
    case LayerKind::sign: {
      y = Tensor(x.shape);
      for (int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] >= 0.0 ? 1.0 : -1.0;
      if (store) {
        BitTensor mask(x.shape);
        for (int64_t i = 0; i < x.numel(); ++i)
          if (std::abs(x[i]) <= ctx.g.ste_clip) mask.set(i, true);
        entry.value = std::move(mask);
      }
      break;
    }
  }
  if (ctx.quantized && quantizes_output(n.kind)) {
    if (!n.out_q) throw ValidationError("node " + n.name + " has no calibrated output range");
    fake_quantize(y.data, *n.out_q);
  }
  if (store) ctx.cache->entries[id] = std::move(entry);
  return y;
}

Tensor forward_impl(const ForwardCtx& ctx, const Tensor& input, int from, int to) {
  const Graph& g = ctx.g;
  if (from < 0 || from >= g.size()) throw ValidationError("forward: bad start node " + std::to_string(from));
  if (to < 0) to = g.output();
  if (to < from || to >= g.size()) throw ValidationError("forward: bad end node " + std::to_string(to));
  if (input.shape.rank() < 1 || input.shape.drop_batch() != g.node(from).out_shape)
    throw ValidationError("forward: input shape " + input.shape.str() + " does not match node " +
                          g.node(from).name + " shape " + g.node(from).out_shape.str());
  std::vector<std::optional<Tensor>> vals(static_cast<size_t>(g.size()));
  vals[from] = input;
  if (from == 0 && ctx.quantized) {
    const auto& in = g.node(0);
    if (!in.out_q) throw ValidationError("node " + in.name + " has no calibrated output range");
    fake_quantize(vals[0]->data, *in.out_q);
  }
  if (ctx.observer) ctx.observer(from, *vals[from]);
  if (ctx.cache) {
    ctx.cache->from_node = from;
    ctx.cache->batch = input.shape[0];
    ctx.cache->entries.clear();
  }
  // last consumer of each value, to release memory early
  std::vector<int> last_use(static_cast<size_t>(g.size()), -1);
  for (int n = from + 1; n <= to; ++n)
    for (int i : g.node(n).inputs) last_use[i] = n;
  for (int n = from + 1; n <= to; ++n) {
    for (int i : g.node(n).inputs)
      if (i < from || !vals[i])
        throw ValidationError("forward: node " + g.node(n).name + " depends on node " + g.node(i).name +
                              " outside the evaluated range");
    vals[n] = run_node(ctx, n, vals);
    const auto& want = g.node(n).out_shape;
    if (vals[n]->shape.drop_batch() != want)
      throw ValidationError("node " + g.node(n).name + " produced " + vals[n]->shape.str() + ", expected " +
                            want.str());
    if (ctx.observer) ctx.observer(n, *vals[n]);
    for (int i : g.node(n).inputs)
      if (last_use[i] == n && i != to) vals[i].reset();
  }
  return std::move(*vals[to]);
}

}  // namespace

Tensor Graph::forward(const Tensor& input, Mode mode, ActivationCache* cache, int from, int to) const {
  ForwardCtx ctx{*this, bits_.q_f != kFloatBits, mode, cache, std::max(from, replay_level_), {}};
  return forward_impl(ctx, input, from, to);
}

void Graph::calibrate(const std::vector<Tensor>& batches) {
  if (bits_.q_f == kFloatBits) return;
  if (batches.empty()) throw ValidationError("no calibration data");
  std::vector<RangeCalibrator> ranges(static_cast<size_t>(size()));
  ForwardCtx ctx{*this, false, Mode::infer, nullptr, -1,
                 [&](int id, const Tensor& t) { ranges[id].observe(t); }};
  for (const auto& b : batches) forward_impl(ctx, b, 0, output());
  for (int id = 0; id < size(); ++id) {
    auto& n = nodes_[id];
    if (quantizes_output(n.kind)) {
      auto [lo, hi] = ranges[id].range();
      n.out_q = quant_params(lo, hi, bits_.q_f, false);
    }
    if (n.kind == LayerKind::dense || n.kind == LayerKind::conv2d) {
      auto [lo, hi] = ranges[n.inputs[0]].range();
      n.in_q = quant_params(lo, hi, bits_.q_f, false);
    }
  }
}

void Graph::estimate_batchnorm_stats(const std::vector<Tensor>& batches) {
  if (batches.empty()) throw ValidationError("no data for batchnorm statistics");
  for (int id = 0; id < size(); ++id) {
    auto& n = nodes_[id];
    if (n.kind != LayerKind::batchnorm) continue;
    const int64_t c = n.running_mean.numel();
    std::vector<double> sum(c, 0.0), sq(c, 0.0);
    int64_t count = 0;
    ForwardCtx ctx{*this, false, Mode::infer, nullptr, -1, {}};
    for (const auto& b : batches) {
      Tensor x = forward_impl(ctx, b, 0, n.inputs[0]);
      for (int64_t i = 0; i < x.numel(); ++i) {
        sum[i % c] += x[i];
        sq[i % c] += x[i] * x[i];
      }
      count += x.numel() / c;
    }
    for (int64_t j = 0; j < c; ++j) {
      const double mean = sum[j] / static_cast<double>(count);
      n.running_mean[j] = mean;
      n.running_var[j] = std::max(sq[j] / static_cast<double>(count) - mean * mean, 0.0);
    }
    snap_f32(n.running_mean.data);
    snap_f32(n.running_var.data);
  }
}

// ---------------------------------------------------------------------------
// backward

namespace {

/// Gradient of a binary layer with +/-1 weights w_pm (O x K) and cached +/-1
/// input rows x_pm (P x K): g_cols (P x K) and, if requested, g_w (O x K).
void binary_products(const double* gy, const std::vector<double>& w_pm, const std::vector<double>& x_pm, int64_t p,
                     int64_t o, int64_t k, double* g_cols, double* g_w) {
  if (g_cols) gemm_nn_acc(gy, w_pm.data(), g_cols, p, o, k);
  if (g_w) gemm_tn_acc(gy, x_pm.data(), g_w, p, o, k);
}

}  // namespace

BackwardResult Graph::backward(const ActivationCache& cache, const Tensor& grad_output, bool want_input_grad) const {
  const int from = cache.from_node;
  const int out = output();
  if (grad_output.shape[0] != cache.batch || grad_output.shape.drop_batch() != node(out).out_shape)
    throw ValidationError("backward: gradient shape " + grad_output.shape.str() + " does not match output");
  const int region_start = std::max(from, replay_level_);
  // needs[n]: the gradient at node n's output is required
  std::vector<bool> needs(static_cast<size_t>(size()), false);
  if (want_input_grad && from >= replay_level_) needs[from] = true;
  for (int n = region_start + 1; n <= out; ++n) {
    bool need = is_trainable(n);
    for (int i : node(n).inputs)
      if (i > from || i == from) need = need || needs[i];
    needs[n] = need;
  }
  BackwardResult result;
  std::vector<std::optional<Tensor>> grads(static_cast<size_t>(size()));
  grads[out] = grad_output;

  auto accumulate = [&](int i, Tensor g) {
    if (i < from || !needs[i]) return;
    if (!grads[i])
      grads[i] = std::move(g);
    else
      for (int64_t j = 0; j < g.numel(); ++j) (*grads[i])[j] += g[j];
  };

  const int q_nb = bits_.q_b_nonbin;
  const int q_bin_w = bits_.q_b_bin;
  const int q_bin_act = bits_.q_b_bin == 1 ? bits_.q_b_nonbin : bits_.q_b_bin;

  for (int id = out; id > region_start; --id) {
    if (!needs[id] || !grads[id]) continue;
    const LayerNode& n = node(id);
    auto it = cache.entries.find(id);
    if (it == cache.entries.end()) throw ValidationError("backward: missing cache entry for node " + n.name);
    const CachedInput& c = it->second;
    Tensor gy = std::move(*grads[id]);
    grads[id].reset();
    const bool train_w = is_trainable(id);
    const int in = n.inputs.empty() ? -1 : n.inputs[0];
    const bool need_in = in >= from && needs[in];
    const int64_t b = c.input_shape[0];
    ParamGrads pg;

    switch (n.kind) {
      case LayerKind::input: break;
      case LayerKind::dense:
      case LayerKind::conv2d: {
        const bool conv = n.kind == LayerKind::conv2d;
        const auto& s = n.conv;
        const auto& w = n.params[0].value;
        const int64_t o = conv ? s.out_channels : n.units;
        const int64_t k = conv ? s.patch_size() : c.input_shape.numel() / b;
        const int64_t h = conv ? c.input_shape[1] : 1, wd = conv ? c.input_shape[2] : 1;
        const int64_t ch = conv ? c.input_shape[3] : k;
        const int64_t p = conv ? s.out_h(h) * s.out_w(wd) : 1;
        Tensor gx(c.input_shape);
        Tensor gw(w.shape);
        Tensor gb(Shape{o});
        for (int64_t i = 0; i < gy.numel(); ++i) gb[i % o] += gy[i];
        if (q_nb == kFloatBits) {
          const Tensor* xf = std::get_if<Tensor>(&c.value);
          Tensor xtmp;
          if (!xf) {
            xtmp = dequantize(std::get<QuantizedTensor>(c.value));
            xf = &xtmp;
          }
          for (int64_t img = 0; img < b; ++img) {
            const double* gyi = gy.data.data() + img * p * o;
            if (need_in) {
              std::vector<double> gcols(static_cast<size_t>(p * k), 0.0);
              gemm_nn_acc(gyi, w.data.data(), gcols.data(), p, o, k);
              if (conv)
                col2im_add(gcols.data(), gx.data.data() + img * h * wd * ch, h, wd, ch, s);
              else
                std::copy(gcols.begin(), gcols.end(), gx.data.begin() + img * k);
            }
            if (train_w) {
              const double* xi = xf->data.data() + img * h * wd * ch;
              if (conv) {
                auto cols = im2col(xi, h, wd, ch, s, 0.0);
                gemm_tn_acc(gyi, cols.data(), gw.data.data(), p, o, k);
              } else {
                gemm_tn_acc(gyi, xi, gw.data.data(), p, o, k);
              }
            }
          }
        } else {
          // integer products on the backward grid
          const auto gq = quantize(gy, dynamic_symmetric_params(gy.data, q_nb));
          const auto& wgrid = n.params[0].grid;
          const auto wq = as_matrix(quantize(w, wgrid ? *wgrid : dynamic_symmetric_params(w.data, q_nb)), o);
          QuantizedTensor xq;
          if (train_w) {
            if (auto* xqp = std::get_if<QuantizedTensor>(&c.value)) {
              xq = *xqp;
            } else {
              const auto& xf = std::get<Tensor>(c.value);
              xq = quantize(xf, dynamic_symmetric_params(xf.data, q_nb));
            }
          }
          for (int64_t img = 0; img < b; ++img) {
            QuantizedTensor gyi{Shape{p, o},
                                std::vector<int64_t>(gq.data.begin() + img * p * o, gq.data.begin() + (img + 1) * p * o),
                                gq.params};
            if (need_in) {
              const Tensor gcols = qmatmul_real(gyi, wq);
              if (conv)
                col2im_add(gcols.data.data(), gx.data.data() + img * h * wd * ch, h, wd, ch, s);
              else
                std::copy(gcols.data.begin(), gcols.data.end(), gx.data.begin() + img * k);
            }
            if (train_w) {
              QuantizedTensor cols{Shape{p, k}, {}, xq.params};
              const int64_t* xi = xq.data.data() + img * h * wd * ch;
              if (conv)
                cols.data = im2col(xi, h, wd, ch, s, xq.params.zero_point);
              else
                cols.data.assign(xi, xi + k);
              const Tensor part = qmatmul_real(transpose(gyi), cols);
              for (int64_t j = 0; j < gw.numel(); ++j) gw[j] += part[j];
            }
          }
        }
        if (need_in) {
          quantize_gradient(gx, q_nb);
          accumulate(in, std::move(gx));
        }
        if (train_w) {
          quantize_gradient(gw, q_nb);
          quantize_gradient(gb, q_nb);
          pg.params = {std::move(gw), std::move(gb)};
        }
        break;
      }
      case LayerKind::binary_dense:
      case LayerKind::binary_conv2d: {
        const bool conv = n.kind == LayerKind::binary_conv2d;
        const auto& s = n.conv;
        const BitTensor& xb = std::get<BitTensor>(c.value);
        const int64_t o = conv ? s.out_channels : n.units;
        const int64_t k = conv ? s.patch_size() : c.input_shape.numel() / b;
        const int64_t h = conv ? c.input_shape[1] : 1, wd = conv ? c.input_shape[2] : 1;
        const int64_t ch = conv ? c.input_shape[3] : k;
        const int64_t p = conv ? s.out_h(h) * s.out_w(wd) : 1;
        // gradient values as integers on the q_b grid (or reals in float mode)
        const int gbits = train_w ? q_bin_w : q_bin_act;
        double gscale = 1.0;
        if (gbits != kFloatBits) {
          const auto gp = dynamic_symmetric_params(gy.data, gbits);
          for (auto& v : gy.data) v = static_cast<double>(quantize_value(v, gp));
          gscale = gp.scale;
        }
        const auto w_pm = sign_matrix(n.binary.effective);
        Tensor gx(c.input_shape);
        Tensor gw(Shape{o, k});
        const PackedBitRows xrows = conv ? PackedBitRows{} : pack_rows(xb.reshaped(Shape{b, k}));
        for (int64_t img = 0; img < b; ++img) {
          const double* gyi = gy.data.data() + img * p * o;
          std::vector<double> x_pm;
          if (train_w) {
            if (conv) {
              x_pm = sign_rows(im2col_bits(xb, img, s));
            } else {
              x_pm.resize(static_cast<size_t>(k));
              for (int64_t j = 0; j < k; ++j) x_pm[j] = xrows.bit(img, j) ? 1.0 : -1.0;
            }
          }
          std::vector<double> gcols(need_in ? static_cast<size_t>(p * k) : 0, 0.0);
          binary_products(gyi, w_pm, x_pm, p, o, k, need_in ? gcols.data() : nullptr,
                          train_w ? gw.data.data() : nullptr);
          if (need_in) {
            if (conv)
              col2im_add(gcols.data(), gx.data.data() + img * h * wd * ch, h, wd, ch, s);
            else
              std::copy(gcols.begin(), gcols.end(), gx.data.begin() + img * k);
          }
        }
        if (need_in) {
          for (auto& v : gx.data) v *= gscale;
          quantize_gradient(gx, q_bin_act);
          accumulate(in, std::move(gx));
        }
        if (train_w) {
          for (auto& v : gw.data) v *= gscale;
          const auto& lat = *n.binary.latent;
          for (int64_t j = 0; j < gw.numel(); ++j)
            if (std::abs(lat[j]) > ste_clip) gw[j] = 0.0;
          gw.shape = lat.shape;
          quantize_gradient(gw, q_bin_w);
          pg.latent = std::move(gw);
        }
        break;
      }
      case LayerKind::batchnorm: {
        const auto& x = std::get<Tensor>(c.value);
        auto bg = batchnorm_backward(gy, x, n.params[0].value, n.running_mean, n.running_var, n.eps);
        if (need_in) {
          quantize_gradient(bg.input, q_nb);
          accumulate(in, std::move(bg.input));
        }
        if (train_w) {
          quantize_gradient(bg.gamma, q_nb);
          quantize_gradient(bg.beta, q_nb);
          pg.params = {std::move(bg.gamma), std::move(bg.beta)};
        }
        break;
      }
      case LayerKind::add: {
        accumulate(n.inputs[1], gy);
        accumulate(in, std::move(gy));
        break;
      }
      case LayerKind::concat: {
        const int64_t total = gy.shape.dims().back();
        const int64_t rows = gy.numel() / total;
        int64_t off = 0;
        for (int i : n.inputs) {
          const int64_t ci = node(i).out_shape.dims().back();
          Tensor part(Shape(gy.shape.with_batch(b).dims()));
          auto dims = gy.shape.dims();
          dims.back() = ci;
          part = Tensor(Shape(dims));
          for (int64_t r = 0; r < rows; ++r)
            std::copy_n(gy.data.data() + r * total + off, ci, part.data.data() + r * ci);
          off += ci;
          accumulate(i, std::move(part));
        }
        break;
      }
      case LayerKind::prelu: {
        const auto& x = std::get<Tensor>(c.value);
        const auto& a = n.params[0].value;
        const int64_t ch = a.numel();
        Tensor gx(x.shape), ga(Shape{ch});
        for (int64_t i = 0; i < x.numel(); ++i) {
          if (x[i] > 0.0) {
            gx[i] = gy[i];
          } else {
            gx[i] = gy[i] * a[i % ch];
            ga[i % ch] += gy[i] * x[i];
          }
        }
        if (need_in) {
          quantize_gradient(gx, q_nb);
          accumulate(in, std::move(gx));
        }
        if (train_w) {
          quantize_gradient(ga, q_nb);
          pg.params = {std::move(ga)};
        }
        break;
      }
      case LayerKind::global_avg_pool: {
        const int64_t hw = c.input_shape[1] * c.input_shape[2], ch = c.input_shape[3];
        Tensor gx(c.input_shape);
        const double inv = 1.0 / static_cast<double>(hw);
        for (int64_t img = 0; img < b; ++img)
          for (int64_t i = 0; i < hw; ++i)
            for (int64_t j = 0; j < ch; ++j) gx[(img * hw + i) * ch + j] = gy[img * ch + j] * inv;
        quantize_gradient(gx, q_nb);
        accumulate(in, std::move(gx));
        break;
      }
      case LayerKind::sign: {
        const BitTensor& mask = std::get<BitTensor>(c.value);
        for (int64_t i = 0; i < gy.numel(); ++i)
          if (!mask.bit(i)) gy[i] = 0.0;
        // the STE boundary of a binary layer takes the binary backward width
        quantize_gradient(gy, q_bin_act);
        accumulate(in, std::move(gy));
        break;
      }
    }
    if (train_w) result.grads[id] = std::move(pg);
  }
  if (want_input_grad && grads[from]) result.input_grad = std::move(*grads[from]);
  return result;
}

// ---------------------------------------------------------------------------
// update and accounting

void sgd_step(Graph& g, const GradientMap& grads, double lr) {
  const auto& bits = g.bitwidths();
  for (const auto& [id, pg] : grads) {
    if (!g.is_trainable(id)) continue;
    LayerNode& n = g.node(id);
    for (size_t i = 0; i < pg.params.size() && i < n.params.size(); ++i) {
      Param& p = n.params[i];
      const Tensor& gr = pg.params[i];
      if (gr.numel() != p.value.numel()) throw ValidationError("sgd_step: gradient shape mismatch at " + n.name);
      for (int64_t j = 0; j < gr.numel(); ++j) p.value[j] -= lr * gr[j];
      if (bits.q_b_nonbin == kFloatBits) {
        snap_f32(p.value.data);
        continue;
      }
      // the grid is kept unless the update leaves its representable range
      const auto [lo, hi] = std::minmax_element(p.value.data.begin(), p.value.data.end());
      if (!p.grid || *lo < static_cast<double>(p.grid->qmin()) * p.grid->scale ||
          *hi > static_cast<double>(p.grid->qmax()) * p.grid->scale)
        p.grid = dynamic_symmetric_params(p.value.data, bits.q_b_nonbin);
      fake_quantize(p.value.data, *p.grid);
    }
    if (pg.latent && n.binary.latent) {
      Tensor& lat = *n.binary.latent;
      const Tensor& gr = *pg.latent;
      for (int64_t j = 0; j < gr.numel(); ++j) lat[j] = std::clamp(lat[j] - lr * gr[j], -1.0, 1.0);
      if (n.binary.latent_grid)
        for (auto& v : lat.data) v = latent_on_grid(v, *n.binary.latent_grid);
      else
        snap_f32(lat.data);
      n.binary.effective = binarize(lat);
    }
  }
}

int64_t mac_count(const Graph& g, MacMode mode, std::optional<int> from) {
  const int start = from.value_or(g.replay_level());
  // feeds[n]: some trainable node lies between the start and node n, so the
  // gradient at n's input has to be propagated
  std::vector<bool> feeds(static_cast<size_t>(g.size()), false);
  int64_t total = 0;
  for (int id = std::max(start + 1, 1); id < g.size(); ++id) {
    const auto& n = g.node(id);
    bool upstream = false;
    for (int i : n.inputs)
      if (i > start) upstream = upstream || feeds[i] || g.is_trainable(i);
    feeds[id] = upstream;
    int64_t macs = 0;
    switch (n.kind) {
      case LayerKind::dense:
      case LayerKind::binary_dense: macs = g.node(n.inputs[0]).out_shape.numel() * n.units; break;
      case LayerKind::conv2d:
      case LayerKind::binary_conv2d:
        macs = n.out_shape[0] * n.out_shape[1] * n.conv.out_channels * n.conv.patch_size();
        break;
      default: break;
    }
    if (mode == MacMode::forward)
      total += macs;
    else if (g.is_trainable(id))
      total += 2 * macs;
    else if (upstream)
      total += macs;
  }
  return total;
}

// ---------------------------------------------------------------------------
// serialization

namespace {

void write_qparams(ByteWriter& w, const std::optional<QuantParams>& q) {
  w.u8(q ? 1 : 0);
  if (!q) return;
  w.f64(q->scale);
  w.i64(q->zero_point);
  w.u8(static_cast<uint8_t>(q->bits));
  w.u8(q->is_signed ? 1 : 0);
}

std::optional<QuantParams> read_qparams(ByteReader& r) {
  if (r.u8() == 0) return std::nullopt;
  QuantParams q;
  q.scale = r.f64();
  q.zero_point = r.i64();
  q.bits = r.u8();
  q.is_signed = r.u8() != 0;
  try {
    q.validate();
  } catch (const ValidationError& e) {
    throw FormatError(std::string("bad quantization parameters: ") + e.what());
  }
  return q;
}

void write_shape(ByteWriter& w, const Shape& s) {
  w.u8(static_cast<uint8_t>(s.rank()));
  for (auto d : s.dims()) w.u32(static_cast<uint32_t>(d));
}

Shape read_shape(ByteReader& r) {
  std::vector<int64_t> d(r.u8());
  for (auto& v : d) v = r.u32();
  try {
    return Shape(std::move(d));
  } catch (const ValidationError& e) {
    throw FormatError(e.what());
  }
}

void write_real(ByteWriter& w, const Tensor& t, const std::optional<QuantParams>& grid) {
  w.u8(grid ? 1 : 0);
  if (grid)
    write_tensor(w, quantize(t, *grid));
  else
    write_tensor(w, t.cast<float>());
}

Tensor read_real(ByteReader& r, std::optional<QuantParams>* grid) {
  const bool quantized = r.u8() != 0;
  if (quantized) {
    auto q = read_quantized_tensor(r);
    if (grid) *grid = q.params;
    return dequantize(q);
  }
  if (grid) grid->reset();
  return read_float_tensor(r).cast<double>();
}

void write_descriptor(ByteWriter& w, const LayerNode& n) {
  w.u8(static_cast<uint8_t>(n.kind));
  w.str(n.name);
  w.u32(static_cast<uint32_t>(n.inputs.size()));
  for (int i : n.inputs) w.i32(i);
  write_shape(w, n.out_shape);
  for (int64_t v : {n.conv.kernel_h, n.conv.kernel_w, n.conv.stride, n.conv.padding, n.conv.in_channels,
                    n.conv.out_channels, n.units})
    w.i64(v);
  w.f64(n.eps);
  w.u8(n.trainable ? 1 : 0);
  write_qparams(w, n.in_q);
  write_qparams(w, n.out_q);
}

void write_node_tensors(ByteWriter& w, const LayerNode& n) {
  w.u8(static_cast<uint8_t>(n.params.size()));
  for (const auto& p : n.params) write_real(w, p.value, p.grid);
  if (n.kind == LayerKind::batchnorm) {
    write_tensor(w, n.running_mean.cast<float>());
    write_tensor(w, n.running_var.cast<float>());
  }
  if (is_binary(n.kind)) {
    write_tensor(w, n.binary.effective);
    w.u8(n.binary.latent ? 1 : 0);
    if (n.binary.latent) write_real(w, *n.binary.latent, n.binary.latent_grid);
  }
}

}  // namespace

void Graph::write(ByteWriter& w) const {
  w.u32(static_cast<uint32_t>(nodes_.size()));
  for (const auto& n : nodes_) write_descriptor(w, n);
  w.i32(replay_level_);
  w.u8(static_cast<uint8_t>(bits_.q_f));
  w.u8(static_cast<uint8_t>(bits_.q_b_nonbin));
  w.u8(static_cast<uint8_t>(bits_.q_b_bin));
  w.f64(ste_clip);
  for (const auto& n : nodes_) write_node_tensors(w, n);
}

Graph Graph::read(ByteReader& r) {
  Graph g;
  const uint32_t count = r.u32();
  if (count == 0 || count > 100000) throw FormatError("implausible node count");
  for (uint32_t id = 0; id < count; ++id) {
    LayerNode n;
    const uint8_t kind = r.u8();
    if (kind > static_cast<uint8_t>(LayerKind::sign)) throw FormatError("unknown layer kind tag");
    n.kind = static_cast<LayerKind>(kind);
    n.name = r.str();
    n.inputs.resize(r.u32());
    for (auto& i : n.inputs) {
      i = r.i32();
      if (i < 0 || i >= static_cast<int>(id)) throw FormatError("node input is not an earlier node");
    }
    n.out_shape = read_shape(r);
    int64_t* fields[] = {&n.conv.kernel_h,    &n.conv.kernel_w,     &n.conv.stride, &n.conv.padding,
                         &n.conv.in_channels, &n.conv.out_channels, &n.units};
    for (auto* f : fields) *f = r.i64();
    n.eps = r.f64();
    n.trainable = r.u8() != 0;
    n.in_q = read_qparams(r);
    n.out_q = read_qparams(r);
    g.nodes_.push_back(std::move(n));
  }
  const int level = r.i32();
  BitwidthConfig bits;
  bits.q_f = r.u8();
  bits.q_b_nonbin = r.u8();
  bits.q_b_bin = r.u8();
  try {
    bits.validate();
  } catch (const ValidationError& e) {
    throw FormatError(e.what());
  }
  g.bits_ = bits;
  g.ste_clip = r.f64();
  for (auto& n : g.nodes_) {
    const uint8_t np = r.u8();
    n.params.resize(np);
    for (auto& p : n.params) p.value = read_real(r, &p.grid);
    if (n.kind == LayerKind::batchnorm) {
      n.running_mean = read_float_tensor(r).cast<double>();
      n.running_var = read_float_tensor(r).cast<double>();
    }
    if (is_binary(n.kind)) {
      n.binary.effective = read_bit_tensor(r);
      if (r.u8() != 0) {
        std::optional<QuantParams> grid;
        n.binary.latent = read_real(r, &grid);
        n.binary.latent_grid = grid;
      }
    }
  }
  try {
    g.set_replay_level(level);
  } catch (const ValidationError& e) {
    throw FormatError(e.what());
  }
  return g;
}

std::string Graph::frozen_region_bytes() const {
  ByteWriter w;
  for (int id = 0; id <= replay_level_; ++id) {
    write_descriptor(w, nodes_[id]);
    write_node_tensors(w, nodes_[id]);
  }
  return w.take();
}

}  // namespace binreplay
