#pragma once

// Random finite-difference checks of float-mode gradients, one instance per
// call. Each returns the worst norm-wise relative error over every tensor the
// instance checks.

#include <algorithm>
#include <functional>
#include <string>

#include "binreplay/autograd.hpp"
#include "oracles.hpp"

namespace gradcheck {

using namespace binreplay;

inline constexpr double kStep = 1e-5;

inline int64_t pick(Rng& rng, int64_t lo, int64_t hi) { return lo + static_cast<int64_t>(rng.below(hi - lo + 1)); }

/// Values in [-s, s] kept at least `gap` away from every point in `kinks`.
inline Tensor random_tensor(Rng& rng, Shape s, double scale = 1.0, std::vector<double> kinks = {}, double gap = 1e-3) {
  Tensor t(std::move(s));
  for (auto& v : t.data) {
    bool near = false;
    do {
      v = rng.uniform(-scale, scale);
      near = std::any_of(kinks.begin(), kinks.end(), [&](double k) { return std::abs(v - k) < gap; });
    } while (near);
  }
  return t;
}

/// Compares backward() of a float graph on the probe loss sum(r * y) with
/// central differences over the input and every trainable parameter.
inline double check_graph(Graph& g, const Tensor& x) {
  g.set_bitwidths(BitwidthConfig{});
  Rng rng(static_cast<uint64_t>(x.numel()) * 7919u + 1);
  ActivationCache cache;
  const Tensor y = g.forward(x, Mode::train, &cache);
  Tensor r(y.shape);
  for (auto& v : r.data) v = rng.uniform(-1, 1);
  const auto res = g.backward(cache, r, true);

  double worst = 0.0;
  Tensor xv = x;
  auto loss_at_x = [&] { return oracle::probe_loss(g, xv, r); };
  auto fd_x = oracle::central_difference(xv.data, kStep, loss_at_x);
  if (!res.input_grad) return 1.0;
  worst = std::max(worst, oracle::relative_error(res.input_grad->data, fd_x));

  for (int id = 1; id < g.size(); ++id) {
    if (!g.is_trainable(id)) continue;
    auto it = res.grads.find(id);
    if (it == res.grads.end()) return 1.0;
    auto& n = g.node(id);
    for (size_t p = 0; p < n.params.size(); ++p) {
      auto& vals = n.params[p].value.data;
      auto fd = oracle::central_difference(vals, kStep, [&] { return oracle::probe_loss(g, x, r); });
      worst = std::max(worst, oracle::relative_error(it->second.params.at(p).data, fd));
    }
  }
  return worst;
}

inline double dense(Rng& rng) {
  Graph g;
  const int64_t f = pick(rng, 1, 8);
  g.add_input(Shape{f});
  g.add_dense(0, pick(rng, 1, 6), rng);
  g.node(1).params[1].value = random_tensor(rng, g.node(1).params[1].value.shape);
  return check_graph(g, random_tensor(rng, Shape{pick(rng, 1, 3), f}));
}

inline BinConvSpec random_spec(Rng& rng, int64_t& h, int64_t& w) {
  BinConvSpec s;
  s.kernel_h = pick(rng, 1, 3);
  s.kernel_w = pick(rng, 1, 3);
  s.stride = pick(rng, 1, 2);
  s.padding = pick(rng, 0, 1);
  s.in_channels = pick(rng, 1, 3);
  s.out_channels = pick(rng, 1, 3);
  h = s.kernel_h + pick(rng, 0, 3);
  w = s.kernel_w + pick(rng, 0, 3);
  return s;
}

inline double conv2d(Rng& rng) {
  int64_t h, w;
  const auto s = random_spec(rng, h, w);
  Graph g;
  g.add_input(Shape{h, w, s.in_channels});
  g.add_conv2d(0, s, rng);
  g.node(1).params[1].value = random_tensor(rng, g.node(1).params[1].value.shape);
  return check_graph(g, random_tensor(rng, Shape{pick(rng, 1, 2), h, w, s.in_channels}));
}

inline double batchnorm(Rng& rng) {
  const int64_t c = pick(rng, 1, 5);
  Graph g;
  g.add_input(Shape{pick(rng, 1, 3), c});
  g.add_batchnorm(0);
  auto& n = g.node(1);
  n.params[0].value = random_tensor(rng, Shape{c}, 2.0);
  n.params[1].value = random_tensor(rng, Shape{c});
  n.running_mean = random_tensor(rng, Shape{c});
  for (auto& v : n.running_var.data) v = rng.uniform(0.1, 2.0);
  return check_graph(g, random_tensor(rng, Shape{pick(rng, 1, 3), g.node(0).out_shape[0], c}));
}

inline double add(Rng& rng) {
  const int64_t f = pick(rng, 1, 8);
  Graph g;
  g.add_input(Shape{f});
  g.add_dense(0, f, rng);
  g.add_add(0, 1);
  return check_graph(g, random_tensor(rng, Shape{pick(rng, 1, 3), f}));
}

inline double concat(Rng& rng) {
  const int64_t f = pick(rng, 1, 6);
  Graph g;
  g.add_input(Shape{f});
  const int a = g.add_dense(0, pick(rng, 1, 4), rng);
  const int b = g.add_dense(0, pick(rng, 1, 4), rng);
  g.add_concat({a, 0, b});
  return check_graph(g, random_tensor(rng, Shape{pick(rng, 1, 3), f}));
}

inline double prelu(Rng& rng) {
  const int64_t c = pick(rng, 1, 5);
  Graph g;
  g.add_input(Shape{pick(rng, 1, 3), c});
  g.add_prelu(0, 0.25);
  g.node(1).params[0].value = random_tensor(rng, Shape{c});
  return check_graph(g, random_tensor(rng, Shape{pick(rng, 1, 3), g.node(0).out_shape[0], c}, 1.0, {0.0}));
}

inline double global_avg_pool(Rng& rng) {
  int64_t h, w;
  const auto s = random_spec(rng, h, w);
  Graph g;
  g.add_input(Shape{h, w, s.in_channels});
  g.add_conv2d(0, s, rng);
  g.add_global_avg_pool(1);
  return check_graph(g, random_tensor(rng, Shape{pick(rng, 1, 2), h, w, s.in_channels}));
}

/// Sign node: the backward rule is the clipped identity, so the reference is
/// the derivative of clamp(x, -1, 1).
inline double sign(Rng& rng) {
  const int64_t f = pick(rng, 1, 20);
  Graph g;
  g.add_input(Shape{f});
  g.add_sign(0);
  g.set_bitwidths(BitwidthConfig{});
  const Tensor x = random_tensor(rng, Shape{pick(rng, 1, 3), f}, 2.0, {-1.0, 1.0});
  ActivationCache cache;
  const Tensor y = g.forward(x, Mode::train, &cache);
  Tensor r(y.shape);
  for (auto& v : r.data) v = rng.uniform(-1, 1);
  const auto res = g.backward(cache, r, true);
  std::vector<double> xv = x.data;
  auto fd = oracle::central_difference(xv, kStep, [&] {
    long double s = 0;
    for (size_t i = 0; i < xv.size(); ++i) s += r[i] * std::clamp(xv[i], -1.0, 1.0);
    return static_cast<double>(s);
  });
  return res.input_grad ? oracle::relative_error(res.input_grad->data, fd) : 1.0;
}

/// Binary layers: both operands are binarized, so the reference is the same
/// product taken over real values at the +/-1 point (weights = sign of the
/// latents, input already +/-1), differentiated numerically. Padded taps hold
/// -1 as in the binary kernel.
inline double binary_layer(Rng& rng, bool conv) {
  Graph g;
  int64_t h = 1, w = 1;
  BinConvSpec s;
  int64_t f = 0, units = 0;
  if (conv) {
    s = random_spec(rng, h, w);
    g.add_input(Shape{h, w, s.in_channels});
    g.add_binary_conv2d(0, s, rng);
  } else {
    f = pick(rng, 1, 40);
    units = pick(rng, 1, 6);
    g.add_input(Shape{f});
    g.add_binary_dense(0, units, rng);
  }
  g.set_bitwidths(BitwidthConfig{});
  const int64_t batch = pick(rng, 1, 3);
  Tensor x = conv ? Tensor(Shape{batch, h, w, s.in_channels}) : Tensor(Shape{batch, f});
  for (auto& v : x.data) v = rng.below(2) ? 1.0 : -1.0;
  ActivationCache cache;
  const Tensor y = g.forward(x, Mode::train, &cache);
  Tensor r(y.shape);
  for (auto& v : r.data) v = rng.uniform(-1, 1);
  const auto res = g.backward(cache, r, true);

  const auto& lat = *g.node(1).binary.latent;
  std::vector<double> wv(lat.data.size());
  for (size_t i = 0; i < wv.size(); ++i) wv[i] = lat.data[i] >= 0 ? 1.0 : -1.0;
  std::vector<double> xv = x.data;
  auto surrogate = [&] {
    std::vector<double> out;
    if (conv) {
      out = oracle::conv_nhwc(xv, batch, h, w, s.in_channels, wv, s.out_channels, s.kernel_h, s.kernel_w, s.stride,
                              s.padding, -1.0);
    } else {
      out.assign(static_cast<size_t>(batch * units), 0.0);
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t o = 0; o < units; ++o)
          for (int64_t k = 0; k < f; ++k) out[b * units + o] += xv[b * f + k] * wv[o * f + k];
    }
    long double acc = 0;
    for (size_t i = 0; i < out.size(); ++i) acc += r[static_cast<int64_t>(i)] * out[i];
    return static_cast<double>(acc);
  };
  // exact reproduction of the forward at the +/-1 point
  if (std::abs(surrogate() - oracle::probe_loss(g, x, r)) > 1e-9) return 1.0;
  const auto fd_x = oracle::central_difference(xv, kStep, surrogate);
  const auto fd_w = oracle::central_difference(wv, kStep, surrogate);
  auto it = res.grads.find(1);
  if (!res.input_grad || it == res.grads.end() || !it->second.latent) return 1.0;
  return std::max(oracle::relative_error(res.input_grad->data, fd_x),
                  oracle::relative_error(it->second.latent->data, fd_w));
}

inline double softmax_ce_check(Rng& rng) {
  const int64_t b = pick(rng, 1, 4), k = pick(rng, 2, 8);
  Tensor z = random_tensor(rng, Shape{b, k}, 3.0);
  std::vector<int> labels(static_cast<size_t>(b));
  std::vector<bool> active(static_cast<size_t>(k), true);
  const bool masked = rng.below(2) == 1 && k > 2;
  if (masked) active[static_cast<size_t>(k - 1)] = false;
  for (auto& l : labels) l = static_cast<int>(rng.below(static_cast<uint64_t>(masked ? k - 1 : k)));
  const auto res = softmax_ce(z, labels, masked ? &active : nullptr);
  auto fd = oracle::central_difference(z.data, kStep, [&] { return softmax_ce(z, labels, masked ? &active : nullptr).loss; });
  return oracle::relative_error(res.grad.data, fd);
}

struct Kind {
  const char* name;
  double tolerance;
  std::function<double(Rng&)> run;
};

inline std::vector<Kind> all_kinds() {
  return {
      {"dense", 1e-4, dense},
      {"conv2d", 1e-4, conv2d},
      {"binary_dense", 1e-4, [](Rng& r) { return binary_layer(r, false); }},
      {"binary_conv2d", 1e-4, [](Rng& r) { return binary_layer(r, true); }},
      {"batchnorm", 1e-3, batchnorm},
      {"add", 1e-4, add},
      {"concat", 1e-4, concat},
      {"prelu", 1e-4, prelu},
      {"global_avg_pool", 1e-4, global_avg_pool},
      {"sign", 1e-4, sign},
      {"softmax_ce", 1e-5, softmax_ce_check},
  };
}

}  // namespace gradcheck
