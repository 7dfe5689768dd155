#include <benchmark/benchmark.h>

#include "binreplay/autograd.hpp"
#include "binreplay/binkernel.hpp"
#include "binreplay/learner.hpp"
#include "binreplay/qtensor.hpp"

using namespace binreplay;

namespace {

BitTensor random_bits(Rng& rng, Shape s) {
  BitTensor b(std::move(s));
  for (int64_t i = 0; i < b.numel(); ++i) b.set(i, rng.below(2));
  return b;
}

Tensor random_real(Rng& rng, Shape s) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = rng.uniform(-1, 1);
  return t;
}

void BM_XnorDot(benchmark::State& state) {
  Rng rng(1);
  const auto n = state.range(0);
  const auto a = random_bits(rng, Shape{n}), b = random_bits(rng, Shape{n});
  for (auto _ : state) benchmark::DoNotOptimize(xnor_dot(a, b));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_XnorDot)->RangeMultiplier(8)->Range(64, 1 << 18);

void BM_BinMatmul(benchmark::State& state) {
  Rng rng(2);
  const auto n = state.range(0);
  const auto a = random_bits(rng, Shape{n, n}), w = random_bits(rng, Shape{n, n});
  for (auto _ : state) benchmark::DoNotOptimize(bin_matmul(a, w));
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_BinMatmul)->RangeMultiplier(2)->Range(32, 512);

void BM_BinConv2d(benchmark::State& state) {
  Rng rng(3);
  const auto c = state.range(0);
  const BinConvSpec spec{3, 3, 1, 1, c, c};
  const auto x = random_bits(rng, Shape{1, 16, 16, c});
  const auto w = random_bits(rng, Shape{c, 3, 3, c});
  for (auto _ : state) benchmark::DoNotOptimize(bin_conv2d(x, w, spec));
  state.SetItemsProcessed(state.iterations() * 16 * 16 * c * spec.patch_size());
}
BENCHMARK(BM_BinConv2d)->RangeMultiplier(2)->Range(16, 128);

void BM_Qmatmul(benchmark::State& state) {
  Rng rng(4);
  const auto n = state.range(0);
  const auto p = quant_params(-1, 1, 8, true);
  const auto a = quantize(random_real(rng, Shape{n, n}), p), b = quantize(random_real(rng, Shape{n, n}), p);
  for (auto _ : state) benchmark::DoNotOptimize(qmatmul(a, b));
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Qmatmul)->RangeMultiplier(2)->Range(32, 256);

// One training step above the replay level of the reference model.
void BM_ReplayStep(benchmark::State& state) {
  Rng rng(5);
  Graph g = build_reference_model(Shape{16, 16, 3}, rng);
  if (state.range(0)) {
    std::vector<Tensor> cal{random_real(rng, Shape{16, 16, 16, 3})};
    g.set_bitwidths(BitwidthConfig{8, 16, 4});
    g.calibrate(cal);
  }
  const Shape latent = g.node(g.replay_level()).out_shape;
  std::vector<int64_t> dims{80};
  dims.insert(dims.end(), latent.dims().begin(), latent.dims().end());
  Tensor x{Shape(dims)};
  for (auto& v : x.data) v = rng.below(2) ? 1.0 : -1.0;
  const Tensor grad = random_real(rng, Shape{80, g.node(g.output()).out_shape[0]});
  for (auto _ : state) {
    ActivationCache cache;
    benchmark::DoNotOptimize(g.forward(x, Mode::train, &cache, g.replay_level()));
    benchmark::DoNotOptimize(g.backward(cache, grad));
  }
  state.SetLabel(state.range(0) ? "8/16/4" : "float");
}
BENCHMARK(BM_ReplayStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
