#include <gtest/gtest.h>

#include <cmath>

#include "binreplay/autograd.hpp"
#include "binreplay/io.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace binreplay;

namespace {

Graph mlp(Rng& rng, int64_t in, int64_t hidden, int64_t out) {
  Graph g;
  g.add_input(Shape{in});
  g.add_dense(0, hidden, rng);
  g.add_prelu(1);
  g.add_dense(2, hidden, rng);
  g.add_prelu(3);
  g.add_dense(4, out, rng);
  return g;
}

Tensor random_batch(Rng& rng, Shape s) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = rng.normal();
  return t;
}

std::string bytes_of(const Graph& g) {
  ByteWriter w;
  g.write(w);
  return w.take();
}

}  // namespace

TEST(Bitwidths, ParseAndValidate) {
  EXPECT_EQ(parse_bitwidth("float"), kFloatBits);
  EXPECT_EQ(parse_bitwidth("16"), 16);
  EXPECT_THROW(parse_bitwidth("7"), ValidationError);
  EXPECT_NO_THROW((BitwidthConfig{8, 16, 1}.validate()));
  EXPECT_THROW((BitwidthConfig{1, 16, 4}.validate()), ValidationError);
  EXPECT_THROW((BitwidthConfig{8, 4, 4}.validate()), ValidationError);
}

TEST(Forward, DenseIdentityReproducesInput) {
  Rng rng(1);
  Graph g;
  g.add_input(Shape{4});
  g.add_dense(0, 4, rng);
  auto& w = g.node(1).params[0].value;
  std::fill(w.data.begin(), w.data.end(), 0.0);
  for (int i = 0; i < 4; ++i) w[i * 4 + i] = 1.0;
  Tensor x(Shape{2, 4}, {1, -2, 3, 0.5, 0, 7, -1, 2});
  EXPECT_EQ(g.forward(x, Mode::infer).data, x.data);
}

TEST(Forward, BinaryDenseMatchesSignOracle) {
  Rng rng(2);
  Graph g;
  g.add_input(Shape{50});
  g.add_binary_dense(0, 7, rng);
  Tensor x(Shape{3, 50});
  for (auto& v : x.data) v = rng.below(2) ? 1.0 : -1.0;
  auto y = g.forward(x, Mode::infer);
  const auto& lat = *g.node(1).binary.latent;
  for (int b = 0; b < 3; ++b)
    for (int o = 0; o < 7; ++o) {
      double ref = 0;
      for (int k = 0; k < 50; ++k) ref += x[b * 50 + k] * (lat[o * 50 + k] >= 0 ? 1.0 : -1.0);
      EXPECT_EQ(y[b * 7 + o], ref);
    }
}

TEST(Forward, SixteenBitStaysCloseToFloat) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Graph gf = mlp(rng, 6, 8, 4);
    gf.set_bitwidths(BitwidthConfig{});
    Graph gq = gf;
    gq.set_bitwidths(BitwidthConfig{16, kFloatBits, kFloatBits});
    const Tensor x = random_batch(rng, Shape{16, 6});
    gq.calibrate({x});
    double largest = 0;
    for (const auto& n : gq.nodes())
      if (n.out_q) largest = std::max(largest, n.out_q->scale);
    const auto a = gf.forward(x, Mode::infer), b = gq.forward(x, Mode::infer);
    for (int64_t i = 0; i < a.numel(); ++i) ASSERT_LE(std::abs(a[i] - b[i]), 5 * largest);
  }
}

TEST(Forward, ShapeMismatchNamesTheNode) {
  Rng rng(4);
  Graph g;
  g.add_input(Shape{3});
  g.add_dense(0, 2, rng, "fc");
  try {
    (void)g.forward(Tensor(Shape{1, 4}), Mode::infer);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("shape"), std::string::npos);
  }
  EXPECT_THROW(g.add_dense(7, 2, rng), ValidationError);
}

TEST(Forward, QuantizedModeNeedsCalibration) {
  Rng rng(5);
  Graph g = mlp(rng, 3, 4, 2);
  g.set_bitwidths(BitwidthConfig{8, 16, 16});
  EXPECT_THROW((void)g.forward(Tensor(Shape{1, 3}), Mode::infer), ValidationError);
}

TEST(Backward, ScalarLinearExample) {
  Rng rng(6);
  Graph g;
  g.add_input(Shape{1});
  g.add_dense(0, 1, rng);
  g.node(1).params[0].value[0] = 2.0;
  g.set_bitwidths(BitwidthConfig{});
  const double a_in = 1.25;
  ActivationCache cache;
  (void)g.forward(Tensor(Shape{1, 1}, {a_in}), Mode::train, &cache);
  auto res = g.backward(cache, Tensor(Shape{1, 1}, {3.0}), true);
  EXPECT_DOUBLE_EQ((*res.input_grad)[0], 6.0);
  EXPECT_DOUBLE_EQ(res.grads.at(1).params[0][0], 3.0 * a_in);
  EXPECT_DOUBLE_EQ(res.grads.at(1).params[1][0], 3.0);
}

TEST(Backward, MissingCacheEntry) {
  Rng rng(7);
  Graph g = mlp(rng, 3, 4, 2);
  ActivationCache cache;
  (void)g.forward(Tensor(Shape{2, 3}), Mode::train, &cache);
  cache.entries.erase(3);
  EXPECT_THROW(g.backward(cache, Tensor(Shape{2, 2}, 1.0)), ValidationError);
  ActivationCache empty;
  empty.batch = 2;
  EXPECT_THROW(g.backward(empty, Tensor(Shape{2, 2}, 1.0)), ValidationError);
}

TEST(Backward, FrozenRegionGetsNoGradients) {
  Rng rng(8);
  Graph g = mlp(rng, 3, 4, 2);
  g.set_replay_level(2);
  ActivationCache cache;
  (void)g.forward(random_batch(rng, Shape{2, 3}), Mode::train, &cache);
  auto res = g.backward(cache, Tensor(Shape{2, 2}, 1.0));
  EXPECT_EQ(res.grads.count(1), 0u);
  EXPECT_EQ(res.grads.count(3), 1u);
  EXPECT_EQ(res.grads.count(5), 1u);
}

class GradientCheck : public ::testing::TestWithParam<int> {};

TEST_P(GradientCheck, FloatModeMatchesCentralDifferences) {
  const auto kinds = gradcheck::all_kinds();
  const auto& kind = kinds.at(static_cast<size_t>(GetParam()));
  Rng rng(100 + GetParam());
  for (int i = 0; i < 10; ++i) {
    const double err = kind.run(rng);
    ASSERT_LE(err, kind.tolerance) << kind.name << " instance " << i;
  }
}

INSTANTIATE_TEST_SUITE_P(Kinds, GradientCheck, ::testing::Range(0, static_cast<int>(gradcheck::all_kinds().size())),
                         [](const auto& info) { return std::string(gradcheck::all_kinds()[info.param].name); });

TEST(Backward, QuantizedGradientsTrackFloat) {
  Rng rng(9);
  for (int net = 0; net < 5; ++net) {
    Graph base = mlp(rng, 8, 12, 5);
    const Tensor x = random_batch(rng, Shape{8, 8});
    const Tensor r = random_batch(rng, Shape{8, 5});
    double prev = -1;
    for (int bits : {8, 16, 32}) {
      Graph gq = base;
      gq.set_bitwidths(BitwidthConfig{kFloatBits, bits, kFloatBits});
      Graph gf = gq;
      gf.set_bitwidths(BitwidthConfig{});
      ActivationCache cq, cf;
      (void)gq.forward(x, Mode::train, &cq);
      (void)gf.forward(x, Mode::train, &cf);
      auto rq = gq.backward(cq, r), rf = gf.backward(cf, r);
      double worst = 1.0;
      for (const auto& [id, pg] : rf.grads)
        for (size_t p = 0; p < pg.params.size(); ++p)
          worst = std::min(worst, oracle::cosine(rq.grads.at(id).params[p].data, pg.params[p].data));
      if (bits >= 16) EXPECT_GE(worst, 0.99);
      EXPECT_GE(worst, prev - 1e-12);
      prev = worst;
    }
  }
}

TEST(Ste, ClipRule) {
  auto g = ste_backward(Tensor(Shape{3}, {2, 2, 2}), Tensor(Shape{3}, {0.5, 1.5, -1.0}));
  EXPECT_EQ(g.data, (std::vector<double>{2, 0, 2}));
  auto inf = ste_backward(Tensor(Shape{2}, {2, 3}), Tensor(Shape{2}, {1e9, -5}), INFINITY);
  EXPECT_EQ(inf.data, (std::vector<double>{2, 3}));
}

TEST(Batchnorm, IdentityAndBetaGradient) {
  Tensor x(Shape{2, 3}, {1, 2, 3, -4, 5, -6});
  Tensor one(Shape{3}, 1.0), zero(Shape{3});
  auto y = batchnorm_forward(x, one, zero, zero, one, 0.0);
  EXPECT_EQ(y.data, x.data);
  Tensor go(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  auto g = batchnorm_backward(go, x, one, zero, one, 0.0);
  EXPECT_EQ(g.beta.data, (std::vector<double>{5, 7, 9}));
  EXPECT_THROW(batchnorm_forward(x, Tensor(Shape{2}, 1.0), zero, zero, one, 0.0), ValidationError);
}

TEST(SoftmaxCe, UniformLogitsAndZeroSum) {
  for (int k : {2, 5, 10}) {
    auto r = softmax_ce(Tensor(Shape{1, k}), {0});
    EXPECT_NEAR(r.loss, std::log(k), 1e-12);
  }
  Rng rng(10);
  auto r = softmax_ce(random_batch(rng, Shape{4, 6}), {0, 5, 2, 2});
  for (int i = 0; i < 4; ++i) {
    double s = 0;
    for (int j = 0; j < 6; ++j) s += r.grad[i * 6 + j];
    EXPECT_NEAR(s, 0.0, 1e-15);
  }
}

TEST(Sgd, ZeroGradientsKeepParametersBitIdentical) {
  Rng rng(11);
  for (auto bits : {BitwidthConfig{}, BitwidthConfig{8, 16, 4}, BitwidthConfig{kFloatBits, 8, 1}}) {
    Graph g;
    g.add_input(Shape{4, 4, 2});
    g.add_conv2d(0, BinConvSpec{3, 3, 1, 1, 2, 4}, rng);
    g.add_batchnorm(1);
    g.add_sign(2);
    g.add_binary_conv2d(3, BinConvSpec{3, 3, 1, 1, 4, 4}, rng);
    g.add_prelu(4);
    g.set_bitwidths(bits);
    const auto before = bytes_of(g);
    GradientMap zero;
    for (int id = 1; id < g.size(); ++id) {
      if (!g.is_trainable(id)) continue;
      ParamGrads pg;
      for (const auto& p : g.node(id).params) pg.params.emplace_back(p.value.shape);
      if (g.node(id).binary.latent) pg.latent = Tensor(g.node(id).binary.latent->shape);
      zero[id] = std::move(pg);
    }
    sgd_step(g, zero, 0.1);
    EXPECT_EQ(bytes_of(g), before);
  }
}

TEST(Sgd, LatentCrossingZeroFlipsTheBit) {
  Rng rng(12);
  Graph g;
  g.add_input(Shape{2});
  g.add_binary_dense(0, 1, rng);
  g.set_bitwidths(BitwidthConfig{kFloatBits, kFloatBits, 8});
  auto& lat = *g.node(1).binary.latent;
  const auto& grid = *g.node(1).binary.latent_grid;
  lat[0] = grid.scale;
  lat[1] = -grid.scale;
  g.node(1).binary.effective = binarize(lat);
  GradientMap gm;
  gm[1].latent = Tensor(Shape{1, 2}, {1.0, 0.0});
  sgd_step(g, gm, 3 * grid.scale);
  EXPECT_LT(lat[0], 0.0);
  EXPECT_FALSE(g.node(1).binary.effective.bit(0));
  EXPECT_FALSE(g.node(1).binary.effective.bit(1));
  // clamp to [-1, 1]
  gm[1].latent = Tensor(Shape{1, 2}, {100.0, -100.0});
  sgd_step(g, gm, 1.0);
  const double lowest = -static_cast<double>(grid.qmax()) * grid.scale;
  EXPECT_EQ(lat[0], lowest);
  EXPECT_EQ(lat[1], -lowest);
  EXPECT_GE(lowest, -1.0);
}

TEST(Sgd, ToyRegressionConvergesNearOptimum) {
  // y = 3 x0 - 1.5 x1 on the four unit vectors: optimum w = (3, -1.5), b = 0
  Rng rng(13);
  Graph g;
  g.add_input(Shape{2});
  g.add_dense(0, 1, rng);
  g.set_bitwidths(BitwidthConfig{kFloatBits, 16, kFloatBits});
  Tensor x(Shape{4, 2}, {1, 0, 0, 1, -1, 0, 0, -1});
  const std::vector<double> t{3, -1.5, -3, 1.5};
  for (int step = 0; step < 300; ++step) {
    ActivationCache c;
    auto y = g.forward(x, Mode::train, &c);
    Tensor gy(y.shape);
    for (int i = 0; i < 4; ++i) gy[i] = (y[i] - t[i]) / 4.0;
    sgd_step(g, g.backward(c, gy).grads, 1.0);
  }
  const auto& w = g.node(1).params[0];
  const auto& b = g.node(1).params[1];
  EXPECT_LE(std::abs(w.value[0] - 3.0), 2 * w.grid->scale);
  EXPECT_LE(std::abs(w.value[1] + 1.5), 2 * w.grid->scale);
  EXPECT_LE(std::abs(b.value[0]), 2 * b.grid->scale);
}

TEST(Sgd, TrajectoriesAreDeterministic) {
  auto run = [] {
    Rng rng(14);
    Graph g = mlp(rng, 5, 6, 3);
    g.set_bitwidths(BitwidthConfig{kFloatBits, 8, kFloatBits});
    for (int s = 0; s < 20; ++s) {
      ActivationCache c;
      auto y = g.forward(random_batch(rng, Shape{4, 5}), Mode::train, &c);
      auto l = softmax_ce(y, {0, 1, 2, 0});
      sgd_step(g, g.backward(c, l.grad).grads, 0.05);
    }
    return bytes_of(g);
  };
  EXPECT_EQ(run(), run());
}

TEST(Freeze, RegionBelowReplayLevelNeverChanges) {
  Rng rng(15);
  Graph g;
  g.add_input(Shape{6, 6, 2});
  g.add_conv2d(0, BinConvSpec{3, 3, 1, 1, 2, 4}, rng);
  g.add_batchnorm(1);
  g.add_sign(2);
  g.add_binary_conv2d(3, BinConvSpec{3, 3, 1, 1, 4, 4}, rng);
  g.add_batchnorm(4);
  g.add_sign(5);
  g.add_binary_conv2d(6, BinConvSpec{3, 3, 1, 1, 4, 4}, rng);
  g.add_batchnorm(7);
  g.add_global_avg_pool(8);
  g.set_replay_level(6);
  g.set_bitwidths(BitwidthConfig{8, 16, 4});
  std::vector<Tensor> cal{random_batch(rng, Shape{8, 6, 6, 2})};
  g.calibrate(cal);
  const auto frozen = g.frozen_region_bytes();
  const auto level_in = g.forward(cal[0], Mode::infer, nullptr, 0, 6);
  for (int s = 0; s < 10; ++s) {
    ActivationCache c;
    auto y = g.forward(level_in, Mode::train, &c, 6);
    sgd_step(g, g.backward(c, random_batch(rng, y.shape)).grads, 0.1);
  }
  EXPECT_EQ(g.frozen_region_bytes(), frozen);
}

TEST(Freeze, OneBitBinaryWeightsStayPut) {
  Rng rng(16);
  Graph g;
  g.add_input(Shape{12});
  g.add_binary_dense(0, 8, rng);
  g.add_batchnorm(1);
  g.add_sign(2);
  g.add_binary_dense(3, 4, rng);
  g.add_batchnorm(4);
  g.set_bitwidths(BitwidthConfig{kFloatBits, 16, 1});
  const auto w1 = g.node(1).binary.effective, w4 = g.node(4).binary.effective;
  EXPECT_FALSE(g.node(1).binary.latent.has_value());
  EXPECT_FALSE(g.is_trainable(4));
  EXPECT_TRUE(g.is_trainable(5));
  for (int s = 0; s < 10; ++s) {
    ActivationCache c;
    auto y = g.forward(random_batch(rng, Shape{4, 12}), Mode::train, &c);
    sgd_step(g, g.backward(c, random_batch(rng, y.shape)).grads, 0.5);
  }
  EXPECT_EQ(g.node(1).binary.effective, w1);
  EXPECT_EQ(g.node(4).binary.effective, w4);
}

TEST(SetBitwidths, LatentsLandOnGridKeepingSign) {
  Rng rng(17);
  Graph g;
  g.add_input(Shape{30});
  g.add_binary_dense(0, 20, rng);
  const auto eff = g.node(1).binary.effective;
  for (int bits : {4, 8, 16, 32}) {
    Graph h = g;
    h.set_bitwidths(BitwidthConfig{kFloatBits, kFloatBits, bits});
    EXPECT_EQ(h.node(1).binary.effective, eff) << bits;
    const auto& grid = *h.node(1).binary.latent_grid;
    for (double v : h.node(1).binary.latent->data) {
      const double k = v / grid.scale;
      EXPECT_EQ(k, std::nearbyint(k));
    }
  }
}

TEST(SetBitwidths, EightBitAccumulatorHeadroom) {
  Rng rng(18);
  Graph g;
  g.add_input(Shape{70000});  // 70000 * 255 * 128 > 2^31
  g.add_dense(0, 1, rng);
  EXPECT_THROW(g.set_bitwidths(BitwidthConfig{8, 16, 4}), ValidationError);
  EXPECT_NO_THROW(g.set_bitwidths(BitwidthConfig{16, 16, 4}));
}

TEST(MacCount, SingleDenseLayer) {
  Rng rng(19);
  Graph g;
  g.add_input(Shape{7});
  g.add_dense(0, 5, rng);
  EXPECT_EQ(mac_count(g, MacMode::forward), 35);
  EXPECT_EQ(mac_count(g, MacMode::backward), 70);
}

TEST(MacCount, FrozenLayerContributesNothing) {
  Rng rng(20);
  Graph g;
  g.add_input(Shape{7});
  g.add_dense(0, 5, rng);
  g.node(1).trainable = false;
  EXPECT_EQ(mac_count(g, MacMode::backward), 0);
  // a frozen layer between trainable ones still passes the gradient on
  Graph h = mlp(rng, 4, 6, 3);
  h.node(3).trainable = false;
  EXPECT_EQ(mac_count(h, MacMode::backward), 2 * 24 + 36 + 2 * 18);
}

TEST(MacCount, ThreeLayerRatio) {
  Rng rng(21);
  Graph g = mlp(rng, 10, 20, 5);
  const double ratio = static_cast<double>(mac_count(g, MacMode::backward)) / mac_count(g, MacMode::forward);
  EXPECT_GE(ratio, 1.9);
  EXPECT_LE(ratio, 2.1);
}

TEST(Serialization, RoundTripPreservesEverything) {
  Rng rng(22);
  Graph g;
  g.add_input(Shape{6, 6, 2});
  g.add_conv2d(0, BinConvSpec{3, 3, 1, 1, 2, 4}, rng, "stem");
  g.add_batchnorm(1);
  g.add_sign(2);
  g.add_binary_conv2d(3, BinConvSpec{3, 3, 2, 1, 4, 4}, rng);
  g.add_prelu(4);
  g.add_global_avg_pool(5);
  g.add_binary_dense(6, 3, rng);
  g.set_replay_level(3);
  g.set_bitwidths(BitwidthConfig{8, 16, 4});
  const Tensor x = random_batch(rng, Shape{3, 6, 6, 2});
  g.calibrate({x});
  ByteWriter w;
  g.write(w);
  ByteReader r(w.buffer());
  Graph back = Graph::read(r);
  EXPECT_TRUE(r.at_end());
  EXPECT_EQ(bytes_of(back), w.buffer());
  EXPECT_EQ(back.replay_level(), 3);
  EXPECT_EQ(back.bitwidths(), g.bitwidths());
  EXPECT_EQ(back.node(1).name, "stem");
  EXPECT_EQ(back.forward(x, Mode::infer).data, g.forward(x, Mode::infer).data);

  std::string bad = w.buffer();
  bad[3] = '\x7f';  // implausible node count
  ByteReader rb(bad);
  EXPECT_THROW(Graph::read(rb), FormatError);
  ByteReader rt(std::string_view(w.buffer()).substr(0, w.buffer().size() / 2));
  EXPECT_THROW(Graph::read(rt), FormatError);
}
