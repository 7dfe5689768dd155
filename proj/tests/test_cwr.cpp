#include <gtest/gtest.h>

#include "binreplay/autograd.hpp"
#include "binreplay/cwr.hpp"
#include "oracles.hpp"

using namespace binreplay;

namespace {

void set_row(CwrHead& h, int cls, std::vector<double> v) {
  const int64_t row = h.feature_dim() + 1;
  std::copy(v.begin(), v.end(), h.mutable_tw().data.begin() + cls * row);
}

std::vector<double> cw_row(const CwrHead& h, int cls) {
  const int64_t row = h.feature_dim() + 1;
  return {h.cw().data.begin() + cls * row, h.cw().data.begin() + (cls + 1) * row};
}

std::vector<double> tw_row(const CwrHead& h, int cls) {
  const int64_t row = h.feature_dim() + 1;
  return {h.tw().data.begin() + cls * row, h.tw().data.begin() + (cls + 1) * row};
}

}  // namespace

TEST(CwrInit, ZeroStateAndShape) {
  CwrHead h(64, 10);
  EXPECT_EQ(h.cw().shape, (Shape{10, 65}));
  EXPECT_EQ(h.tw().shape, h.cw().shape);
  Rng rng(1);
  Tensor f(Shape{3, 64});
  for (auto& v : f.data) v = rng.normal();
  auto logits = h.predict(f);
  for (double v : logits.data) EXPECT_EQ(v, 0.0);
  for (int p : argmax_rows(logits)) EXPECT_EQ(p, 0);
  EXPECT_THROW(CwrHead(0, 3), ValidationError);
}

TEST(CwrInit, ReinitDiscardsState) {
  CwrHead h(2, 3);
  h.begin_experience({0, 1});
  set_row(h, 0, {1, 2, 3});
  h.add_count(0, 5);
  h.add_count(1, 5);
  h.consolidate();
  h = CwrHead(2, 3);
  for (double v : h.cw().data) EXPECT_EQ(v, 0.0);
  for (auto c : h.past_counts()) EXPECT_EQ(c, 0);
}

TEST(CwrBegin, ReloadRules) {
  CwrHead h(2, 4);
  h.begin_experience({0, 1});
  for (double v : h.tw().data) EXPECT_EQ(v, 0.0);
  set_row(h, 0, {1, 0, 0.5});
  set_row(h, 1, {-1, 2, 0});
  h.add_count(0, 4);
  h.add_count(1, 4);
  h.consolidate();
  h.begin_experience({1, 2});
  EXPECT_EQ(tw_row(h, 1), cw_row(h, 1));
  EXPECT_EQ(tw_row(h, 2), (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(tw_row(h, 0), (std::vector<double>{0, 0, 0}));  // not present, reset
  for (auto c : h.cur_counts()) EXPECT_EQ(c, 0);
  EXPECT_THROW(h.begin_experience({}), ValidationError);
  EXPECT_THROW(h.add_count(0, 1), ValidationError);
}

TEST(CwrConsolidate, FirstExperienceIsMeanShiftedTw) {
  CwrHead h(2, 3);
  h.begin_experience({0, 2});
  set_row(h, 0, {1, 2, 3});
  set_row(h, 2, {3, 0, -1});
  h.add_count(0, 10);
  h.add_count(2, 6);
  h.consolidate();
  EXPECT_EQ(cw_row(h, 0), (std::vector<double>{-1, 1, 2}));
  EXPECT_EQ(cw_row(h, 2), (std::vector<double>{1, -1, -2}));
  EXPECT_EQ(cw_row(h, 1), (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(h.past_counts(), (std::vector<int64_t>{10, 0, 6}));
}

TEST(CwrConsolidate, EqualCountsAverage) {
  CwrHead h(1, 2);
  h.begin_experience({0, 1});
  set_row(h, 0, {2, 0});
  set_row(h, 1, {-2, 0});
  h.add_count(0, 8);
  h.add_count(1, 8);
  h.consolidate();  // cw0 = (2, 0), cw1 = (-2, 0)
  h.begin_experience({0, 1});
  set_row(h, 0, {4, 1});
  set_row(h, 1, {0, 1});
  h.add_count(0, 8);
  h.add_count(1, 8);
  h.consolidate();  // mean = (2, 1)
  EXPECT_EQ(cw_row(h, 0), (std::vector<double>{(2 + 2) / 2.0, 0}));
  EXPECT_EQ(cw_row(h, 1), (std::vector<double>{(-2 - 2) / 2.0, 0}));
}

TEST(CwrConsolidate, TwoExperienceHandTable) {
  // experience 1: classes 0, 1 with 4 and 12 samples
  //   tw0 = (1, 1), tw1 = (3, -1), mean = (2, 0)
  //   cw0 = (-1, 1), cw1 = (1, -1)
  // experience 2: classes 1, 2 with 3 and 3 samples
  //   tw reloaded: tw1 = (1, -1); trained to tw1 = (2, 2), tw2 = (0, -2), mean = (1, 0)
  //   w1 = sqrt(12 / 3) = 2: cw1 = (2 * (1, -1) + (1, 2)) / 3 = (1, 0)
  //   w2 = 0: cw2 = (-1, -2)
  CwrHead h(1, 3);
  h.begin_experience({0, 1});
  set_row(h, 0, {1, 1});
  set_row(h, 1, {3, -1});
  h.add_count(0, 4);
  h.add_count(1, 12);
  h.consolidate();
  EXPECT_EQ(cw_row(h, 0), (std::vector<double>{-1, 1}));
  EXPECT_EQ(cw_row(h, 1), (std::vector<double>{1, -1}));
  h.begin_experience({1, 2});
  EXPECT_EQ(tw_row(h, 1), (std::vector<double>{1, -1}));
  set_row(h, 1, {2, 2});
  set_row(h, 2, {0, -2});
  h.add_count(1, 3);
  h.add_count(2, 3);
  h.consolidate();
  EXPECT_EQ(cw_row(h, 0), (std::vector<double>{-1, 1}));
  EXPECT_EQ(cw_row(h, 1), (std::vector<double>{1, 0}));
  EXPECT_EQ(cw_row(h, 2), (std::vector<double>{-1, -2}));
  EXPECT_EQ(h.past_counts(), (std::vector<int64_t>{4, 15, 3}));
}

TEST(CwrConsolidate, ZeroCountForTrainedClassIsAnError) {
  CwrHead h(1, 2);
  h.begin_experience({0, 1});
  h.add_count(0, 3);
  EXPECT_THROW(h.consolidate(), ValidationError);
}

TEST(CwrConsolidate, InvariantToGlobalShiftOfTrainedRows) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    CwrHead a(4, 5);
    a.begin_experience({0, 1, 2, 3, 4});
    for (auto& v : a.mutable_tw().data) v = rng.uniform(-1, 1);
    for (int c = 0; c < 5; ++c) a.add_count(c, 1 + rng.below(10));
    a.consolidate();
    const std::vector<int> present{1, 3, 4};
    a.begin_experience(present);
    for (int c : present) {
      for (int j = 0; j < 5; ++j) a.mutable_tw()[c * 5 + j] += rng.uniform(-0.5, 0.5);
      a.add_count(c, 1 + rng.below(10));
    }
    CwrHead b = a;
    const double shift = rng.uniform(-3, 3);
    for (int c : present)
      for (int j = 0; j < 5; ++j) b.mutable_tw()[c * 5 + j] += shift;
    a.consolidate();
    b.consolidate();
    // rows 0 and 2 untouched, the rest agree up to rounding
    for (int c : {0, 2}) EXPECT_EQ(cw_row(a, c), cw_row(b, c));
    for (int64_t i = 0; i < a.cw().numel(); ++i) EXPECT_NEAR(a.cw()[i], b.cw()[i], 1e-6);
  }
}

TEST(CwrPredict, OneHotRowsAndBiasShift) {
  CwrHead h(3, 3);
  h.begin_experience({0, 1, 2});
  set_row(h, 0, {1, 0, 0, 0});
  set_row(h, 1, {0, 1, 0, 0});
  set_row(h, 2, {0, 0, 1, 0});
  for (int c = 0; c < 3; ++c) h.add_count(c, 1);
  h.consolidate();  // mean row = 1/3 everywhere except the bias
  Tensor f(Shape{2, 3}, {0.5, -2, 4, 1, 1, 0});
  const auto before = h.tw();
  auto logits = h.predict(f);
  for (int i = 0; i < 2; ++i) {
    const double mean = (f[i * 3] + f[i * 3 + 1] + f[i * 3 + 2]) / 3.0;
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(logits[i * 3 + c], f[i * 3 + c] - mean, 1e-6);
  }
  EXPECT_EQ(h.tw(), before);
  EXPECT_EQ(argmax_rows(logits), (std::vector<int>{2, 0}));  // tie 0/1 in row 2 goes to 0
  EXPECT_THROW(h.predict(Tensor(Shape{1, 4})), ValidationError);
}

TEST(CwrTrain, FeatureGradientMatchesFiniteDifferences) {
  Rng rng(3);
  CwrHead h(5, 4);
  h.begin_experience({0, 2, 3});
  for (auto& v : h.mutable_tw().data) v = rng.uniform(-1, 1);
  Tensor f(Shape{3, 5});
  for (auto& v : f.data) v = rng.normal();
  const std::vector<int> labels{0, 3, 2};
  auto loss = [&] { return softmax_ce(h.train_logits(f), labels, &h.active()).loss; };
  const auto r = softmax_ce(h.train_logits(f), labels, &h.active());
  const auto g = h.feature_grad(r.grad);
  auto fd = oracle::central_difference(f.data, 1e-6, loss);
  EXPECT_LE(oracle::relative_error(g.data, fd), 1e-6);
}

TEST(CwrTrain, StepsOnlyTouchActiveRowsAndLowerLoss) {
  Rng rng(4);
  CwrHead h(6, 5);
  h.begin_experience({1, 4});
  Tensor f(Shape{8, 6});
  for (auto& v : f.data) v = rng.normal();
  std::vector<int> labels(8);
  for (int i = 0; i < 8; ++i) labels[i] = i % 2 ? 1 : 4;
  double first = 0, last = 0;
  for (int s = 0; s < 50; ++s) {
    auto r = softmax_ce(h.train_logits(f), labels, &h.active());
    if (s == 0) first = r.loss;
    last = r.loss;
    h.train_step(f, r.grad, 0.1);
  }
  EXPECT_LT(last, first);
  for (int c : {0, 2, 3})
    for (double v : tw_row(h, c)) EXPECT_EQ(v, 0.0);
}

TEST(CwrFormat, RoundTripKeepsCwAndCounts) {
  CwrHead h(2, 3);
  h.begin_experience({0, 2});
  set_row(h, 0, {0.25, 1.5, -2});
  set_row(h, 2, {1, -0.5, 0});
  h.add_count(0, 7);
  h.add_count(2, 9);
  h.consolidate();
  ByteWriter w;
  h.write(w);
  ByteReader r(w.buffer());
  auto back = CwrHead::read(r);
  EXPECT_EQ(back.cw(), h.cw());
  EXPECT_EQ(back.past_counts(), h.past_counts());
  EXPECT_TRUE(r.at_end());
}
