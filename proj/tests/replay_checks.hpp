#pragma once

// Monte-Carlo checks of the replay memory shared by the unit and acceptance
// tests.

#include <boost/math/distributions/chi_squared.hpp>

#include "binreplay/replay.hpp"

namespace replay_check {

using namespace binreplay;

/// A 32-bit latent whose bits spell `id`, so a stored sample can be traced
/// back to its position in the stream.
inline LatentSample tagged(int label, uint32_t id) {
  BitTensor b(Shape{32});
  for (int i = 0; i < 32; ++i) b.set(i, (id >> i) & 1u);
  return LatentSample{std::move(b), label};
}

inline uint32_t tag_of(const LatentSample& s) {
  uint32_t id = 0;
  for (int i = 0; i < 32; ++i)
    if (s.activation.bit(i)) id |= 1u << i;
  return id;
}

struct Inclusion {
  std::vector<int64_t> counts;  // per stream element
  double chi_square = 0.0;
  double p_value = 0.0;
};

/// One class receives `first` samples in one experience and `second` in the
/// next; each trial records which of the first + second stream elements are
/// held. Under uniform inclusion every element is kept with probability
/// p = quota / (first + second), so sum (c - T p)^2 / (T p (1 - p)) is
/// approximately chi-square with first + second - 1 degrees of freedom.
inline Inclusion inclusion_frequencies(int64_t quota, int first, int second, int trials, uint64_t seed) {
  const int m = first + second;
  Inclusion out;
  out.counts.assign(static_cast<size_t>(m), 0);
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    ReplayMemory mem(quota, 1, Shape{32});
    std::vector<LatentSample> a, b;
    for (int i = 0; i < first; ++i) a.push_back(tagged(0, static_cast<uint32_t>(i)));
    for (int i = first; i < m; ++i) b.push_back(tagged(0, static_cast<uint32_t>(i)));
    mem.update_after_experience(a, rng);
    mem.update_after_experience(b, rng);
    for (const auto& s : mem.bucket(0)) ++out.counts[tag_of(s)];
  }
  const double p = static_cast<double>(std::min<int64_t>(quota, m)) / m;
  const double expect = trials * p, var = trials * p * (1 - p);
  for (auto c : out.counts) out.chi_square += (c - expect) * (c - expect) / var;
  boost::math::chi_squared dist(m - 1);
  out.p_value = boost::math::cdf(boost::math::complement(dist, out.chi_square));
  return out;
}

}  // namespace replay_check
