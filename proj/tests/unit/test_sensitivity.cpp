#include "fixtures.hpp"

#include "attnlab/sensitivity.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace attnlab;
using namespace attnlab::testing;

namespace {

std::vector<TokenSequence> corpus(std::size_t count, std::mt19937_64& rng) {
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(random_tokens(3 + i % 5, 32, rng));
  return out;
}

SensitivityMap map_of(std::initializer_list<double> values, Eigen::Index rows, Eigen::Index cols) {
  SensitivityMap m;
  m.values.resize(rows, cols);
  std::copy(values.begin(), values.end(), m.values.data());
  return m;
}

}  // namespace

TEST(Sensitivity, ZeroLmHeadGivesZeroSensitivity) {
  auto w = init_random(tiny_config(1));
  w.lm_head.setZero();
  std::mt19937_64 rng(1);
  const auto s = avg_sensitivity(w, corpus(4, rng), random_target(3, 32, rng));
  EXPECT_LE(s.values.cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Sensitivity, DuplicationAndPermutationInvariance) {
  const auto w = init_random(tiny_config(2));
  std::mt19937_64 rng(2);
  const auto d = corpus(5, rng);
  const auto y = random_target(2, 32, rng);
  const auto base = avg_sensitivity(w, d, y);
  auto doubled = d;
  doubled.insert(doubled.end(), d.begin(), d.end());
  EXPECT_EQ(avg_sensitivity(w, doubled, y).values, base.values);
  auto shuffled = doubled;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  EXPECT_EQ(avg_sensitivity(w, shuffled, y).values, base.values);
}

TEST(Sensitivity, AveragesOverDisjointSplits) {
  const auto w = init_random(tiny_config(3));
  std::mt19937_64 rng(3);
  const auto d = corpus(6, rng);
  const auto y = random_target(2, 32, rng);
  const std::vector<TokenSequence> a(d.begin(), d.begin() + 2), b(d.begin() + 2, d.end());
  const Matrix combined =
      (2.0 * avg_sensitivity(w, a, y).values + 4.0 * avg_sensitivity(w, b, y).values) / 6.0;
  EXPECT_LE((avg_sensitivity(w, d, y).values - combined).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Sensitivity, HeadValueIsNormalizedSumOfAbsoluteAttentionGradients) {
  const auto w = init_random(tiny_config(4));
  const TokenSequence z{1, 5, 9, 2};
  const TargetSequence y{{7, 3}};
  const auto g0 = grad_logprob_wrt_attention(w, z, 7);
  TokenSequence z1 = z;
  z1.push_back(7);
  const auto g1 = grad_logprob_wrt_attention(w, z1, 3);
  const auto s = sensitivity_head(w, z, y);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h)
      EXPECT_NEAR(s(l, h), g0.row(l, h).cwiseAbs().sum() + g1.row(l, h).cwiseAbs().sum(), 1e-14);
  const std::vector<TokenSequence> one{z};
  EXPECT_NEAR(avg_sensitivity(w, one, y).values(1, 0), s(1, 0) / 6.0, 1e-14);
}

TEST(Sensitivity, ClipExamples) {
  auto clipped = clip_sensitivity(map_of({1, 2, 3, 4}, 2, 2), 0.75).values;
  EXPECT_EQ(clipped.sum(), 4.0);
  EXPECT_EQ((clipped.array() > 0).count(), 1);
  // drop_fraction 0 still zeroes the minimum.
  clipped = clip_sensitivity(map_of({1, 2, 3, 4}, 2, 2), 0.0).values;
  EXPECT_EQ((clipped.array() > 0).count(), 3);
  // A single head always survives.
  EXPECT_EQ(clip_sensitivity(map_of({0.3}, 1, 1), 0.75).values(0, 0), 0.3);
  // Ties at the threshold are all dropped.
  clipped = clip_sensitivity(map_of({5, 5, 5, 5}, 2, 2), 0.5).values;
  EXPECT_EQ(clipped.sum(), 0.0);
  EXPECT_THROW(clip_sensitivity(map_of({1, 2}, 1, 2), 1.0), RangeError);
  EXPECT_THROW(clip_sensitivity(map_of({1, 2}, 1, 2), -0.1), RangeError);
}

TEST(Sensitivity, ClipKeepsTopQuarterOfDistinctValues) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index L : {1, 2, 3, 4}) {
    for (Eigen::Index H : {1, 2, 4, 5}) {
      SensitivityMap m;
      m.values.resize(L, H);
      for (Eigen::Index i = 0; i < m.values.size(); ++i) m.values.data()[i] = u(rng);
      const auto c = clip_sensitivity(m, 0.75).values;
      const auto n = static_cast<double>(L * H);
      EXPECT_EQ((c.array() > 0).count(), static_cast<Eigen::Index>(std::ceil(0.25 * n - 1e-9))) << L << "x" << H;
      EXPECT_TRUE((c.array() <= m.values.array()).all());
      EXPECT_TRUE((c.array() >= 0).all());
    }
  }
}

TEST(Sensitivity, InputErrors) {
  const auto w = init_random(tiny_config(6, 32, 6));
  const std::vector<TokenSequence> empty;
  EXPECT_THROW(avg_sensitivity(w, empty, TargetSequence{{1}}), RangeError);
  EXPECT_THROW(sensitivity_head(w, TokenSequence{1, 2, 3, 4, 5}, TargetSequence{{1, 2}}), ContextOverflow);
}
