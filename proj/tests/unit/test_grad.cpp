#include "fixtures.hpp"

#include <gtest/gtest.h>

using namespace attnlab;
using namespace attnlab::testing;

namespace {

std::vector<Objective> all_objectives(const TargetSequence& y, std::vector<std::size_t> payload) {
  const auto u = HeadWeighting::uniform(2, 2);
  return {target_logprobs_objective(y), att_loss_objective(y, payload, u),
          gen_att_loss_objective(y, payload, Distance::l1_to_ideal, u),
          gen_att_loss_objective(y, payload, Distance::kl_to_ideal, u)};
}

}  // namespace

TEST(Grad, MatchesCentralDifferencesForEveryLoss) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto w = init_random(tiny_config(seed));
    std::mt19937_64 rng(seed);
    const auto x = random_tokens(10, 32, rng);
    const std::vector<std::size_t> I{0, 4, 9};
    for (const auto& o : all_objectives(random_target(3, 32, rng), {1, 2, 5})) {
      FiniteDiffOptions opt;
      opt.seed = seed;
      const auto rep = finite_diff_check(w, x, I, o, opt);
      EXPECT_EQ(rep.directions, 24u);
      EXPECT_TRUE(rep.passed) << o.name() << " max rel " << rep.max_relative_error;
    }
  }
}

TEST(Grad, CorruptedGradientFailsTheCheck) {
  const auto w = init_random(tiny_config(1));
  std::mt19937_64 rng(1);
  const auto x = random_tokens(8, 32, rng);
  const std::vector<std::size_t> I{2, 7};
  const auto o = target_logprobs_objective(random_target(2, 32, rng));
  auto g = grad_wrt_tokens(w, x, I, o);
  g.values *= 1.01;
  EXPECT_FALSE(check_token_gradients(w, x, g, o).passed);
  g.values /= 1.01;
  EXPECT_TRUE(check_token_gradients(w, x, g, o).passed);
}

TEST(Grad, LinearInTheLossWeights) {
  const auto w = init_random(tiny_config(2));
  std::mt19937_64 rng(2);
  const auto x = random_tokens(9, 32, rng);
  const auto y = random_target(2, 32, rng);
  const std::vector<std::size_t> I{3, 8}, J{1, 4};
  HeadWeighting a{Matrix::Zero(2, 2)}, b{Matrix::Zero(2, 2)}, sum{Matrix::Zero(2, 2)};
  a.values(0, 1) = 1.0;
  b.values(1, 0) = 2.0;
  sum.values = a.values + b.values;
  const auto ga = grad_wrt_tokens(w, x, I, att_loss_objective(y, J, a)).values;
  const auto gb = grad_wrt_tokens(w, x, I, att_loss_objective(y, J, b)).values;
  const auto gs = grad_wrt_tokens(w, x, I, att_loss_objective(y, J, sum)).values;
  EXPECT_LE((ga + gb - gs).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Grad, DuplicatePositionsGiveIdenticalRows) {
  const auto w = init_random(tiny_config(3));
  std::mt19937_64 rng(3);
  const auto x = random_tokens(6, 32, rng);
  const std::vector<std::size_t> I{4, 1, 4};
  const auto g = grad_wrt_tokens(w, x, I, target_logprobs_objective(random_target(2, 32, rng)));
  EXPECT_EQ(g.values.row(0), g.values.row(2));
  EXPECT_NE(g.values.row(0), g.values.row(1));
}

TEST(Grad, ZeroHeadWeightsGiveZeroGradient) {
  const auto w = init_random(tiny_config(4));
  std::mt19937_64 rng(4);
  const auto x = random_tokens(6, 32, rng);
  const std::vector<std::size_t> I{5};
  const auto o = att_loss_objective(random_target(2, 32, rng), {1}, HeadWeighting{Matrix::Zero(2, 2)});
  EXPECT_EQ(evaluate(w, x, o), 0.0);
  EXPECT_EQ(grad_wrt_tokens(w, x, I, o).values.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Grad, GradientAtAPayloadFreePositionBeforeJIsNonzero) {
  // Positions earlier than J still influence later attention rows.
  const auto w = init_random(tiny_config(5));
  std::mt19937_64 rng(5);
  const auto x = random_tokens(7, 32, rng);
  const std::vector<std::size_t> I{0};
  const auto o = att_loss_objective(random_target(2, 32, rng), {3}, HeadWeighting::uniform(2, 2));
  EXPECT_GT(grad_wrt_tokens(w, x, I, o).values.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Grad, AttentionGradientMatchesPatchIntervention) {
  const auto w = init_random(tiny_config(6));
  std::mt19937_64 rng(6);
  const auto x = random_tokens(9, 32, rng);
  const TokenId next = 11;
  const auto g = grad_logprob_wrt_attention(w, x, next);
  const auto E = detail::embed(w, x);
  const auto last = static_cast<std::size_t>(x.size() - 1);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t k = 0; k <= last; ++k) {
        const double eps = 1e-5;
        auto lp = [&](double delta) {
          const auto cache = detail::run_forward(w, E, detail::AttentionPatch{l, h, last, k, delta});
          return log_softmax(cache.logits.row(static_cast<Eigen::Index>(last)))(next);
        };
        const double fd = (lp(eps) - lp(-eps)) / (2 * eps);
        EXPECT_LE(relative_error(g.row(l, h)(static_cast<Eigen::Index>(k)), fd, 1e-8), 1e-5)
            << l << "," << h << "," << k;
      }
}

TEST(Grad, RejectsBadInput) {
  const auto w = init_random(tiny_config(7));
  const TokenSequence x{1, 2, 3};
  const auto o = target_logprobs_objective({{1}});
  EXPECT_THROW(grad_wrt_tokens(w, x, std::vector<std::size_t>{}, o), RangeError);
  EXPECT_THROW(grad_wrt_tokens(w, x, std::vector<std::size_t>{3}, o), RangeError);
  EXPECT_THROW(grad_logprob_wrt_attention(w, x, 32), RangeError);
  FiniteDiffOptions bad;
  bad.step = 0.0;
  EXPECT_THROW(finite_diff_check(w, x, std::vector<std::size_t>{0}, o, bad), RangeError);
}
