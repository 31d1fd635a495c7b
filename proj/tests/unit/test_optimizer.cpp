#include "fixtures.hpp"

#include <gtest/gtest.h>

#include <map>

using namespace attnlab;
using namespace attnlab::testing;

namespace {

struct Case {
  ModelWeights weights;
  PromptLayout layout;
  TargetSequence target;
};

Case make_case(std::uint64_t seed, std::size_t vocab = 32, std::size_t n = 10, std::size_t slots = 3) {
  std::mt19937_64 rng(seed);
  Case c{init_random(tiny_config(seed, vocab)), simple_layout(n, slots, vocab, rng), {}};
  c.target = random_target(2, vocab, rng);
  return c;
}

// Independent recomputation of one exhaustive step: pool = p lowest gradient
// entries per slot, every (slot, token) pair evaluated, first minimum wins.
TokenSequence brute_force_step(const ModelWeights& w, const TokenSequence& x, const std::vector<std::size_t>& I,
                               const Objective& o, std::size_t p) {
  const auto g = grad_wrt_tokens(w, x, I, o);
  TokenSequence best;
  double best_loss = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < I.size(); ++a) {
    std::vector<std::pair<double, TokenId>> ranked;
    for (TokenId t = 0; t < w.config.vocab_size; ++t) ranked.emplace_back(g.values(a, t), t);
    std::sort(ranked.begin(), ranked.end());
    std::vector<TokenId> pool;
    for (std::size_t i = 0; i < p; ++i) pool.push_back(ranked[i].second);
    std::sort(pool.begin(), pool.end());
    for (auto t : pool) {
      TokenSequence trial = x;
      trial[I[a]] = t;
      const double loss = evaluate(w, trial, o);
      if (loss < best_loss) {
        best_loss = loss;
        best = trial;
      }
    }
  }
  return best;
}

}  // namespace

TEST(Optimizer, ExhaustiveModeMatchesBruteForce) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = make_case(seed, 8, 7, 2);
    SearchParams p;
    p.top_p = 3;
    p.batch = 6;
    p.iterations = 3;
    p.exhaustive = true;
    const auto o = target_logprobs_objective(c.target);
    const auto res = gen_gcg(c.weights, c.layout, o, p);
    for (std::size_t k = 1; k < res.trace.records.size(); ++k)
      EXPECT_EQ(res.trace.records[k].tokens,
                brute_force_step(c.weights, res.trace.records[k - 1].tokens, c.layout.modifiable, o, 3));
  }
}

TEST(Optimizer, ExhaustiveModeRequiresMatchingBatch) {
  auto c = make_case(1, 8, 7, 2);
  SearchParams p;
  p.top_p = 3;
  p.batch = 5;
  p.iterations = 1;
  p.exhaustive = true;
  EXPECT_THROW(gen_gcg(c.weights, c.layout, target_logprobs_objective(c.target), p), ConfigError);
}

TEST(Optimizer, TraceInvariants) {
  auto c = make_case(2);
  SearchParams p;
  p.top_p = 8;
  p.batch = 16;
  p.iterations = 10;
  p.rng_seed = 3;
  for (bool guided : {true, false}) {
    const auto o = target_logprobs_objective(c.target);
    const auto res = guided ? gen_gcg(c.weights, c.layout, o, p) : unguided_search(c.weights, c.layout, o, p);
    const auto& recs = res.trace.records;
    ASSERT_EQ(recs.size(), 11u);
    EXPECT_EQ(recs[0].tokens, c.layout.tokens);
    EXPECT_FALSE(recs[0].changed_position.has_value());
    for (std::size_t k = 1; k < recs.size(); ++k) {
      std::size_t diffs = 0;
      for (std::size_t i = 0; i < recs[k].tokens.size(); ++i) {
        if (recs[k].tokens[i] != recs[k - 1].tokens[i]) {
          ++diffs;
          EXPECT_NE(std::find(c.layout.modifiable.begin(), c.layout.modifiable.end(), i), c.layout.modifiable.end());
        }
      }
      EXPECT_LE(diffs, 1u);
      EXPECT_EQ(res.trace.candidate_evaluations[k - 1], 16u);
      EXPECT_LE(res.trace.unique_evaluations[k - 1], 16u);
      for (auto j : c.layout.payload) EXPECT_EQ(recs[k].tokens[j], c.layout.tokens[j]);
    }
    EXPECT_LE(res.trace.best_target_logprobs(), res.trace.initial_target_logprobs());
    EXPECT_EQ(res.tokens, res.trace.best().tokens);
    EXPECT_EQ(res.trace.guided, guided);
  }
}

TEST(Optimizer, WorkerCountDoesNotChangeTheTrace) {
  auto c = make_case(3);
  SearchParams p;
  p.top_p = 8;
  p.batch = 32;
  p.iterations = 4;
  p.rng_seed = 9;
  const auto o = att_loss_objective(c.target, c.layout.payload, HeadWeighting::uniform(2, 2));
  const auto one = gen_gcg(c.weights, c.layout, o, p);
  p.workers = 8;
  const auto eight = gen_gcg(c.weights, c.layout, o, p);
  ASSERT_EQ(one.trace.records.size(), eight.trace.records.size());
  for (std::size_t k = 0; k < one.trace.records.size(); ++k) {
    EXPECT_EQ(one.trace.records[k].tokens, eight.trace.records[k].tokens);
    EXPECT_EQ(std::bit_cast<std::uint64_t>(one.trace.records[k].loss),
              std::bit_cast<std::uint64_t>(eight.trace.records[k].loss));
  }
}

TEST(Optimizer, SameSeedSameTrace) {
  auto c = make_case(4);
  SearchParams p;
  p.top_p = 4;
  p.batch = 8;
  p.iterations = 5;
  p.rng_seed = 1;
  const auto o = target_logprobs_objective(c.target);
  EXPECT_EQ(format_trace_csv(unguided_search(c.weights, c.layout, o, p).trace),
            format_trace_csv(unguided_search(c.weights, c.layout, o, p).trace));
}

TEST(Optimizer, FullPoolMakesGuidedAndUnguidedIdentical) {
  auto c = make_case(5);
  SearchParams p;
  p.top_p = 32;
  p.batch = 24;
  p.iterations = 5;
  p.rng_seed = 77;
  const auto o = target_logprobs_objective(c.target);
  const auto g = gen_gcg(c.weights, c.layout, o, p);
  const auto u = unguided_search(c.weights, c.layout, o, p);
  EXPECT_EQ(format_trace_csv(g.trace), format_trace_csv(u.trace));
}

TEST(Optimizer, ExcludedTokensAreNeverProposed) {
  auto c = make_case(6);
  SearchParams p;
  p.top_p = 32;
  p.batch = 64;
  p.iterations = 6;
  for (TokenId t = 0; t < 28; ++t) p.excluded_tokens.push_back(t);
  const auto res = gen_gcg(c.weights, c.layout, target_logprobs_objective(c.target), p);
  for (std::size_t k = 1; k < res.trace.records.size(); ++k) {
    const auto pos = *res.trace.records[k].changed_position;
    EXPECT_GE(res.trace.records[k].tokens[pos], 28u);
  }
}

TEST(Optimizer, RandomPoolIsUniform) {
  std::vector<TokenId> allowed(16);
  std::iota(allowed.begin(), allowed.end(), 0);
  std::mt19937_64 rng(123);
  std::vector<double> counts(16, 0.0);
  const int draws = 16000;
  for (int i = 0; i < draws; ++i)
    for (auto t : detail::random_pool(allowed, 3, rng)) counts[t] += 1.0;
  const double expected = draws * 3.0 / 16.0;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 37.7);  // 15 degrees of freedom, p = 0.001
  const auto pool = detail::random_pool(allowed, 16, rng);
  EXPECT_EQ(pool, allowed);
}

TEST(Optimizer, ParallelForRethrowsFirstFailureByIndex) {
  try {
    detail::parallel_for(20, 4, [](std::size_t i) {
      if (i == 7 || i == 13) throw RangeError("item " + std::to_string(i));
    });
    FAIL();
  } catch (const RangeError& e) {
    EXPECT_STREQ(e.what(), "item 7");
  }
}

TEST(Optimizer, InputValidation) {
  auto c = make_case(7);
  SearchParams p;
  p.top_p = 4;
  p.batch = 4;
  p.iterations = 2;
  const auto& w = c.weights;
  EXPECT_THROW(gen_gcg(w, c.layout, target_logprobs_objective(TargetSequence{{99}}), p), RangeError);
  p.top_p = 64;
  EXPECT_THROW(gen_gcg(w, c.layout, target_logprobs_objective(c.target), p), ConfigError);
  PromptLayout no_slots = c.layout;
  no_slots.modifiable.clear();
  p.top_p = 4;
  EXPECT_THROW(gen_gcg(w, no_slots, target_logprobs_objective(c.target), p), RangeError);
}

TEST(Optimizer, AstraWiring) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto c = make_case(10 + seed);
    AstraParams p;
    p.top_p = 8;
    p.batch = 16;
    p.phase1_iters = 4;
    p.phase2_iters = 3;
    p.head_weights = HeadWeighting::uniform(2, 2);
    p.rng_seed = seed;
    const auto r = astra(c.weights, c.layout, c.target, p);
    EXPECT_EQ(r.phase1.records.size(), 5u);
    EXPECT_EQ(r.phase2.records.size(), 4u);
    EXPECT_EQ(r.phase2.records.front().tokens, r.phase1.best().tokens);
    EXPECT_LE(r.phase2.best_target_logprobs(), r.phase1.best_target_logprobs());
    EXPECT_EQ(r.phase1.loss_name, "att_loss");

    p.phase2_iters = 0;
    const auto r0 = astra(c.weights, c.layout, c.target, p);
    EXPECT_EQ(r0.tokens, r0.phase1.best().tokens);
    EXPECT_EQ(r0.phase2.records.size(), 1u);
  }
}

TEST(Optimizer, AstraPhaseOneSelectionByLoss) {
  auto c = make_case(20);
  AstraParams p;
  p.top_p = 8;
  p.batch = 16;
  p.phase1_iters = 5;
  p.phase2_iters = 0;
  p.head_weights = HeadWeighting::uniform(2, 2);
  p.phase1_selection = PhaseOneSelection::by_loss;
  const auto r = astra(c.weights, c.layout, c.target, p);
  double best = std::numeric_limits<double>::infinity();
  TokenSequence best_tokens;
  for (const auto& rec : r.phase1.records)
    if (rec.loss < best) {
      best = rec.loss;
      best_tokens = rec.tokens;
    }
  EXPECT_EQ(r.phase2.records.front().tokens, best_tokens);
}

TEST(Optimizer, TraceCsvNumbersAcrossPhases) {
  auto c = make_case(21);
  AstraParams p;
  p.top_p = 4;
  p.batch = 4;
  p.phase1_iters = 2;
  p.phase2_iters = 1;
  p.head_weights = HeadWeighting::uniform(2, 2);
  const auto r = astra(c.weights, c.layout, c.target, p);
  const OptimizationTrace* phases[] = {&r.phase1, &r.phase2};
  const auto csv = format_trace_csv(phases);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 + 2);
  EXPECT_EQ(csv.rfind("4,2,", csv.size() - 1) != std::string::npos, true);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "iteration,phase,loss,target_logprobs");
}
