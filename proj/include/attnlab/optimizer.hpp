#pragma once

// Greedy single-substitution search over the modifiable positions of a prompt.
//
// gen_gcg builds each position's candidate pool from the top-p entries of the
// negative token gradient; unguided_search draws the pool uniformly at random.
// Everything else (candidate sampling, exact evaluation, adoption, history)
// is the same code path.

#include "attnlab/grad.hpp"

#include <algorithm>
#include <exception>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <thread>
#include <utility>
#include <vector>

namespace attnlab {

class SearchError : public Error {
 public:
  SearchError(std::size_t iteration, const std::string& what)
      : Error("search iteration " + std::to_string(iteration) + ": " + what), iteration_(iteration) {}
  std::size_t iteration() const { return iteration_; }

 private:
  std::size_t iteration_;
};

struct SearchParams {
  std::size_t top_p = 256;
  std::size_t iterations = 500;
  std::size_t batch = 512;
  std::uint64_t rng_seed = 0;
  std::size_t workers = 1;
  // Enumerate every (position, pool token) pair once; batch must equal |I| * p.
  bool exhaustive = false;
  // Never proposed as replacements (delimiters and other reserved ids).
  std::vector<TokenId> excluded_tokens;

  void validate(std::size_t vocab_size) const {
    if (top_p < 1 || iterations < 1 || batch < 1)
      throw ConfigError("search params: top_p, iterations and batch must all be >= 1");
    if (top_p > vocab_size)
      throw ConfigError("search params: top_p " + std::to_string(top_p) + " exceeds vocabulary size " +
                        std::to_string(vocab_size));
  }
};

enum class PhaseOneSelection { by_target_logprobs, by_loss };

struct AstraParams {
  std::size_t top_p = 256;
  std::size_t phase1_iters = 350;
  std::size_t phase2_iters = 150;
  std::size_t batch = 512;
  HeadWeighting head_weights;
  std::uint64_t rng_seed = 0;
  std::size_t workers = 1;
  std::vector<TokenId> excluded_tokens;
  PhaseOneSelection phase1_selection = PhaseOneSelection::by_target_logprobs;
};

struct IterationRecord {
  TokenSequence tokens;
  double loss = 0.0;
  double target_logprobs = 0.0;
  std::optional<std::size_t> changed_position;  // empty for the initial point
};

struct OptimizationTrace {
  std::vector<IterationRecord> records;  // records[0] is the initial point
  std::vector<std::size_t> candidate_evaluations;
  std::vector<std::size_t> unique_evaluations;
  std::size_t best_index = 0;
  bool guided = true;
  std::string loss_name;

  const IterationRecord& best() const { return records.at(best_index); }
  double best_target_logprobs() const { return best().target_logprobs; }
  double initial_target_logprobs() const { return records.front().target_logprobs; }
};

struct SearchResult {
  TokenSequence tokens;
  OptimizationTrace trace;
};

struct AstraResult {
  TokenSequence tokens;
  OptimizationTrace phase1;
  OptimizationTrace phase2;
};

namespace detail {

enum class PoolKind { gradient, random };

// Runs fn(i) for i in [0, count); results must be written by index. The first
// exception by index is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t workers, Fn&& fn) {
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(count, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(count);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < count; i += workers) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::vector<TokenId> allowed_tokens(std::size_t vocab_size, std::span<const TokenId> excluded) {
  std::vector<bool> keep(vocab_size, true);
  for (auto t : excluded)
    if (t < vocab_size) keep[t] = false;
  std::vector<TokenId> out;
  for (std::size_t t = 0; t < vocab_size; ++t)
    if (keep[t]) out.push_back(static_cast<TokenId>(t));
  if (out.empty()) throw ConfigError("search: every vocabulary token is excluded");
  return out;
}

// Top-p tokens by descending negative gradient (ties to the lower id), returned sorted by id.
inline std::vector<TokenId> top_p_pool(const Eigen::Ref<const Eigen::RowVectorXd>& gradient,
                                       std::span<const TokenId> allowed, std::size_t p) {
  std::vector<TokenId> order(allowed.begin(), allowed.end());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(p), order.end(),
                    [&](TokenId a, TokenId b) {
                      const double ga = gradient(static_cast<Eigen::Index>(a));
                      const double gb = gradient(static_cast<Eigen::Index>(b));
                      return ga < gb || (ga == gb && a < b);
                    });
  order.resize(p);
  std::sort(order.begin(), order.end());
  return order;
}

// p distinct tokens drawn uniformly from `allowed`, returned sorted by id.
inline std::vector<TokenId> random_pool(std::span<const TokenId> allowed, std::size_t p, std::mt19937_64& rng) {
  std::vector<TokenId> order(allowed.begin(), allowed.end());
  for (std::size_t i = 0; i < p; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  order.resize(p);
  std::sort(order.begin(), order.end());
  return order;
}

struct Candidate {
  std::size_t slot = 0;  // index into I
  TokenId token = 0;
  auto operator<=>(const Candidate&) const = default;
};

inline std::size_t argmin_lowest_index(std::span<const double> values) {
  std::size_t best = 0;
  auto key = [](double v) { return std::isnan(v) ? std::numeric_limits<double>::infinity() : v; };
  for (std::size_t i = 1; i < values.size(); ++i)
    if (key(values[i]) < key(values[best])) best = i;
  return best;
}

inline SearchResult greedy_search(const ModelWeights& weights, const PromptLayout& layout, const Objective& objective,
                                  const SearchParams& params, std::size_t iterations, PoolKind kind) {
  const auto& cfg = weights.config;
  layout.validate(cfg.vocab_size, false);
  if (layout.modifiable.empty()) throw RangeError("search: modifiable set I is empty");
  check_objective(weights, layout.tokens.size(), objective);
  const auto allowed = allowed_tokens(cfg.vocab_size, params.excluded_tokens);
  const std::size_t p = std::min(params.top_p, allowed.size());
  const auto& slots = layout.modifiable;
  if (params.exhaustive && params.batch != slots.size() * p)
    throw ConfigError("search: exhaustive mode needs batch == |I| * p = " + std::to_string(slots.size() * p));

  const Objective logprobs = target_logprobs_objective(objective.target);
  const bool loss_is_logprobs = objective.is_target_logprobs();

  SearchResult result;
  auto& trace = result.trace;
  trace.guided = kind == PoolKind::gradient;
  trace.loss_name = objective.name();
  TokenSequence x = layout.tokens;
  {
    IterationRecord initial;
    initial.tokens = x;
    initial.loss = evaluate(weights, x, objective);
    initial.target_logprobs = loss_is_logprobs ? initial.loss : evaluate(weights, x, logprobs);
    trace.records.push_back(std::move(initial));
  }

  for (std::size_t k = 0; k < iterations; ++k) {
    try {
      std::vector<std::vector<TokenId>> pools(slots.size());
      if (kind == PoolKind::gradient) {
        const auto grads = grad_wrt_tokens(weights, x, slots, objective);
        for (std::size_t a = 0; a < slots.size(); ++a)
          pools[a] = top_p_pool(grads.values.row(static_cast<Eigen::Index>(a)), allowed, p);
      } else {
        std::mt19937_64 pool_rng(derive_seed(params.rng_seed, 1, k));
        for (std::size_t a = 0; a < slots.size(); ++a) pools[a] = random_pool(allowed, p, pool_rng);
      }

      std::vector<Candidate> candidates;
      candidates.reserve(params.batch);
      if (params.exhaustive) {
        for (std::size_t a = 0; a < slots.size(); ++a)
          for (auto t : pools[a]) candidates.push_back({a, t});
      } else {
        std::mt19937_64 sample_rng(derive_seed(params.rng_seed, 2, k));
        std::uniform_int_distribution<std::size_t> pick_slot(0, slots.size() - 1);
        std::uniform_int_distribution<std::size_t> pick_token(0, p - 1);
        for (std::size_t b = 0; b < params.batch; ++b) {
          const auto a = pick_slot(sample_rng);
          candidates.push_back({a, pools[a][pick_token(sample_rng)]});
        }
      }

      // duplicates are scored once but still count toward the batch
      std::map<Candidate, std::size_t> index_of;
      std::vector<Candidate> unique;
      std::vector<std::size_t> unique_id(candidates.size());
      for (std::size_t b = 0; b < candidates.size(); ++b) {
        auto [it, fresh] = index_of.try_emplace(candidates[b], unique.size());
        if (fresh) unique.push_back(candidates[b]);
        unique_id[b] = it->second;
      }
      std::vector<double> unique_loss(unique.size());
      parallel_for(unique.size(), params.workers, [&](std::size_t u) {
        TokenSequence trial = x;
        trial[slots[unique[u].slot]] = unique[u].token;
        unique_loss[u] = evaluate(weights, trial, objective);
      });
      std::vector<double> losses(candidates.size());
      for (std::size_t b = 0; b < candidates.size(); ++b) losses[b] = unique_loss[unique_id[b]];

      const auto winner = argmin_lowest_index(losses);
      const auto chosen = candidates[winner];
      x[slots[chosen.slot]] = chosen.token;
      IterationRecord rec;
      rec.tokens = x;
      rec.loss = losses[winner];
      rec.target_logprobs = loss_is_logprobs ? rec.loss : evaluate(weights, x, logprobs);
      rec.changed_position = slots[chosen.slot];
      trace.records.push_back(std::move(rec));
      trace.candidate_evaluations.push_back(candidates.size());
      trace.unique_evaluations.push_back(unique.size());
    } catch (const SearchError&) {
      throw;
    } catch (const std::exception& e) {
      throw SearchError(k, e.what());
    }
  }

  std::vector<double> history(trace.records.size());
  for (std::size_t i = 0; i < history.size(); ++i) history[i] = trace.records[i].target_logprobs;
  trace.best_index = argmin_lowest_index(history);
  result.tokens = trace.best().tokens;
  return result;
}

}  // namespace detail

// Generalized GCG: gradient-guided candidate pools, exact greedy selection,
// returns the visited point with the lowest TargetLogprobs (initial point included).
inline SearchResult gen_gcg(const ModelWeights& weights, const PromptLayout& layout, const Objective& objective,
                            const SearchParams& params) {
  params.validate(weights.config.vocab_size);
  return detail::greedy_search(weights, layout, objective, params, params.iterations, detail::PoolKind::gradient);
}

// Same search with per-position pools of p uniformly random tokens, fresh each iteration.
inline SearchResult unguided_search(const ModelWeights& weights, const PromptLayout& layout,
                                    const Objective& objective, const SearchParams& params) {
  params.validate(weights.config.vocab_size);
  return detail::greedy_search(weights, layout, objective, params, params.iterations, detail::PoolKind::random);
}

// Two phases: attention loss for phase1_iters, then TargetLogprobs for
// phase2_iters starting from the phase-1 output. Either phase may be empty.
inline AstraResult astra(const ModelWeights& weights, const PromptLayout& layout, const TargetSequence& target,
                         const AstraParams& params) {
  params.head_weights.validate_for(weights.config);
  SearchParams phase;
  phase.top_p = params.top_p;
  phase.batch = params.batch;
  phase.workers = params.workers;
  phase.excluded_tokens = params.excluded_tokens;
  phase.iterations = 1;
  phase.validate(weights.config.vocab_size);

  AstraResult out;
  phase.rng_seed = derive_seed(params.rng_seed, 11);
  auto first = detail::greedy_search(weights, layout, att_loss_objective(target, layout.payload, params.head_weights),
                                     phase, params.phase1_iters, detail::PoolKind::gradient);
  PromptLayout warm = layout;
  if (params.phase1_selection == PhaseOneSelection::by_loss) {
    std::vector<double> losses;
    for (const auto& r : first.trace.records) losses.push_back(r.loss);
    warm.tokens = first.trace.records[detail::argmin_lowest_index(losses)].tokens;
  } else {
    warm.tokens = first.tokens;
  }
  phase.rng_seed = derive_seed(params.rng_seed, 12);
  auto second = detail::greedy_search(weights, warm, target_logprobs_objective(target), phase, params.phase2_iters,
                                      detail::PoolKind::gradient);
  out.tokens = second.tokens;
  out.phase1 = std::move(first.trace);
  out.phase2 = std::move(second.trace);
  return out;
}

// CSV with columns iteration,phase,loss,target_logprobs. Iterations are
// numbered consecutively across phases; each phase starts with its initial point.
inline std::string format_trace_csv(std::span<const OptimizationTrace* const> phases) {
  std::ostringstream out;
  out << std::setprecision(17) << "iteration,phase,loss,target_logprobs\n";
  std::size_t row = 0;
  for (std::size_t ph = 0; ph < phases.size(); ++ph)
    for (const auto& r : phases[ph]->records)
      out << row++ << ',' << ph + 1 << ',' << r.loss << ',' << r.target_logprobs << '\n';
  return out.str();
}

inline std::string format_trace_csv(const OptimizationTrace& trace) {
  const OptimizationTrace* one[] = {&trace};
  return format_trace_csv(one);
}

}  // namespace attnlab
