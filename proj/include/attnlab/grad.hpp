#pragma once

// Hand-derived reverse pass through the decoder stack.
//
// The adjoint of an attention matrix is taken at the softmax output: it is the
// derivative of the loss with respect to A treated as an independent variable,
// with everything downstream (including later layers' attention) allowed to
// respond. Token gradients are taken with respect to the one-hot relaxation of
// the input, i.e. dLoss/de_i multiplied by the token embedding table.

#include "attnlab/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <vector>

namespace attnlab {

struct TokenGradients {
  std::vector<std::size_t> positions;  // I, in caller order
  Matrix values;                       // |I| x |V|
};

struct AttentionRowGradients {
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  std::vector<Vector> rows;  // layer * H + head, each of length n

  const Vector& row(std::size_t layer, std::size_t head) const { return rows.at(layer * num_heads + head); }
};

namespace detail {

struct Adjoints {
  Matrix embeddings;               // n x d
  std::vector<Matrix> attentions;  // filled only when requested
};

inline Matrix layer_norm_backward(const Matrix& upstream, const NormCache& cache, const Vector& gain) {
  const auto d = static_cast<double>(upstream.cols());
  Matrix out(upstream.rows(), upstream.cols());
  for (Eigen::Index r = 0; r < upstream.rows(); ++r) {
    const auto scaled = (upstream.row(r).array() * gain.transpose().array()).eval();
    const auto xhat = cache.normalized.row(r).array();
    const double mean_scaled = scaled.sum() / d;
    const double mean_proj = (scaled * xhat).sum() / d;
    out.row(r) = cache.inv_std(r) * (scaled - mean_scaled - xhat * mean_proj);
  }
  return out;
}

inline Adjoints backward(const ModelWeights& w, const ForwardCache& cache, const BackwardSeeds& seeds,
                         bool keep_attention) {
  const auto& cfg = w.config;
  const auto n = cache.logits.rows();
  const auto d = static_cast<Eigen::Index>(cfg.embed_dim);
  const auto hd = static_cast<Eigen::Index>(cfg.head_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));

  Adjoints adj;
  if (keep_attention) adj.attentions.assign(cfg.num_layers * cfg.num_heads, Matrix{});

  Matrix d_x;
  if (seeds.logits.size() != 0) {
    const Matrix d_hidden = seeds.logits * w.lm_head.transpose();
    d_x = layer_norm_backward(d_hidden, cache.final_norm, w.final_norm_gain);
  } else {
    d_x = Matrix::Zero(n, d);
  }

  for (std::size_t li = cfg.num_layers; li-- > 0;) {
    const auto& lw = w.layers[li];
    const auto& lc = cache.layers[li];

    // feed-forward block
    Matrix d_pre = d_x * lw.ff_out.transpose();
    for (Eigen::Index r = 0; r < d_pre.rows(); ++r)
      for (Eigen::Index c = 0; c < d_pre.cols(); ++c) d_pre(r, c) *= gelu_grad(lc.ff_pre(r, c));
    const Matrix d_ff_in = d_pre * lw.ff_in.transpose();
    Matrix d_after = d_x + layer_norm_backward(d_ff_in, lc.ff_norm, lw.ff_norm_gain);

    // attention block
    const Matrix d_mixed = d_after * lw.attn_out.transpose();
    Matrix d_q = Matrix::Zero(n, d), d_k = Matrix::Zero(n, d), d_v = Matrix::Zero(n, d);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * hd;
      const Matrix& a = lc.attention[h];
      const auto d_out = d_mixed.middleCols(col, hd);
      Matrix d_a = d_out * lc.values.middleCols(col, hd).transpose();
      const auto flat = li * cfg.num_heads + h;
      if (!seeds.attentions.empty() && seeds.attentions[flat].size() != 0) d_a += seeds.attentions[flat];
      d_v.middleCols(col, hd).noalias() = a.transpose() * d_out;
      // softmax backward, restricted to the unmasked lower triangle
      Matrix d_s = Matrix::Zero(n, n);
      for (Eigen::Index r = 0; r < n; ++r) {
        const auto live_a = a.row(r).head(r + 1).array();
        const auto live_g = d_a.row(r).head(r + 1).array();
        const double dot = (live_a * live_g).sum();
        d_s.row(r).head(r + 1) = live_a * (live_g - dot);
      }
      d_q.middleCols(col, hd).noalias() = (d_s * lc.keys.middleCols(col, hd)) * scale;
      d_k.middleCols(col, hd).noalias() = (d_s.transpose() * lc.queries.middleCols(col, hd)) * scale;
      if (keep_attention) adj.attentions[flat] = std::move(d_a);
    }
    Matrix d_attn_in = d_q * lw.query.transpose();
    d_attn_in.noalias() += d_k * lw.key.transpose();
    d_attn_in.noalias() += d_v * lw.value.transpose();
    d_x = d_after + layer_norm_backward(d_attn_in, lc.attn_norm, lw.attn_norm_gain);
  }
  adj.embeddings = std::move(d_x);
  return adj;
}

// dLoss/d(input embedding rows) for the extended sequence x || y_{1:m-1}.
inline Matrix objective_embedding_gradient(const ModelWeights& w, std::span<const TokenId> prompt,
                                           const Objective& objective, double* value = nullptr) {
  check_objective(w, prompt.size(), objective);
  const auto seq = extend_with_target(prompt, objective.target);
  check_sequence(w, seq);
  const auto cache = run_forward(w, embed(w, seq));
  BackwardSeeds seeds;
  const double v = objective_from_cache(w, cache, prompt.size(), objective, &seeds);
  if (value) *value = v;
  return backward(w, cache, seeds, false).embeddings;
}

// Objective value with the input embedding matrix of x || y_{1:m-1} given directly.
inline double objective_at_embeddings(const ModelWeights& w, const Matrix& embeddings, std::size_t prompt_length,
                                      const Objective& objective) {
  const auto cache = run_forward(w, embeddings);
  return objective_from_cache(w, cache, prompt_length, objective, nullptr);
}

}  // namespace detail

// Gradient of the objective with respect to the one-hot token coordinates at
// each position in `positions`. Duplicated positions yield identical rows.
inline TokenGradients grad_wrt_tokens(const ModelWeights& weights, std::span<const TokenId> prompt,
                                      std::span<const std::size_t> positions, const Objective& objective) {
  if (positions.empty()) throw RangeError("grad_wrt_tokens: modifiable set I is empty");
  for (auto p : positions)
    if (p >= prompt.size())
      throw RangeError("grad_wrt_tokens: position " + std::to_string(p) + " outside prompt of length " +
                       std::to_string(prompt.size()));
  const Matrix d_embed = detail::objective_embedding_gradient(weights, prompt, objective);
  TokenGradients out;
  out.positions.assign(positions.begin(), positions.end());
  out.values.resize(static_cast<Eigen::Index>(positions.size()), weights.token_embeddings.rows());
  for (std::size_t i = 0; i < positions.size(); ++i)
    out.values.row(static_cast<Eigen::Index>(i)).noalias() =
        d_embed.row(static_cast<Eigen::Index>(positions[i])) * weights.token_embeddings.transpose();
  return out;
}

// dlog P(y | z) / dA[l][h][n-1][k] for every head, attention entries treated
// as cut points at the softmax output.
inline AttentionRowGradients grad_logprob_wrt_attention(const ModelWeights& weights, std::span<const TokenId> context,
                                                        TokenId next) {
  detail::check_sequence(weights, context);
  if (next >= weights.config.vocab_size)
    throw RangeError("grad_logprob_wrt_attention: token " + std::to_string(next) + " outside vocabulary");
  const auto cache = detail::run_forward(weights, detail::embed(weights, context));
  const auto last = cache.logits.rows() - 1;
  detail::BackwardSeeds seeds;
  seeds.logits = Matrix::Zero(cache.logits.rows(), cache.logits.cols());
  const Vector lp = log_softmax(cache.logits.row(last));
  seeds.logits.row(last) = -lp.array().exp().matrix().transpose();
  seeds.logits(last, static_cast<Eigen::Index>(next)) += 1.0;
  const auto adj = detail::backward(weights, cache, seeds, true);

  AttentionRowGradients out;
  out.num_layers = weights.config.num_layers;
  out.num_heads = weights.config.num_heads;
  out.rows.reserve(adj.attentions.size());
  for (const auto& g : adj.attentions) out.rows.emplace_back(g.row(last).transpose());
  return out;
}

// ---------------------------------------------------------------------------
// Central-difference check of token gradients.
//
// Directions: for each position i in I, `directions_per_position` replacement
// tokens v != x_i drawn uniformly with an mt19937_64 seeded by `seed`. The
// analytic directional derivative along e_v - e_{x_i} is g[i][v] - g[i][x_i];
// the numeric one moves embedding row i along (E[v] - E[x_i]) by +-step.
// Relative error is |a - f| / max(|a|, |f|, denominator_floor); derivatives
// smaller than the floor are effectively compared in absolute terms, since the
// O(step^2) truncation error of the central difference dominates there.

struct FiniteDiffOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  std::size_t directions_per_position = 8;
  std::uint64_t seed = 0;
  double denominator_floor = 1e-4;
};

struct FiniteDiffReport {
  std::size_t directions = 0;
  double max_relative_error = 0.0;
  std::size_t worst_position = 0;
  TokenId worst_token = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// Checks caller-supplied gradients, so a corrupted gradient can be verified to fail.
inline FiniteDiffReport check_token_gradients(const ModelWeights& weights, std::span<const TokenId> prompt,
                                              const TokenGradients& gradients, const Objective& objective,
                                              const FiniteDiffOptions& options = {}) {
  if (!(options.step > 0.0)) throw RangeError("finite_diff_check: step must be positive");
  if (weights.config.vocab_size < 2) throw RangeError("finite_diff_check: vocabulary too small");
  detail::check_objective(weights, prompt.size(), objective);
  const auto seq = detail::extend_with_target(prompt, objective.target);
  detail::check_sequence(weights, seq);
  const Matrix base = detail::embed(weights, seq);

  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(weights.config.vocab_size - 2));
  FiniteDiffReport report;
  for (std::size_t row = 0; row < gradients.positions.size(); ++row) {
    const auto pos = gradients.positions[row];
    const TokenId current = prompt[pos];
    for (std::size_t s = 0; s < options.directions_per_position; ++s) {
      TokenId v = pick(rng);
      if (v >= current) ++v;
      const auto r = static_cast<Eigen::Index>(row);
      const double analytic = gradients.values(r, v) - gradients.values(r, current);
      const Eigen::RowVectorXd dir = weights.token_embeddings.row(v) - weights.token_embeddings.row(current);
      Matrix plus = base, minus = base;
      plus.row(static_cast<Eigen::Index>(pos)) += options.step * dir;
      minus.row(static_cast<Eigen::Index>(pos)) -= options.step * dir;
      const double numeric = (detail::objective_at_embeddings(weights, plus, prompt.size(), objective) -
                              detail::objective_at_embeddings(weights, minus, prompt.size(), objective)) /
                             (2.0 * options.step);
      const double err = relative_error(analytic, numeric, options.denominator_floor);
      ++report.directions;
      if (report.directions == 1 || !(err <= report.max_relative_error)) {
        report.max_relative_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
        report.worst_position = pos;
        report.worst_token = v;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_relative_error <= options.tolerance;
  return report;
}

inline FiniteDiffReport finite_diff_check(const ModelWeights& weights, std::span<const TokenId> prompt,
                                          std::span<const std::size_t> positions, const Objective& objective,
                                          const FiniteDiffOptions& options = {}) {
  if (!(options.step > 0.0)) throw RangeError("finite_diff_check: step must be positive");
  const auto grads = grad_wrt_tokens(weights, prompt, positions, objective);
  return check_token_gradients(weights, prompt, grads, objective, options);
}

}  // namespace attnlab
