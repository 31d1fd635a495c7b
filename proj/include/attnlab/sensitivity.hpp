#pragma once

// Head sensitivity profiling: how strongly the target log-probability reacts
// to the last attention row of each head, averaged over a profiling corpus
// and optionally clipped to the most sensitive heads.

#include "attnlab/grad.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

namespace attnlab {

// Per head: sum over target steps j of sum_k |dlog P(y_j | z || y_{1:j-1}) / dA[last][k]|.
inline Matrix sensitivity_head(const ModelWeights& weights, std::span<const TokenId> context,
                               const TargetSequence& target) {
  target.validate(weights.config.vocab_size);
  if (context.empty()) throw RangeError("sensitivity_head: empty context");
  if (context.size() + target.size() > weights.config.max_context)
    throw ContextOverflow("sensitivity_head: context of " + std::to_string(context.size()) + " plus target of " +
                          std::to_string(target.size()) + " exceeds max_context " +
                          std::to_string(weights.config.max_context));
  const auto& cfg = weights.config;
  Matrix sens = Matrix::Zero(static_cast<Eigen::Index>(cfg.num_layers), static_cast<Eigen::Index>(cfg.num_heads));
  TokenSequence prefix(context.begin(), context.end());
  for (std::size_t j = 0; j < target.size(); ++j) {
    const auto grads = grad_logprob_wrt_attention(weights, prefix, target.tokens[j]);
    for (std::size_t l = 0; l < cfg.num_layers; ++l)
      for (std::size_t h = 0; h < cfg.num_heads; ++h)
        sens(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(h)) += grads.row(l, h).cwiseAbs().sum();
    prefix.push_back(target.tokens[j]);
  }
  return sens;
}

// Mean over the dataset of sensitivity_head(z) / (|z| + |y|).
//
// Identical sequences are merged and the distinct ones are summed in
// lexicographic order with weight count / |D|, so the result is bit-identical
// under any permutation or uniform duplication of the dataset.
inline SensitivityMap avg_sensitivity(const ModelWeights& weights, std::span<const TokenSequence> dataset,
                                      const TargetSequence& target) {
  if (dataset.empty()) throw RangeError("avg_sensitivity: dataset is empty");
  std::map<TokenSequence, std::size_t> counts;
  for (const auto& z : dataset) ++counts[z];
  const auto& cfg = weights.config;
  SensitivityMap out;
  out.values = Matrix::Zero(static_cast<Eigen::Index>(cfg.num_layers), static_cast<Eigen::Index>(cfg.num_heads));
  out.target = target;
  out.dataset_size = dataset.size();
  const auto total = static_cast<double>(dataset.size());
  for (const auto& [z, count] : counts) {
    const double share = static_cast<double>(count) / total;
    const double norm = 1.0 / static_cast<double>(z.size() + target.size());
    out.values += (share * norm) * sensitivity_head(weights, z, target);
  }
  return out;
}

// Zeroes every entry <= tau, where tau is the k-th smallest value with
// k = clamp(floor(drop_fraction * L * H), 1, L * H - 1). With distinct values
// this keeps ceil((1 - drop_fraction) * L * H) heads, and never fewer than one.
inline HeadWeighting clip_sensitivity(const SensitivityMap& map, double drop_fraction) {
  if (!(drop_fraction >= 0.0 && drop_fraction < 1.0))
    throw RangeError("clip_sensitivity: drop_fraction must lie in [0, 1)");
  if (map.values.size() == 0) throw RangeError("clip_sensitivity: empty sensitivity map");
  std::vector<double> sorted(map.values.data(), map.values.data() + map.values.size());
  std::sort(sorted.begin(), sorted.end());
  const auto count = sorted.size();
  auto drop = static_cast<std::size_t>(std::floor(drop_fraction * static_cast<double>(count) + 1e-9));
  drop = std::min(std::max<std::size_t>(drop, 1), count - 1);
  HeadWeighting out{map.values, WeightingScheme::clipped_sensitivity};
  if (drop == 0) return out;
  const double tau = sorted[drop - 1];
  for (Eigen::Index i = 0; i < out.values.size(); ++i)
    if (out.values.data()[i] <= tau) out.values.data()[i] = 0.0;
  return out;
}

inline HeadWeighting sensitivity_weighting(const SensitivityMap& map) {
  return {map.values, WeightingScheme::avg_sensitivity};
}

}  // namespace attnlab
