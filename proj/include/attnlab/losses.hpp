#pragma once

// Scalar attack objectives evaluated on a forward pass of x || y_{1:m-1}.
//
// Positions are 0-based throughout: the payload set J and the modifiable set I
// index into the prompt tokens x, and "row n" of an attention matrix is the
// row of the last prompt token.

#include "attnlab/tinyformer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace attnlab {

struct TargetSequence {
  TokenSequence tokens;

  std::size_t size() const { return tokens.size(); }

  void validate(std::size_t vocab_size) const {
    if (tokens.empty()) throw RangeError("target sequence must contain at least one token");
    for (auto t : tokens)
      if (t >= vocab_size) throw RangeError("target token " + std::to_string(t) + " outside vocabulary");
  }

  bool operator==(const TargetSequence&) const = default;
};

struct PromptLayout {
  TokenSequence tokens;
  std::vector<std::size_t> payload;     // J
  std::vector<std::size_t> modifiable;  // I

  // Checks ranges, uniqueness and that I and J are disjoint.
  void validate(std::size_t vocab_size, bool require_payload = true) const {
    const auto n = tokens.size();
    for (auto t : tokens)
      if (t >= vocab_size) throw RangeError("layout token " + std::to_string(t) + " outside vocabulary");
    if (require_payload && payload.empty()) throw RangeError("layout: payload set J is empty");
    std::set<std::size_t> j_set;
    for (auto p : payload) {
      if (p >= n) throw RangeError("layout: payload index " + std::to_string(p) + " out of range");
      if (!j_set.insert(p).second) throw RangeError("layout: duplicate payload index " + std::to_string(p));
    }
    std::set<std::size_t> i_set;
    for (auto p : modifiable) {
      if (p >= n) throw RangeError("layout: modifiable index " + std::to_string(p) + " out of range");
      if (!i_set.insert(p).second) throw RangeError("layout: duplicate modifiable index " + std::to_string(p));
      if (j_set.contains(p)) throw RangeError("layout: index " + std::to_string(p) + " is both payload and modifiable");
    }
  }

  bool operator==(const PromptLayout&) const = default;
};

enum class WeightingScheme { uniform, only_first, only_last, avg_sensitivity, clipped_sensitivity, custom };

inline std::string_view to_string(WeightingScheme s) {
  switch (s) {
    case WeightingScheme::uniform: return "uniform";
    case WeightingScheme::only_first: return "only_first";
    case WeightingScheme::only_last: return "only_last";
    case WeightingScheme::avg_sensitivity: return "avg_sensitivity";
    case WeightingScheme::clipped_sensitivity: return "clipped_sensitivity";
    case WeightingScheme::custom: return "custom";
  }
  return "custom";
}

inline WeightingScheme parse_weighting_scheme(std::string_view name) {
  for (auto s : {WeightingScheme::uniform, WeightingScheme::only_first, WeightingScheme::only_last,
                 WeightingScheme::avg_sensitivity, WeightingScheme::clipped_sensitivity, WeightingScheme::custom})
    if (to_string(s) == name) return s;
  throw ConfigError("unknown weighting scheme '" + std::string(name) + "'");
}

// Non-negative L x H weights over attention heads.
struct HeadWeighting {
  Matrix values;
  WeightingScheme scheme = WeightingScheme::custom;

  std::size_t layers() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t heads() const { return static_cast<std::size_t>(values.cols()); }
  double at(std::size_t l, std::size_t h) const {
    return values(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(h));
  }

  void validate() const {
    if (!values.allFinite() || (values.array() < 0.0).any())
      throw RangeError("head weighting entries must be finite and non-negative");
  }

  void validate_for(const ModelConfig& c) const {
    validate();
    if (layers() != c.num_layers || heads() != c.num_heads)
      throw ShapeError("head weighting is " + std::to_string(layers()) + "x" + std::to_string(heads()) +
                       " but the model has " + std::to_string(c.num_layers) + " layers x " +
                       std::to_string(c.num_heads) + " heads");
  }

  static HeadWeighting uniform(std::size_t layers, std::size_t heads) {
    return {Matrix::Ones(static_cast<Eigen::Index>(layers), static_cast<Eigen::Index>(heads)),
            WeightingScheme::uniform};
  }
  static HeadWeighting only_first(std::size_t layers, std::size_t heads) {
    HeadWeighting w{Matrix::Zero(static_cast<Eigen::Index>(layers), static_cast<Eigen::Index>(heads)),
                    WeightingScheme::only_first};
    w.values.row(0).setOnes();
    return w;
  }
  // Weights the final decoder layer.
  static HeadWeighting only_last(std::size_t layers, std::size_t heads) {
    HeadWeighting w{Matrix::Zero(static_cast<Eigen::Index>(layers), static_cast<Eigen::Index>(heads)),
                    WeightingScheme::only_last};
    w.values.row(w.values.rows() - 1).setOnes();
    return w;
  }
};

struct SensitivityMap {
  Matrix values;  // L x H
  TargetSequence target;
  std::size_t dataset_size = 0;
};

enum class Distance { l1_to_ideal, kl_to_ideal };

inline std::string_view to_string(Distance d) { return d == Distance::l1_to_ideal ? "l1" : "kl"; }

inline Distance parse_distance(std::string_view name) {
  if (name == "l1") return Distance::l1_to_ideal;
  if (name == "kl") return Distance::kl_to_ideal;
  throw ConfigError("unknown attention distance '" + std::string(name) + "' (expected l1 or kl)");
}

struct TargetLogprobsLoss {};
struct AttentionLoss {
  HeadWeighting weights;
};
struct GenAttentionLoss {
  Distance distance = Distance::l1_to_ideal;
  HeadWeighting weights;
};

using LossKind = std::variant<TargetLogprobsLoss, AttentionLoss, GenAttentionLoss>;

// A registered loss bound to its target and payload; the searched tokens vary.
struct Objective {
  LossKind kind;
  TargetSequence target;
  std::vector<std::size_t> payload;

  bool is_target_logprobs() const { return std::holds_alternative<TargetLogprobsLoss>(kind); }

  std::string name() const {
    return std::visit(
        [](const auto& k) -> std::string {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, TargetLogprobsLoss>) return "target_logprobs";
          else if constexpr (std::is_same_v<K, AttentionLoss>) return "att_loss";
          else return std::string("gen_att_loss_") + std::string(to_string(k.distance));
        },
        kind);
  }
};

inline Objective target_logprobs_objective(TargetSequence target) {
  return {TargetLogprobsLoss{}, std::move(target), {}};
}

inline Objective att_loss_objective(TargetSequence target, std::vector<std::size_t> payload,
                                    HeadWeighting weights) {
  return {AttentionLoss{std::move(weights)}, std::move(target), std::move(payload)};
}

inline Objective gen_att_loss_objective(TargetSequence target, std::vector<std::size_t> payload,
                                        Distance distance, HeadWeighting weights) {
  return {GenAttentionLoss{distance, std::move(weights)}, std::move(target), std::move(payload)};
}

// ---------------------------------------------------------------------------
// Single-row attention losses.

namespace detail {

inline double payload_mass(const Matrix& attention, Eigen::Index row, std::span<const std::size_t> payload) {
  double mass = 0.0;
  for (auto j : payload) mass += attention(row, static_cast<Eigen::Index>(j));
  return mass;
}

inline double row_distance(const Matrix& attention, Eigen::Index row, std::span<const std::size_t> payload,
                           Distance distance) {
  const double ideal = 1.0 / static_cast<double>(payload.size());
  double total = 0.0;
  for (auto j : payload) {
    const double actual = attention(row, static_cast<Eigen::Index>(j));
    if (distance == Distance::l1_to_ideal) {
      total += ideal - actual;
    } else {
      if (actual <= 0.0) return std::numeric_limits<double>::infinity();
      total += ideal * std::log(ideal / actual);
    }
  }
  return total;
}

inline void check_payload(std::span<const std::size_t> payload, std::size_t length) {
  for (auto j : payload)
    if (j >= length)
      throw RangeError("payload index " + std::to_string(j) + " out of range for sequence of length " +
                       std::to_string(length));
}

}  // namespace detail

// 1 minus the last-row attention mass on the payload positions.
inline double att_loss_head(const ForwardTrace& trace, std::span<const std::size_t> payload, std::size_t layer,
                            std::size_t head) {
  detail::check_payload(payload, trace.length());
  const auto& a = trace.attention(layer, head);
  return 1.0 - detail::payload_mass(a, a.rows() - 1, payload);
}

// Distance from the ideal row (1/|J| on J, 0 elsewhere) to the actual last row.
// l1_to_ideal is the signed form sum_{j in J} (1/|J| - A[n][j]), which equals
// att_loss_head. kl_to_ideal is KL(ideal || actual) and returns +infinity when
// the actual row has zero mass on some payload position.
inline double gen_att_loss(const ForwardTrace& trace, std::span<const std::size_t> payload, Distance distance,
                           std::size_t layer, std::size_t head) {
  if (payload.empty()) throw RangeError("gen_att_loss: payload set J must be non-empty");
  detail::check_payload(payload, trace.length());
  const auto& a = trace.attention(layer, head);
  return detail::row_distance(a, a.rows() - 1, payload, distance);
}

// ---------------------------------------------------------------------------
// Full objectives.

namespace detail {

// Upstream derivatives handed to the backward pass; empty matrices mean zero.
struct BackwardSeeds {
  Matrix logits;                   // n x |V|
  std::vector<Matrix> attentions;  // layer * H + head, each n x n
};

inline TokenSequence extend_with_target(std::span<const TokenId> prompt, const TargetSequence& target) {
  TokenSequence seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), target.tokens.begin(), target.tokens.end() - 1);
  return seq;
}

inline void check_objective(const ModelWeights& w, std::size_t prompt_length, const Objective& objective) {
  objective.target.validate(w.config.vocab_size);
  if (prompt_length == 0) throw RangeError("objective: empty prompt");
  if (prompt_length + objective.target.size() > w.config.max_context)
    throw ContextOverflow("objective: prompt of " + std::to_string(prompt_length) + " tokens plus target of " +
                          std::to_string(objective.target.size()) + " exceeds max_context " +
                          std::to_string(w.config.max_context));
  std::visit(
      [&](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (!std::is_same_v<K, TargetLogprobsLoss>) {
          k.weights.validate_for(w.config);
          if (objective.payload.empty()) throw RangeError("attention loss needs a non-empty payload set J");
          check_payload(objective.payload, prompt_length);
        }
      },
      objective.kind);
}

// Evaluates the objective on a cached forward pass over x || y_{1:m-1}.
// Step j (0-based) reads row prompt_length - 1 + j. Heads with zero weight
// are skipped. When `seeds` is non-null it receives dLoss/dlogits and
// dLoss/dattention.
inline double objective_from_cache(const ModelWeights& w, const ForwardCache& cache, std::size_t prompt_length,
                                   const Objective& objective, BackwardSeeds* seeds) {
  const auto& cfg = w.config;
  const auto& target = objective.target.tokens;
  const auto rows = cache.logits.rows();
  const auto first_row = static_cast<Eigen::Index>(prompt_length) - 1;
  double total = 0.0;

  if (objective.is_target_logprobs()) {
    if (seeds) seeds->logits = Matrix::Zero(rows, cache.logits.cols());
    for (std::size_t j = 0; j < target.size(); ++j) {
      const auto r = first_row + static_cast<Eigen::Index>(j);
      const Vector lp = log_softmax(cache.logits.row(r));
      total -= lp(static_cast<Eigen::Index>(target[j]));
      if (seeds) {
        seeds->logits.row(r) = lp.array().exp().matrix().transpose();
        seeds->logits(r, static_cast<Eigen::Index>(target[j])) -= 1.0;
      }
    }
    return total;
  }

  const HeadWeighting& weights = std::visit(
      [](const auto& k) -> const HeadWeighting& {
        if constexpr (std::is_same_v<std::decay_t<decltype(k)>, TargetLogprobsLoss>)
          throw Error("unreachable");
        else
          return k.weights;
      },
      objective.kind);
  const auto* gen = std::get_if<GenAttentionLoss>(&objective.kind);
  const auto& payload = objective.payload;
  const double ideal = 1.0 / static_cast<double>(payload.size());
  if (seeds) seeds->attentions.assign(cfg.num_layers * cfg.num_heads, Matrix{});

  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      const double weight = weights.at(l, h);
      if (weight == 0.0) continue;
      const Matrix& a = cache.layers[l].attention[h];
      Matrix* seed = nullptr;
      if (seeds) {
        seed = &seeds->attentions[l * cfg.num_heads + h];
        *seed = Matrix::Zero(rows, rows);
      }
      for (std::size_t j = 0; j < target.size(); ++j) {
        const auto r = first_row + static_cast<Eigen::Index>(j);
        if (gen) {
          total += weight * row_distance(a, r, payload, gen->distance);
        } else {
          total += weight * (1.0 - payload_mass(a, r, payload));
        }
        if (seed) {
          for (auto p : payload) {
            const auto c = static_cast<Eigen::Index>(p);
            if (gen && gen->distance == Distance::kl_to_ideal)
              (*seed)(r, c) -= weight * ideal / a(r, c);
            else
              (*seed)(r, c) -= weight;
          }
        }
      }
    }
  }
  return total;
}

}  // namespace detail

// Value of any registered objective at prompt tokens x.
inline double evaluate(const ModelWeights& weights, std::span<const TokenId> prompt, const Objective& objective) {
  detail::check_objective(weights, prompt.size(), objective);
  const auto seq = detail::extend_with_target(prompt, objective.target);
  detail::check_sequence(weights, seq);
  const auto cache = detail::run_forward(weights, detail::embed(weights, seq));
  return detail::objective_from_cache(weights, cache, prompt.size(), objective, nullptr);
}

// -sum_j log P(y_j | x || y_{1:j-1}) from one teacher-forced pass.
inline double target_logprobs(const ModelWeights& weights, std::span<const TokenId> prompt,
                              const TargetSequence& target) {
  return evaluate(weights, prompt, target_logprobs_objective(target));
}

// sum_j sum_{l,h} w[l][h] * (1 - attention mass of the step-j last row on J).
inline double att_loss(const ModelWeights& weights, const PromptLayout& layout, const TargetSequence& target,
                       const HeadWeighting& head_weights) {
  return evaluate(weights, layout.tokens, att_loss_objective(target, layout.payload, head_weights));
}

// ---------------------------------------------------------------------------
// Plain-text matrix files (row = layer, column = head).

inline std::string format_matrix_csv(const Matrix& m) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) out << ',';
      out << m(r, c);
    }
    out << '\n';
  }
  return out.str();
}

inline Matrix parse_matrix_csv(std::string_view text) {
  std::vector<std::vector<double>> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw FormatError("matrix csv: bad number '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) throw FormatError("matrix csv: ragged rows");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError("matrix csv: no rows");
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return m;
}

}  // namespace attnlab
