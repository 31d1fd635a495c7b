#pragma once

// A small pre-norm decoder-only transformer that exposes every attention
// matrix of every forward pass. All arithmetic is double precision; weights
// are kept exactly representable as float32 so the on-disk format round-trips.

#include "attnlab/common.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <concepts>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace attnlab {

struct ModelConfig {
  std::size_t vocab_size = 32;
  std::size_t embed_dim = 16;
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t head_dim = 8;
  std::size_t max_context = 64;
  std::uint64_t seed = 0;

  std::size_t ff_dim() const { return 4 * embed_dim; }

  // Throws ConfigError on the first violated invariant.
  void validate() const {
    if (vocab_size == 0 || embed_dim == 0 || num_layers == 0 || num_heads == 0 ||
        head_dim == 0)
      throw ConfigError("model config: all dimensions must be positive");
    if (embed_dim % num_heads != 0)
      throw ConfigError("model config: embed_dim " + std::to_string(embed_dim) +
                        " is not divisible by num_heads " + std::to_string(num_heads));
    if (embed_dim != num_heads * head_dim)
      throw ConfigError("model config: embed_dim must equal num_heads * head_dim");
    if (max_context < 2) throw ConfigError("model config: max_context must be >= 2");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Vector attn_norm_gain, attn_norm_bias;
  Matrix query, key, value;  // d x d, head h owns columns [h*head_dim, (h+1)*head_dim)
  Matrix attn_out;           // d x d
  Vector ff_norm_gain, ff_norm_bias;
  Matrix ff_in;  // d x 4d
  Vector ff_in_bias;
  Matrix ff_out;  // 4d x d
  Vector ff_out_bias;
};

struct ModelWeights {
  ModelConfig config;
  Matrix token_embeddings;     // |V| x d
  Matrix position_embeddings;  // max_context x d
  std::vector<LayerWeights> layers;
  Vector final_norm_gain, final_norm_bias;
  Matrix lm_head;  // d x |V|
};

enum class TensorKind { weight, gain, bias };

// Visits every parameter tensor in a fixed order. This order defines both the
// initialization stream and the serialized payload layout.
template <typename Weights, typename Fn>
  requires std::same_as<std::remove_const_t<Weights>, ModelWeights>
void for_each_tensor(Weights& w, Fn&& fn) {
  fn("token_embeddings", w.token_embeddings, TensorKind::weight);
  fn("position_embeddings", w.position_embeddings, TensorKind::weight);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& layer = w.layers[l];
    fn("attn_norm_gain", layer.attn_norm_gain, TensorKind::gain);
    fn("attn_norm_bias", layer.attn_norm_bias, TensorKind::bias);
    fn("query", layer.query, TensorKind::weight);
    fn("key", layer.key, TensorKind::weight);
    fn("value", layer.value, TensorKind::weight);
    fn("attn_out", layer.attn_out, TensorKind::weight);
    fn("ff_norm_gain", layer.ff_norm_gain, TensorKind::gain);
    fn("ff_norm_bias", layer.ff_norm_bias, TensorKind::bias);
    fn("ff_in", layer.ff_in, TensorKind::weight);
    fn("ff_in_bias", layer.ff_in_bias, TensorKind::bias);
    fn("ff_out", layer.ff_out, TensorKind::weight);
    fn("ff_out_bias", layer.ff_out_bias, TensorKind::bias);
  }
  fn("final_norm_gain", w.final_norm_gain, TensorKind::gain);
  fn("final_norm_bias", w.final_norm_bias, TensorKind::bias);
  fn("lm_head", w.lm_head, TensorKind::weight);
}

// Allocates zero tensors with the shapes implied by `config`.
inline ModelWeights allocate_weights(const ModelConfig& config) {
  config.validate();
  const auto d = static_cast<Eigen::Index>(config.embed_dim);
  const auto ff = static_cast<Eigen::Index>(config.ff_dim());
  const auto vocab = static_cast<Eigen::Index>(config.vocab_size);
  ModelWeights w;
  w.config = config;
  w.token_embeddings = Matrix::Zero(vocab, d);
  w.position_embeddings = Matrix::Zero(static_cast<Eigen::Index>(config.max_context), d);
  w.layers.resize(config.num_layers);
  for (auto& layer : w.layers) {
    layer.attn_norm_gain = Vector::Zero(d);
    layer.attn_norm_bias = Vector::Zero(d);
    layer.query = Matrix::Zero(d, d);
    layer.key = Matrix::Zero(d, d);
    layer.value = Matrix::Zero(d, d);
    layer.attn_out = Matrix::Zero(d, d);
    layer.ff_norm_gain = Vector::Zero(d);
    layer.ff_norm_bias = Vector::Zero(d);
    layer.ff_in = Matrix::Zero(d, ff);
    layer.ff_in_bias = Vector::Zero(ff);
    layer.ff_out = Matrix::Zero(ff, d);
    layer.ff_out_bias = Vector::Zero(d);
  }
  w.final_norm_gain = Vector::Zero(d);
  w.final_norm_bias = Vector::Zero(d);
  w.lm_head = Matrix::Zero(d, vocab);
  return w;
}

inline std::size_t parameter_count(const ModelWeights& w) {
  std::size_t total = 0;
  for_each_tensor(w, [&](const char*, const auto& t, TensorKind) { total += t.size(); });
  return total;
}

inline bool all_finite(const ModelWeights& w) {
  bool ok = true;
  for_each_tensor(w, [&](const char*, const auto& t, TensorKind) { ok = ok && t.allFinite(); });
  return ok;
}

inline bool operator==(const ModelWeights& a, const ModelWeights& b) {
  if (!(a.config == b.config)) return false;
  std::vector<const double*> lhs;
  std::vector<std::size_t> sizes;
  for_each_tensor(a, [&](const char*, const auto& t, TensorKind) {
    lhs.push_back(t.data());
    sizes.push_back(static_cast<std::size_t>(t.size()));
  });
  std::size_t i = 0;
  bool equal = true;
  for_each_tensor(b, [&](const char*, const auto& t, TensorKind) {
    equal = equal && static_cast<std::size_t>(t.size()) == sizes[i] &&
            std::memcmp(t.data(), lhs[i], sizes[i] * sizeof(double)) == 0;
    ++i;
  });
  return equal;
}

namespace detail {

// Box-Muller over mt19937_64 so the stream is identical across standard libraries.
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : engine_(seed) {}

  double next() {
    if (cached_) {
      cached_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    cached_ = true;
    return radius * std::cos(angle);
  }

 private:
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool cached_ = false;
};

}  // namespace detail

// Weight matrices ~ N(0, 1) / sqrt(d), rounded to float32; norm gains 1, biases 0.
inline ModelWeights init_random(const ModelConfig& config) {
  ModelWeights w = allocate_weights(config);
  detail::NormalStream normal(config.seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));
  for_each_tensor(w, [&](const char*, auto& t, TensorKind kind) {
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      switch (kind) {
        case TensorKind::weight:
          t.data()[i] = static_cast<double>(static_cast<float>(normal.next() * scale));
          break;
        case TensorKind::gain:
          t.data()[i] = 1.0;
          break;
        case TensorKind::bias:
          t.data()[i] = 0.0;
          break;
      }
    }
  });
  return w;
}

using TokenSequence = std::vector<TokenId>;

// Row-major attention matrices per (layer, head) plus the output distribution.
struct ForwardTrace {
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  std::vector<Matrix> attentions;  // index layer * num_heads + head, each n x n
  Matrix final_logits;             // n x |V|
  Vector next_token_logprobs;      // |V|

  const Matrix& attention(std::size_t layer, std::size_t head) const {
    return attentions.at(layer * num_heads + head);
  }
  std::size_t length() const { return static_cast<std::size_t>(final_logits.rows()); }
};

// Log-softmax of one row, computed with the max shift.
inline Vector log_softmax(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  const double peak = row.maxCoeff();
  const double log_norm = peak + std::log((row.array() - peak).exp().sum());
  return (row.array() - log_norm).matrix().transpose();
}

namespace detail {

constexpr double kNormEpsilon = 1e-5;

struct NormCache {
  Matrix normalized;  // (x - mean) / std, before gain/bias
  Vector inv_std;
};

inline Matrix layer_norm(const Matrix& x, const Vector& gain, const Vector& bias,
                         NormCache& cache) {
  const auto n = x.rows();
  const auto d = static_cast<double>(x.cols());
  cache.normalized.resize(n, x.cols());
  cache.inv_std.resize(n);
  Matrix out(n, x.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = x.row(r).sum() / d;
    const auto centered = (x.row(r).array() - mean).eval();
    const double var = centered.square().sum() / d;
    const double inv_std = 1.0 / std::sqrt(var + kNormEpsilon);
    cache.inv_std(r) = inv_std;
    cache.normalized.row(r) = centered * inv_std;
    out.row(r) = cache.normalized.row(r).array() * gain.transpose().array() +
                 bias.transpose().array();
  }
  return out;
}

inline constexpr double kInvSqrt2 = 1.0 / std::numbers::sqrt2;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi * kInvSqrt2;
  return cdf + x * pdf;
}

struct LayerCache {
  Matrix input;  // residual stream entering the layer
  NormCache attn_norm;
  Matrix attn_in;  // normalized input
  Matrix queries, keys, values;
  std::vector<Matrix> attention;  // per head, n x n
  Matrix mixed;                   // concatenated head outputs, n x d
  Matrix after_attn;              // residual after attention
  NormCache ff_norm;
  Matrix ff_in;
  Matrix ff_pre;
  Matrix ff_act;
};

// Replaces one attention entry by value + delta right after the softmax;
// everything downstream is recomputed from the patched value.
struct AttentionPatch {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  double delta = 0.0;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Matrix final_input;
  NormCache final_norm;
  Matrix final_hidden;
  Matrix logits;
};

inline Matrix embed(const ModelWeights& w, std::span<const TokenId> tokens) {
  const auto n = static_cast<Eigen::Index>(tokens.size());
  Matrix e(n, static_cast<Eigen::Index>(w.config.embed_dim));
  for (Eigen::Index i = 0; i < n; ++i)
    e.row(i) = w.token_embeddings.row(tokens[static_cast<std::size_t>(i)]) + w.position_embeddings.row(i);
  return e;
}

// Masked row-wise softmax; entries above the diagonal are exactly zero.
inline void causal_softmax(Matrix& scores) {
  const auto n = scores.rows();
  for (Eigen::Index r = 0; r < n; ++r) {
    auto live = scores.row(r).head(r + 1);
    const double peak = live.maxCoeff();
    live = (live.array() - peak).exp();
    live /= live.sum();
    scores.row(r).tail(n - r - 1).setZero();
  }
}

inline ForwardCache run_forward(const ModelWeights& w, const Matrix& embeddings,
                                const std::optional<AttentionPatch>& patch = std::nullopt) {
  const auto& cfg = w.config;
  const auto n = embeddings.rows();
  const auto hd = static_cast<Eigen::Index>(cfg.head_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));

  ForwardCache cache;
  cache.layers.resize(cfg.num_layers);
  Matrix x = embeddings;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& lw = w.layers[l];
    auto& lc = cache.layers[l];
    lc.input = x;
    lc.attn_in = layer_norm(x, lw.attn_norm_gain, lw.attn_norm_bias, lc.attn_norm);
    lc.queries.noalias() = lc.attn_in * lw.query;
    lc.keys.noalias() = lc.attn_in * lw.key;
    lc.values.noalias() = lc.attn_in * lw.value;
    lc.attention.resize(cfg.num_heads);
    lc.mixed.resize(n, x.cols());
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * hd;
      Matrix scores = (lc.queries.middleCols(col, hd) * lc.keys.middleCols(col, hd).transpose()) * scale;
      causal_softmax(scores);
      if (patch && patch->layer == l && patch->head == h)
        scores(static_cast<Eigen::Index>(patch->row), static_cast<Eigen::Index>(patch->col)) += patch->delta;
      lc.mixed.middleCols(col, hd).noalias() = scores * lc.values.middleCols(col, hd);
      lc.attention[h] = std::move(scores);
    }
    lc.after_attn = x;
    lc.after_attn.noalias() += lc.mixed * lw.attn_out;
    lc.ff_in = layer_norm(lc.after_attn, lw.ff_norm_gain, lw.ff_norm_bias, lc.ff_norm);
    lc.ff_pre = lc.ff_in * lw.ff_in;
    lc.ff_pre.rowwise() += lw.ff_in_bias.transpose();
    lc.ff_act = lc.ff_pre.unaryExpr([](double v) { return gelu(v); });
    x = lc.after_attn;
    x.noalias() += lc.ff_act * lw.ff_out;
    x.rowwise() += lw.ff_out_bias.transpose();
  }
  cache.final_input = x;
  cache.final_hidden = layer_norm(x, w.final_norm_gain, w.final_norm_bias, cache.final_norm);
  cache.logits.noalias() = cache.final_hidden * w.lm_head;
  return cache;
}

inline void check_sequence(const ModelWeights& w, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw RangeError("forward: empty token sequence");
  if (tokens.size() > w.config.max_context)
    throw ContextOverflow("forward: sequence length " + std::to_string(tokens.size()) +
                          " exceeds max_context " + std::to_string(w.config.max_context));
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] >= w.config.vocab_size)
      throw RangeError("forward: token id " + std::to_string(tokens[i]) + " at position " +
                       std::to_string(i) + " is outside the vocabulary");
}

inline ForwardTrace to_trace(const ModelWeights& w, ForwardCache&& cache) {
  ForwardTrace trace;
  trace.num_layers = w.config.num_layers;
  trace.num_heads = w.config.num_heads;
  trace.attentions.reserve(trace.num_layers * trace.num_heads);
  for (auto& lc : cache.layers)
    for (auto& a : lc.attention) trace.attentions.push_back(std::move(a));
  trace.next_token_logprobs = log_softmax(cache.logits.row(cache.logits.rows() - 1));
  trace.final_logits = std::move(cache.logits);
  return trace;
}

}  // namespace detail

inline ForwardTrace forward(const ModelWeights& weights, std::span<const TokenId> tokens) {
  detail::check_sequence(weights, tokens);
  return detail::to_trace(weights, detail::run_forward(weights, detail::embed(weights, tokens)));
}

// Argmax decoding; ties go to the lowest token id.
inline TokenSequence greedy_decode(const ModelWeights& weights, std::span<const TokenId> prompt,
                                   std::size_t max_new_tokens) {
  if (prompt.size() + max_new_tokens > weights.config.max_context)
    throw ContextOverflow("greedy_decode: prompt of " + std::to_string(prompt.size()) + " plus " +
                          std::to_string(max_new_tokens) + " new tokens exceeds max_context " +
                          std::to_string(weights.config.max_context));
  TokenSequence out(prompt.begin(), prompt.end());
  for (std::size_t step = 0; step < max_new_tokens; ++step) {
    detail::check_sequence(weights, out);
    const auto cache = detail::run_forward(weights, detail::embed(weights, out));
    Eigen::Index best = 0;
    cache.logits.row(cache.logits.rows() - 1).maxCoeff(&best);
    out.push_back(static_cast<TokenId>(best));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weight file: "TNYF" magic, u32 version, config (6 x u32 dims, u64 seed),
// u64 payload element count, then little-endian float32 values in
// for_each_tensor order.

inline constexpr std::array<char, 4> kWeightMagic{'T', 'N', 'Y', 'F'};
inline constexpr std::uint32_t kWeightFormatVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw FormatError("weight file truncated");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_weights(const ModelWeights& w) {
  std::string out(kWeightMagic.begin(), kWeightMagic.end());
  detail::put_le<std::uint32_t>(out, kWeightFormatVersion);
  const auto& c = w.config;
  for (auto dim : {c.vocab_size, c.embed_dim, c.num_layers, c.num_heads, c.head_dim, c.max_context})
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dim));
  detail::put_le<std::uint64_t>(out, c.seed);
  detail::put_le<std::uint64_t>(out, parameter_count(w));
  for_each_tensor(w, [&](const char*, const auto& t, TensorKind) {
    for (Eigen::Index i = 0; i < t.size(); ++i)
      detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(t.data()[i])));
  });
  return out;
}

inline ModelWeights deserialize_weights(std::string bytes) {
  detail::ByteReader in(std::move(bytes));
  for (char expected : kWeightMagic)
    if (in.get<std::uint8_t>() != static_cast<std::uint8_t>(expected))
      throw FormatError("weight file: bad magic bytes");
  const auto version = in.get<std::uint32_t>();
  if (version != kWeightFormatVersion)
    throw FormatError("weight file: unsupported format version " + std::to_string(version));
  ModelConfig c;
  c.vocab_size = in.get<std::uint32_t>();
  c.embed_dim = in.get<std::uint32_t>();
  c.num_layers = in.get<std::uint32_t>();
  c.num_heads = in.get<std::uint32_t>();
  c.head_dim = in.get<std::uint32_t>();
  c.max_context = in.get<std::uint32_t>();
  c.seed = in.get<std::uint64_t>();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("weight file header: ") + e.what());
  }
  ModelWeights w = allocate_weights(c);
  const auto declared = in.get<std::uint64_t>();
  const auto expected = parameter_count(w);
  if (declared != expected)
    throw ShapeError("weight file: header config implies " + std::to_string(expected) +
                     " parameters but payload declares " + std::to_string(declared));
  if (in.remaining() != expected * sizeof(float)) {
    if (in.remaining() < expected * sizeof(float)) throw FormatError("weight file truncated");
    throw FormatError("weight file: trailing bytes after payload");
  }
  for_each_tensor(w, [&](const char*, auto& t, TensorKind) {
    for (Eigen::Index i = 0; i < t.size(); ++i)
      t.data()[i] = static_cast<double>(std::bit_cast<float>(in.get<std::uint32_t>()));
  });
  if (!all_finite(w)) throw FormatError("weight file: non-finite parameter");
  return w;
}

inline void save_weights(const ModelWeights& w, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const auto bytes = serialize_weights(w);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

inline ModelWeights load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open weight file " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize_weights(std::move(bytes));
  } catch (const ShapeError& e) {
    throw ShapeError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace attnlab
