#pragma once

// Small seeded models and prompts shared by the unit and acceptance tests.

#include "attnlab/optimizer.hpp"

#include <random>

namespace attnlab::testing {

inline ModelConfig tiny_config(std::uint64_t seed = 1, std::size_t vocab = 32, std::size_t max_context = 24) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.embed_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.head_dim = 8;
  c.max_context = max_context;
  c.seed = seed;
  return c;
}

inline TokenSequence random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(vocab - 1));
  TokenSequence out(n);
  for (auto& t : out) t = pick(rng);
  return out;
}

// Prompt of length n with payload J = {1, 2} and I = the last `slots` positions.
inline PromptLayout simple_layout(std::size_t n, std::size_t slots, std::size_t vocab, std::mt19937_64& rng) {
  PromptLayout layout;
  layout.tokens = random_tokens(n, vocab, rng);
  layout.payload = {1, 2};
  for (std::size_t i = n - slots; i < n; ++i) layout.modifiable.push_back(i);
  return layout;
}

inline TargetSequence random_target(std::size_t m, std::size_t vocab, std::mt19937_64& rng) {
  return {random_tokens(m, vocab, rng)};
}

}  // namespace attnlab::testing
