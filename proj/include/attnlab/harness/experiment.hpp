#pragma once

// Experiment specification and the three protocols: guided-vs-unguided
// comparison, budget scaling and head-weighting ablation, plus sensitivity
// profiling. Every random choice is derived from the master seed and the
// example id, so outputs are fixed by (weights, spec, seed).

#include "attnlab/harness/results.hpp"
#include "attnlab/sensitivity.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

namespace attnlab::harness {

struct ExperimentSpec {
  std::string weights;  // empty: seeded random model built from `model`
  ModelConfig model{128, 32, 4, 4, 8, 192, 0};
  std::string vocab;     // empty: builtin vocabulary
  std::string examples;  // empty: builtin examples
  std::size_t sample_size = 0;  // 0: use every example
  std::vector<BudgetConfig> budgets{{0, 20}};
  std::vector<Algorithm> algorithms{Algorithm::gcg, Algorithm::astra};
  std::size_t top_p = 256;
  std::size_t iterations = 500;
  std::size_t batch = 512;
  std::size_t workers = 1;
  std::size_t phase1_iters = 350;
  std::size_t phase2_iters = 150;
  PhaseOneSelection phase1_selection = PhaseOneSelection::by_target_logprobs;
  WeightingScheme weighting = WeightingScheme::clipped_sensitivity;
  std::string profile_dir = "profile";
  std::string profile_corpus;  // empty: seeded synthetic corpus
  std::size_t corpus_size = 64;
  std::uint64_t corpus_seed = 1;
  double drop_fraction = 0.75;
  std::string profile_target = std::string(kDefaultTarget);
  std::size_t runs_per_example = 1;
  std::string output_dir = "results";
  std::uint64_t seed = 0;

  void validate() const {
    if (runs_per_example < 1) throw ConfigError("runs_per_example must be >= 1");
    if (budgets.empty()) throw ConfigError("budget list is empty");
    for (const auto& b : budgets) b.validate();
    if (top_p < 1 || iterations < 1 || batch < 1) throw ConfigError("search.top_p, iterations and batch must be >= 1");
    if (!(drop_fraction >= 0.0 && drop_fraction < 1.0)) throw ConfigError("profile.drop_fraction must lie in [0, 1)");
    if (corpus_size < 1) throw ConfigError("profile.corpus_size must be >= 1");
    if (weighting == WeightingScheme::custom) throw ConfigError("weighting 'custom' is not selectable in a spec");
  }
};

inline nlohmann::json to_json(const ExperimentSpec& s) {
  nlohmann::json budgets = nlohmann::json::array();
  for (const auto& b : s.budgets) budgets.push_back({b.prefix_tokens, b.suffix_tokens});
  nlohmann::json algorithms = nlohmann::json::array();
  for (auto a : s.algorithms) algorithms.push_back(std::string(to_string(a)));
  return {
      {"model",
       {{"weights", s.weights},
        {"vocab_size", s.model.vocab_size},
        {"embed_dim", s.model.embed_dim},
        {"num_layers", s.model.num_layers},
        {"num_heads", s.model.num_heads},
        {"head_dim", s.model.head_dim},
        {"max_context", s.model.max_context},
        {"seed", s.model.seed}}},
      {"vocab", s.vocab},
      {"examples", s.examples},
      {"sample_size", s.sample_size},
      {"budgets", budgets},
      {"algorithms", algorithms},
      {"search", {{"top_p", s.top_p}, {"iterations", s.iterations}, {"batch", s.batch}, {"workers", s.workers}}},
      {"astra",
       {{"phase1_iters", s.phase1_iters},
        {"phase2_iters", s.phase2_iters},
        {"phase1_selection",
         s.phase1_selection == PhaseOneSelection::by_loss ? "loss" : "target_logprobs"}}},
      {"weighting", std::string(to_string(s.weighting))},
      {"profile",
       {{"dir", s.profile_dir},
        {"corpus", s.profile_corpus},
        {"corpus_size", s.corpus_size},
        {"corpus_seed", s.corpus_seed},
        {"drop_fraction", s.drop_fraction},
        {"target", s.profile_target}}},
      {"runs_per_example", s.runs_per_example},
      {"output_dir", s.output_dir},
      {"seed", s.seed},
  };
}

namespace detail {

// Rejects keys absent from the schema and values whose JSON type differs.
inline void check_against_schema(const nlohmann::json& value, const nlohmann::json& schema, const std::string& path) {
  if (schema.is_object()) {
    if (!value.is_object()) throw ConfigError("config: '" + path + "' must be an object");
    for (const auto& [key, v] : value.items()) {
      if (!schema.contains(key)) throw ConfigError("config: unknown field '" + path + (path.empty() ? "" : ".") + key + "'");
      check_against_schema(v, schema.at(key), path + (path.empty() ? "" : ".") + key);
    }
    return;
  }
  const bool ok = (schema.is_number() && value.is_number()) || (schema.is_string() && value.is_string()) ||
                  (schema.is_boolean() && value.is_boolean()) || (schema.is_array() && value.is_array());
  if (!ok) throw ConfigError("config: field '" + path + "' has the wrong type");
  if (schema.is_number_unsigned() && value.is_number_integer() && value.get<long long>() < 0)
    throw ConfigError("config: field '" + path + "' must be non-negative");
}

}  // namespace detail

inline ExperimentSpec spec_from_json(const nlohmann::json& j) {
  const ExperimentSpec defaults;
  detail::check_against_schema(j, to_json(defaults), "");
  nlohmann::json m = to_json(defaults);
  m.merge_patch(j);
  ExperimentSpec s;
  try {
    const auto& mj = m.at("model");
    s.weights = mj.at("weights").get<std::string>();
    s.model.vocab_size = mj.at("vocab_size").get<std::size_t>();
    s.model.embed_dim = mj.at("embed_dim").get<std::size_t>();
    s.model.num_layers = mj.at("num_layers").get<std::size_t>();
    s.model.num_heads = mj.at("num_heads").get<std::size_t>();
    s.model.head_dim = mj.at("head_dim").get<std::size_t>();
    s.model.max_context = mj.at("max_context").get<std::size_t>();
    s.model.seed = mj.at("seed").get<std::uint64_t>();
    s.vocab = m.at("vocab").get<std::string>();
    s.examples = m.at("examples").get<std::string>();
    s.sample_size = m.at("sample_size").get<std::size_t>();
    s.budgets.clear();
    for (const auto& b : m.at("budgets")) {
      if (!b.is_array() || b.size() != 2) throw ConfigError("config: each budget must be [prefix, suffix]");
      s.budgets.push_back({b[0].get<std::size_t>(), b[1].get<std::size_t>()});
    }
    s.algorithms.clear();
    for (const auto& a : m.at("algorithms")) s.algorithms.push_back(parse_algorithm(a.get<std::string>()));
    const auto& search = m.at("search");
    s.top_p = search.at("top_p").get<std::size_t>();
    s.iterations = search.at("iterations").get<std::size_t>();
    s.batch = search.at("batch").get<std::size_t>();
    s.workers = search.at("workers").get<std::size_t>();
    const auto& astra_cfg = m.at("astra");
    s.phase1_iters = astra_cfg.at("phase1_iters").get<std::size_t>();
    s.phase2_iters = astra_cfg.at("phase2_iters").get<std::size_t>();
    const auto sel = astra_cfg.at("phase1_selection").get<std::string>();
    if (sel == "loss") s.phase1_selection = PhaseOneSelection::by_loss;
    else if (sel == "target_logprobs") s.phase1_selection = PhaseOneSelection::by_target_logprobs;
    else throw ConfigError("config: astra.phase1_selection must be 'target_logprobs' or 'loss'");
    s.weighting = parse_weighting_scheme(m.at("weighting").get<std::string>());
    const auto& prof = m.at("profile");
    s.profile_dir = prof.at("dir").get<std::string>();
    s.profile_corpus = prof.at("corpus").get<std::string>();
    s.corpus_size = prof.at("corpus_size").get<std::size_t>();
    s.corpus_seed = prof.at("corpus_seed").get<std::uint64_t>();
    s.drop_fraction = prof.at("drop_fraction").get<double>();
    s.profile_target = prof.at("target").get<std::string>();
    s.runs_per_example = m.at("runs_per_example").get<std::size_t>();
    s.output_dir = m.at("output_dir").get<std::string>();
    s.seed = m.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  s.validate();
  return s;
}

// Applies "a.b.c=value" overrides; the value is parsed as JSON when possible,
// otherwise taken as a string.
inline nlohmann::json apply_override(nlohmann::json config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key.path=value");
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  std::string pointer = "/";
  for (char c : key) pointer += c == '.' ? '/' : c;
  config[nlohmann::json::json_pointer(pointer)] = value;
  return config;
}

// ---------------------------------------------------------------------------

struct Lab {
  ModelWeights weights;
  std::string model_source;
  Vocabulary vocab;
  std::vector<InjectionExample> examples;
};

inline Lab load_lab(const ExperimentSpec& spec) {
  Lab lab;
  if (spec.weights.empty()) {
    lab.weights = init_random(spec.model);
    lab.model_source = "seeded-random:" + std::to_string(spec.model.seed);
  } else {
    lab.weights = load_weights(spec.weights);
    lab.model_source = "file:" + spec.weights;
  }
  lab.vocab = spec.vocab.empty() ? Vocabulary::builtin() : Vocabulary::load(spec.vocab);
  if (lab.vocab.size() != lab.weights.config.vocab_size)
    throw ConfigError("vocabulary has " + std::to_string(lab.vocab.size()) + " entries but the model expects " +
                      std::to_string(lab.weights.config.vocab_size));
  auto all = spec.examples.empty() ? builtin_examples() : load_examples(spec.examples);
  if (all.empty()) throw ConfigError("no examples");
  if (spec.sample_size > 0 && spec.sample_size < all.size()) {
    std::vector<std::size_t> order(all.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(spec.seed, 7));
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(spec.sample_size);
    std::sort(order.begin(), order.end());
    for (auto i : order) lab.examples.push_back(all[i]);
  } else {
    lab.examples = std::move(all);
  }
  return lab;
}

inline std::uint64_t slot_seed(const ExperimentSpec& spec, const InjectionExample& e, std::size_t run) {
  return derive_seed(spec.seed, 1000 + run, fnv1a64(e.id));
}

inline std::uint64_t search_seed(const ExperimentSpec& spec, const InjectionExample& e, std::size_t run) {
  return derive_seed(spec.seed, 2000 + run, fnv1a64(e.id));
}

inline std::size_t effective_top_p(const ExperimentSpec& spec, const Lab& lab) {
  return std::min(spec.top_p, lab.weights.config.vocab_size);
}

struct AttackRun {
  ResultRecord record;
  PromptLayout layout;
  std::vector<OptimizationTrace> phases;

  NamedTrace named_trace() const {
    std::vector<const OptimizationTrace*> ptrs;
    for (const auto& p : phases) ptrs.push_back(&p);
    return {trace_file_stem(record), format_trace_csv(ptrs)};
  }

  // Adopted-point TargetLogprobs across all phases, initial points included.
  std::vector<double> curve() const {
    std::vector<double> out;
    for (const auto& p : phases)
      for (const auto& r : p.records) out.push_back(r.target_logprobs);
    return out;
  }
};

inline AttackRun run_attack(const Lab& lab, const ExperimentSpec& spec, const InjectionExample& example,
                            const BudgetConfig& budget, Algorithm algorithm, std::size_t run,
                            const HeadWeighting* weighting = nullptr, std::string variant = "-") {
  const auto start = std::chrono::steady_clock::now();
  AttackRun out;
  out.layout = build_prompt(example, budget, lab.vocab, lab.weights.config.max_context, slot_seed(spec, example, run));
  const auto target = encode_target(lab.vocab, example.target);
  const auto seed = search_seed(spec, example, run);

  TokenSequence best;
  if (algorithm == Algorithm::astra) {
    if (!weighting) throw ConfigError("astra needs a head weighting");
    AstraParams p;
    p.top_p = effective_top_p(spec, lab);
    p.phase1_iters = spec.phase1_iters;
    p.phase2_iters = spec.phase2_iters;
    p.batch = spec.batch;
    p.head_weights = *weighting;
    p.rng_seed = seed;
    p.workers = spec.workers;
    p.excluded_tokens = lab.vocab.special_tokens();
    p.phase1_selection = spec.phase1_selection;
    auto res = astra(lab.weights, out.layout, target, p);
    best = res.tokens;
    out.phases.push_back(std::move(res.phase1));
    out.phases.push_back(std::move(res.phase2));
    out.record.iterations = spec.phase1_iters + spec.phase2_iters;
  } else {
    SearchParams p;
    p.top_p = effective_top_p(spec, lab);
    p.iterations = spec.iterations;
    p.batch = spec.batch;
    p.rng_seed = seed;
    p.workers = spec.workers;
    p.excluded_tokens = lab.vocab.special_tokens();
    const auto objective = target_logprobs_objective(target);
    auto res = algorithm == Algorithm::gcg ? gen_gcg(lab.weights, out.layout, objective, p)
                                           : unguided_search(lab.weights, out.layout, objective, p);
    best = res.tokens;
    out.phases.push_back(std::move(res.trace));
    out.record.iterations = spec.iterations;
  }

  auto& r = out.record;
  r.example_id = example.id;
  r.budget = budget;
  r.algorithm = algorithm;
  r.variant = std::move(variant);
  r.seed = seed;
  r.best_target_logprobs = target_logprobs(lab.weights, best, target);
  r.final_tokens = best;
  r.success = is_success(generate_text(lab.weights, lab.vocab, best, example.target.size()), example.target);
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// Replays greedy decoding on a record's final tokens.
inline bool replay_success(const Lab& lab, const ResultRecord& record, const std::string& target) {
  return is_success(generate_text(lab.weights, lab.vocab, record.final_tokens, target.size()), target);
}

inline nlohmann::json lab_metadata(const Lab& lab, const ExperimentSpec& spec) {
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& e : lab.examples) ids.push_back(e.id);
  const auto& c = lab.weights.config;
  return {{"model_source", lab.model_source},
          {"model_config",
           {{"vocab_size", c.vocab_size},
            {"embed_dim", c.embed_dim},
            {"num_layers", c.num_layers},
            {"num_heads", c.num_heads},
            {"head_dim", c.head_dim},
            {"max_context", c.max_context},
            {"seed", c.seed}}},
          {"vocab_size", lab.vocab.size()},
          {"examples", ids},
          {"effective_top_p", effective_top_p(spec, lab)},
          {"master_seed", spec.seed},
          {"seed_derivation",
           "slot init = derive_seed(seed, 1000 + run, fnv1a64(example_id)); "
           "search = derive_seed(seed, 2000 + run, fnv1a64(example_id))"},
          {"note", "desk-scale model; success rates are not comparable with full-size defended models"}};
}

// ---------------------------------------------------------------------------
// Sensitivity profiling.

inline std::vector<TokenSequence> profiling_corpus(const ExperimentSpec& spec, const Vocabulary& vocab,
                                                   std::size_t max_length) {
  std::vector<std::pair<std::string, std::string>> texts;
  if (!spec.profile_corpus.empty()) {
    for (const auto& e : load_examples(spec.profile_corpus)) texts.emplace_back(e.instruction, e.data);
  } else {
    static constexpr const char* kWords[] = {
        "write", "a",     "short",  "note",  "about", "the",    "list",   "three", "ideas",  "for",
        "our",   "team",  "explain", "how",  "this",  "works",  "give",   "me",    "simple", "steps",
        "plan",  "trip",  "to",     "city",  "summary", "of",   "story",  "name",  "two",    "reasons",
        "why",   "people", "like",  "tea",   "draft", "email",  "boss",   "review", "book",  "describe",
        "your",  "day",   "recipe", "with",  "rice",  "compare", "cats",  "and",   "dogs",   "tell",
        "joke",  "on",    "rain",   "in",    "spring", "is",    "it",     "good",  "idea",   "now"};
    std::mt19937_64 rng(spec.corpus_seed);
    std::uniform_int_distribution<std::size_t> word(0, std::size(kWords) - 1);
    auto sentence = [&](std::size_t lo, std::size_t hi) {
      std::uniform_int_distribution<std::size_t> len(lo, hi);
      const auto count = len(rng);
      std::string s;
      for (std::size_t i = 0; i < count; ++i) {
        if (i) s += ' ';
        s += kWords[word(rng)];
      }
      s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
      return s + ".";
    };
    for (std::size_t i = 0; i < spec.corpus_size; ++i) {
      auto instruction = sentence(3, 6);
      auto data = sentence(4, 10);
      texts.emplace_back(std::move(instruction), std::move(data));
    }
  }
  std::vector<TokenSequence> corpus;
  for (const auto& [instruction, data] : texts) {
    TokenSequence z;
    z.push_back(vocab.id_of("[INST]"));
    for (auto t : vocab.encode(strip_delimiters(instruction))) z.push_back(t);
    z.push_back(vocab.id_of("[/INST]"));
    z.push_back(vocab.id_of("[DATA]"));
    for (auto t : vocab.encode(strip_delimiters(data))) z.push_back(t);
    z.push_back(vocab.id_of("[/DATA]"));
    if (z.size() > max_length)
      throw ContextOverflow("profiling corpus entry of " + std::to_string(z.size()) +
                            " tokens does not fit the model context with the target appended");
    corpus.push_back(std::move(z));
  }
  return corpus;
}

struct Profile {
  SensitivityMap sensitivity;
  HeadWeighting clipped;
  nlohmann::json metadata;
};

inline std::uint64_t corpus_hash(std::span<const TokenSequence> corpus) {
  std::string all;
  for (const auto& z : corpus) all += tokens_to_string(z) + "\n";
  return fnv1a64(all);
}

// Computes the averaged and clipped sensitivities and writes sensitivity.csv,
// clipped.csv (L rows x H columns) and profile.json into spec.profile_dir.
inline Profile profile_sensitivity(const Lab& lab, const ExperimentSpec& spec) {
  const auto target = encode_target(lab.vocab, spec.profile_target);
  if (target.size() >= lab.weights.config.max_context)
    throw ContextOverflow("profile target does not fit the model context");
  const auto corpus = profiling_corpus(spec, lab.vocab, lab.weights.config.max_context - target.size());
  Profile p;
  p.sensitivity = avg_sensitivity(lab.weights, corpus, target);
  p.clipped = clip_sensitivity(p.sensitivity, spec.drop_fraction);
  nlohmann::json target_tokens = target.tokens;
  p.metadata = {{"target", spec.profile_target},
                {"target_tokens", target_tokens},
                {"drop_fraction", spec.drop_fraction},
                {"dataset_size", corpus.size()},
                {"corpus", spec.profile_corpus.empty() ? "synthetic" : spec.profile_corpus},
                {"corpus_seed", spec.corpus_seed},
                {"corpus_hash", hex64(corpus_hash(corpus))},
                {"model_source", lab.model_source},
                {"layers", lab.weights.config.num_layers},
                {"heads", lab.weights.config.num_heads}};
  const std::filesystem::path dir = spec.profile_dir;
  write_text_file(dir / "sensitivity.csv", format_matrix_csv(p.sensitivity.values));
  write_text_file(dir / "clipped.csv", format_matrix_csv(p.clipped.values));
  write_text_file(dir / "profile.json", p.metadata.dump(2) + "\n");
  return p;
}

inline Profile load_profile(const Lab& lab, const ExperimentSpec& spec) {
  const std::filesystem::path dir = spec.profile_dir;
  if (!std::filesystem::exists(dir / "sensitivity.csv") || !std::filesystem::exists(dir / "profile.json"))
    throw ConfigError("no sensitivity profile in '" + dir.string() +
                      "'; run `attnlab profile` with the same config first");
  Profile p;
  p.metadata = nlohmann::json::parse(read_text_file(dir / "profile.json"));
  p.sensitivity.values = parse_matrix_csv(read_text_file(dir / "sensitivity.csv"));
  p.sensitivity.target = encode_target(lab.vocab, p.metadata.at("target").get<std::string>());
  p.sensitivity.dataset_size = p.metadata.at("dataset_size").get<std::size_t>();
  HeadWeighting{p.sensitivity.values, WeightingScheme::avg_sensitivity}.validate_for(lab.weights.config);
  p.clipped = clip_sensitivity(p.sensitivity, spec.drop_fraction);
  return p;
}

inline HeadWeighting make_weighting(WeightingScheme scheme, const Lab& lab, const std::optional<Profile>& profile) {
  const auto& c = lab.weights.config;
  switch (scheme) {
    case WeightingScheme::uniform: return HeadWeighting::uniform(c.num_layers, c.num_heads);
    case WeightingScheme::only_first: return HeadWeighting::only_first(c.num_layers, c.num_heads);
    case WeightingScheme::only_last: return HeadWeighting::only_last(c.num_layers, c.num_heads);
    case WeightingScheme::avg_sensitivity:
    case WeightingScheme::clipped_sensitivity:
      if (!profile) throw ConfigError("weighting needs a sensitivity profile; run `attnlab profile` first");
      return scheme == WeightingScheme::avg_sensitivity ? sensitivity_weighting(profile->sensitivity) : profile->clipped;
    case WeightingScheme::custom: break;
  }
  throw ConfigError("custom weighting cannot be constructed from a spec");
}

// Loads the profile only when the configured scheme needs one.
inline HeadWeighting spec_weighting(const Lab& lab, const ExperimentSpec& spec) {
  std::optional<Profile> profile;
  if (spec.weighting == WeightingScheme::avg_sensitivity || spec.weighting == WeightingScheme::clipped_sensitivity)
    profile = load_profile(lab, spec);
  return make_weighting(spec.weighting, lab, profile);
}

// ---------------------------------------------------------------------------
// Aggregation helpers.

inline std::vector<double> mean_curve(const std::vector<std::vector<double>>& curves, const std::string& what) {
  if (curves.empty()) return {};
  const auto len = curves.front().size();
  std::vector<double> out(len, 0.0);
  for (const auto& c : curves) {
    if (c.size() != len)
      throw Error(what + ": loss curves of unequal length (" + std::to_string(c.size()) + " vs " +
                  std::to_string(len) + ")");
    for (std::size_t i = 0; i < len; ++i) out[i] += c[i];
  }
  for (auto& v : out) v /= static_cast<double>(curves.size());
  return out;
}

// ---------------------------------------------------------------------------
// Guided vs unguided comparison.

struct ComparisonReport {
  std::vector<std::pair<std::string, double>> d_r;  // per example
  std::vector<double> guided_curve, unguided_curve;
  double mean = 0.0;
  double standard_error = 0.0;
  std::vector<ResultRecord> records;
  std::vector<NamedTrace> traces;
};

// D_r = (1/r) sum over runs of (best guided TargetLogprobs - best unguided TargetLogprobs).
inline double mean_paired_difference(std::span<const double> guided, std::span<const double> unguided) {
  if (guided.size() != unguided.size() || guided.empty())
    throw Error("comparison: mismatched run counts (" + std::to_string(guided.size()) + " guided vs " +
                std::to_string(unguided.size()) + " unguided)");
  double sum = 0.0;
  for (std::size_t i = 0; i < guided.size(); ++i) sum += guided[i] - unguided[i];
  return sum / static_cast<double>(guided.size());
}

inline std::string format_histogram_csv(std::span<const double> values, std::size_t bins = 10) {
  std::string out = "bin_low,bin_high,count\n";
  if (values.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  double lo = *lo_it, hi = *hi_it;
  if (hi == lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / static_cast<double>(bins);
  std::vector<std::size_t> counts(bins, 0);
  for (double v : values) {
    auto b = static_cast<std::size_t>((v - lo) / width);
    ++counts[std::min(b, bins - 1)];
  }
  for (std::size_t b = 0; b < bins; ++b)
    out += format_double(lo + width * static_cast<double>(b)) + "," +
           format_double(lo + width * static_cast<double>(b + 1)) + "," + std::to_string(counts[b]) + "\n";
  return out;
}

inline ComparisonReport run_comparison(const Lab& lab, const ExperimentSpec& spec) {
  const auto budget = spec.budgets.front();
  ComparisonReport rep;
  std::vector<std::vector<double>> guided_curves, unguided_curves;
  std::vector<double> all;
  for (const auto& example : lab.examples) {
    std::vector<double> guided_best, unguided_best;
    for (std::size_t run = 0; run < spec.runs_per_example; ++run) {
      auto guided = run_attack(lab, spec, example, budget, Algorithm::gcg, run);
      auto unguided = run_attack(lab, spec, example, budget, Algorithm::unguided, run);
      guided_best.push_back(guided.phases.front().best_target_logprobs());
      unguided_best.push_back(unguided.phases.front().best_target_logprobs());
      guided_curves.push_back(guided.curve());
      unguided_curves.push_back(unguided.curve());
      for (auto* a : {&guided, &unguided}) {
        rep.traces.push_back(a->named_trace());
        rep.records.push_back(std::move(a->record));
      }
    }
    const double d = mean_paired_difference(guided_best, unguided_best);
    rep.d_r.emplace_back(example.id, d);
    all.push_back(d);
  }
  rep.guided_curve = mean_curve(guided_curves, "comparison");
  rep.unguided_curve = mean_curve(unguided_curves, "comparison");
  rep.mean = std::accumulate(all.begin(), all.end(), 0.0) / static_cast<double>(all.size());
  if (all.size() > 1) {
    double ss = 0.0;
    for (double v : all) ss += (v - rep.mean) * (v - rep.mean);
    rep.standard_error = std::sqrt(ss / static_cast<double>(all.size() - 1) / static_cast<double>(all.size()));
  }
  return rep;
}

inline void write_comparison(const ComparisonReport& rep, const Lab& lab, const ExperimentSpec& spec) {
  const std::filesystem::path dir = spec.output_dir;
  std::string dr = "example_id,d_r\n";
  std::vector<double> values;
  for (const auto& [id, v] : rep.d_r) {
    dr += csv_field(id) + "," + format_double(v) + "\n";
    values.push_back(v);
  }
  write_text_file(dir / "dr.csv", dr);
  write_text_file(dir / "dr_histogram.csv", format_histogram_csv(values));
  write_text_file(dir / "loss_curves.csv", format_curves_csv({"guided", "unguided"}, {rep.guided_curve, rep.unguided_curve}));
  auto meta = lab_metadata(lab, spec);
  meta["protocol"] = "compare";
  meta["d_r_mean"] = rep.mean;
  meta["d_r_standard_error"] = rep.standard_error;
  emit_results(rep.records, rep.traces, to_json(spec), meta, dir);
}

// ---------------------------------------------------------------------------
// Budget scaling.

struct ScalingRow {
  BudgetConfig budget;
  Algorithm algorithm = Algorithm::gcg;
  std::size_t runs = 0;
  double asr = 0.0;
  double mean_min_target_logprobs = 0.0;
  std::size_t failures = 0;
};

struct ScalingReport {
  std::vector<ScalingRow> rows;
  std::vector<ResultRecord> records;
  std::vector<NamedTrace> traces;
  std::vector<std::string> errors;
};

inline ScalingReport run_scaling(const Lab& lab, const ExperimentSpec& spec) {
  if (spec.budgets.empty()) throw ConfigError("scale: budget list is empty");
  std::optional<HeadWeighting> weighting;
  for (auto a : spec.algorithms)
    if (a == Algorithm::astra && !weighting) weighting = spec_weighting(lab, spec);
  ScalingReport rep;
  for (const auto& budget : spec.budgets) {
    for (auto algorithm : spec.algorithms) {
      ScalingRow row{budget, algorithm};
      double sum = 0.0;
      std::size_t wins = 0;
      for (const auto& example : lab.examples) {
        for (std::size_t run = 0; run < spec.runs_per_example; ++run) {
          try {
            auto a = run_attack(lab, spec, example, budget, algorithm, run, weighting ? &*weighting : nullptr,
                                algorithm == Algorithm::astra ? std::string(to_string(spec.weighting)) : "-");
            sum += a.record.best_target_logprobs;
            wins += a.record.success ? 1 : 0;
            ++row.runs;
            rep.traces.push_back(a.named_trace());
            rep.records.push_back(std::move(a.record));
          } catch (const Error& e) {
            ++row.failures;
            rep.errors.push_back(example.id + " (" + std::to_string(budget.prefix_tokens) + "," +
                                 std::to_string(budget.suffix_tokens) + ") " + std::string(to_string(algorithm)) +
                                 ": " + e.what());
          }
        }
      }
      if (row.runs) {
        row.asr = static_cast<double>(wins) / static_cast<double>(row.runs);
        row.mean_min_target_logprobs = sum / static_cast<double>(row.runs);
      }
      rep.rows.push_back(row);
    }
  }
  return rep;
}

inline std::string format_scaling_csv(std::span<const ScalingRow> rows) {
  std::string out = "budget,prefix_tokens,suffix_tokens,algorithm,runs,failures,asr,mean_min_target_logprobs\n";
  for (const auto& r : rows)
    out += std::to_string(r.budget.total()) + "," + std::to_string(r.budget.prefix_tokens) + "," +
           std::to_string(r.budget.suffix_tokens) + "," + std::string(to_string(r.algorithm)) + "," +
           std::to_string(r.runs) + "," + std::to_string(r.failures) + "," + format_double(r.asr) + "," +
           (r.runs ? format_double(r.mean_min_target_logprobs) : std::string{}) + "\n";
  return out;
}

inline void write_scaling(const ScalingReport& rep, const Lab& lab, const ExperimentSpec& spec) {
  const std::filesystem::path dir = spec.output_dir;
  write_text_file(dir / "scaling.csv", format_scaling_csv(rep.rows));
  auto meta = lab_metadata(lab, spec);
  meta["protocol"] = "scale";
  meta["errors"] = rep.errors;
  emit_results(rep.records, rep.traces, to_json(spec), meta, dir);
}

// ---------------------------------------------------------------------------
// Head-weighting ablation.

inline constexpr WeightingScheme kAblationSchemes[] = {
    WeightingScheme::only_first, WeightingScheme::only_last, WeightingScheme::uniform,
    WeightingScheme::avg_sensitivity, WeightingScheme::clipped_sensitivity};

struct AblationReport {
  std::vector<std::string> names;           // scheme names then "baseline"
  std::vector<std::vector<double>> curves;  // averaged TargetLogprobs per iteration
  std::vector<ResultRecord> records;
  std::vector<NamedTrace> traces;
};

// ASTRA under each weighting scheme plus a GCG baseline with the same total
// iteration count. Scheme curves have N1 + N2 + 2 points (both phases'
// initial points), the baseline N1 + N2 + 1.
inline AblationReport run_ablation(const Lab& lab, const ExperimentSpec& spec,
                                   std::span<const WeightingScheme> schemes = kAblationSchemes,
                                   bool include_baseline = true) {
  std::optional<Profile> profile;
  for (auto s : schemes)
    if ((s == WeightingScheme::avg_sensitivity || s == WeightingScheme::clipped_sensitivity) && !profile)
      profile = load_profile(lab, spec);
  const auto budget = spec.budgets.front();
  AblationReport rep;
  for (auto scheme : schemes) {
    const auto weighting = make_weighting(scheme, lab, profile);
    std::vector<std::vector<double>> curves;
    for (const auto& example : lab.examples) {
      for (std::size_t run = 0; run < spec.runs_per_example; ++run) {
        auto a = run_attack(lab, spec, example, budget, Algorithm::astra, run, &weighting,
                            std::string(to_string(scheme)));
        curves.push_back(a.curve());
        rep.traces.push_back(a.named_trace());
        rep.records.push_back(std::move(a.record));
      }
    }
    rep.names.emplace_back(to_string(scheme));
    rep.curves.push_back(mean_curve(curves, "ablation"));
  }
  if (include_baseline) {
    ExperimentSpec baseline = spec;
    baseline.iterations = spec.phase1_iters + spec.phase2_iters;
    if (baseline.iterations == 0) baseline.iterations = 1;
    std::vector<std::vector<double>> curves;
    for (const auto& example : lab.examples) {
      for (std::size_t run = 0; run < spec.runs_per_example; ++run) {
        auto a = run_attack(lab, baseline, example, budget, Algorithm::gcg, run);
        curves.push_back(a.curve());
        rep.traces.push_back(a.named_trace());
        rep.records.push_back(std::move(a.record));
      }
    }
    rep.names.emplace_back("baseline");
    rep.curves.push_back(mean_curve(curves, "ablation baseline"));
  }
  return rep;
}

inline void write_ablation(const AblationReport& rep, const Lab& lab, const ExperimentSpec& spec) {
  const std::filesystem::path dir = spec.output_dir;
  write_text_file(dir / "ablation.csv", format_curves_csv(rep.names, rep.curves));
  auto meta = lab_metadata(lab, spec);
  meta["protocol"] = "ablate";
  emit_results(rep.records, rep.traces, to_json(spec), meta, dir);
}

}  // namespace attnlab::harness
