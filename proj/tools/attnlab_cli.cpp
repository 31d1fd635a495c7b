// attnlab command line: init, forward, profile, attack, compare, scale, ablate, report, config.

#include "attnlab/harness/experiment.hpp"
#include "attnlab/harness/report.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

namespace {

using namespace attnlab;
using namespace attnlab::harness;

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string output;
  std::optional<std::size_t> workers;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config, "JSON experiment config");
  cmd->add_option("--set", o.overrides, "override a config field, e.g. --set search.iterations=60")
      ->take_all()
      ->allow_extra_args(false);
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("-o,--out", o.output, "output directory (config field output_dir)");
  cmd->add_option("--workers", o.workers, "candidate evaluation threads (config field search.workers)");
}

ExperimentSpec resolve(const CommonOptions& o) {
  nlohmann::json j = nlohmann::json::object();
  if (!o.config.empty()) {
    try {
      j = nlohmann::json::parse(read_text_file(o.config));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(o.config + ": " + e.what());
    }
  }
  // Relative file references in a config resolve against the working directory.
  j = to_json(spec_from_json(j));
  for (const auto& s : o.overrides) j = apply_override(j, s);
  if (o.seed) j["seed"] = *o.seed;
  if (!o.output.empty()) j["output_dir"] = o.output;
  if (o.workers) j["search"]["workers"] = *o.workers;
  return spec_from_json(j);
}

void print_records(std::span<const ResultRecord> records) {
  for (const auto& r : records)
    std::printf("%-10s (%zu,%zu) %-8s %-20s seed=%llu best=%.6f success=%d %.2fs\n", r.example_id.c_str(),
                r.budget.prefix_tokens, r.budget.suffix_tokens, std::string(to_string(r.algorithm)).c_str(),
                r.variant.c_str(), static_cast<unsigned long long>(r.seed), r.best_target_logprobs, r.success ? 1 : 0,
                r.wall_time_s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attnlab: attention-loss prompt injection attacks on a toy decoder"};
  app.require_subcommand(1);

  CommonOptions common;

  auto* init = app.add_subcommand("init", "write the builtin vocabulary, examples and a seeded weight file");
  add_common(init, common);
  std::string init_weights = "data/toy.bin", init_vocab = "data/vocab.txt", init_examples = "data/examples.jsonl";
  init->add_option("--weights", init_weights, "weight file to write");
  init->add_option("--vocab", init_vocab, "vocabulary file to write");
  init->add_option("--examples", init_examples, "example file to write");

  auto* config_cmd = app.add_subcommand("config", "print the effective configuration as JSON");
  add_common(config_cmd, common);

  auto* profile = app.add_subcommand("profile", "compute and store averaged and clipped head sensitivities");
  add_common(profile, common);

  auto* attack = app.add_subcommand("attack", "attack a single example");
  add_common(attack, common);
  std::string example_id, instruction, data, algorithm_name = "astra";
  std::optional<std::string> payload, target;
  std::optional<std::size_t> prefix, suffix;
  std::size_t run = 0;
  attack->add_option("--example", example_id, "example id from the configured example set");
  attack->add_option("--instruction", instruction, "ad hoc instruction text (instead of --example)");
  attack->add_option("--data", data, "ad hoc data text");
  attack->add_option("--payload", payload, "payload text");
  attack->add_option("--target", target, "target output");
  attack->add_option("--algorithm", algorithm_name, "gcg, unguided or astra")->check(CLI::IsMember({"gcg", "unguided", "astra"}));
  attack->add_option("--prefix", prefix, "prefix slots (default: first configured budget)");
  attack->add_option("--suffix", suffix, "suffix slots (default: first configured budget)");
  attack->add_option("--run", run, "run index (selects the derived seeds)");

  auto* compare = app.add_subcommand("compare", "guided vs unguided D_r study");
  add_common(compare, common);
  auto* scale = app.add_subcommand("scale", "attack budget sweep");
  add_common(scale, common);
  auto* ablate = app.add_subcommand("ablate", "head weighting ablation for the two-phase attack");
  add_common(ablate, common);

  auto* forward_cmd = app.add_subcommand("forward", "print next-token log-probabilities for a token list");
  std::string forward_weights, forward_tokens;
  forward_cmd->add_option("--weights", forward_weights, "weight file")->required();
  forward_cmd->add_option("--tokens", forward_tokens, "comma separated token ids")->required();

  auto* report = app.add_subcommand("report", "summarize a results directory into plot data");
  std::string report_dir, report_out;
  report->add_option("results", report_dir, "results directory")->required();
  report->add_option("-o,--out", report_out, "where to write summary.csv and curves.csv (default: results dir)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*forward_cmd) {
      const auto weights = load_weights(forward_weights);
      TokenSequence tokens;
      std::string list = forward_tokens;
      std::replace(list.begin(), list.end(), ',', ' ');
      tokens = tokens_from_string(list);
      const auto trace = forward(weights, tokens);
      for (Eigen::Index v = 0; v < trace.next_token_logprobs.size(); ++v)
        std::printf("%.17g\n", trace.next_token_logprobs[v]);
      return 0;
    }

    if (*report) {
      const auto rep = build_report(report_dir);
      const std::filesystem::path out = report_out.empty() ? report_dir : report_out;
      write_text_file(out / "summary.csv", rep.summary_csv);
      write_text_file(out / "curves.csv", rep.curves_csv);
      std::cout << rep.summary_csv;
      return 0;
    }

    const auto spec = resolve(common);

    if (*config_cmd) {
      std::cout << to_json(spec).dump(2) << "\n";
      return 0;
    }

    if (*init) {
      const auto vocab = Vocabulary::builtin();
      auto cfg = spec.model;
      cfg.vocab_size = vocab.size();
      for (const auto& f : {init_weights, init_vocab, init_examples})
        if (auto parent = std::filesystem::path(f).parent_path(); !parent.empty())
          std::filesystem::create_directories(parent);
      const auto weights = init_random(cfg);
      save_weights(weights, init_weights);
      vocab.save(init_vocab);
      save_examples(builtin_examples(), init_examples);
      std::printf("wrote %s (%zu parameters), %s (%zu entries), %s\n", init_weights.c_str(), parameter_count(weights),
                  init_vocab.c_str(), vocab.size(), init_examples.c_str());
      return 0;
    }

    // A single attack may name any example, not only the sampled ones.
    auto lab_spec = spec;
    if (*attack) lab_spec.sample_size = 0;
    const auto lab = load_lab(lab_spec);

    if (*profile) {
      const auto p = profile_sensitivity(lab, spec);
      std::printf("profile written to %s (corpus %zu sequences, hash %s)\n", spec.profile_dir.c_str(),
                  p.sensitivity.dataset_size, p.metadata["corpus_hash"].get<std::string>().c_str());
      std::printf("sensitivity (layers x heads):\n%s", format_matrix_csv(p.sensitivity.values).c_str());
      std::printf("clipped at %.2f:\n%s", spec.drop_fraction, format_matrix_csv(p.clipped.values).c_str());
      return 0;
    }

    if (*attack) {
      InjectionExample example;
      if (!example_id.empty()) {
        auto it = std::find_if(lab.examples.begin(), lab.examples.end(),
                               [&](const auto& e) { return e.id == example_id; });
        if (it == lab.examples.end()) throw ConfigError("no example with id '" + example_id + "'");
        example = *it;
      } else if (!instruction.empty()) {
        example = {"adhoc", instruction, data};
      } else {
        example = lab.examples.front();
      }
      if (payload) example.payload = *payload;
      if (target) example.target = *target;
      BudgetConfig budget = spec.budgets.front();
      if (prefix) budget.prefix_tokens = *prefix;
      if (suffix) budget.suffix_tokens = *suffix;
      const auto algorithm = parse_algorithm(algorithm_name);
      std::optional<HeadWeighting> weighting;
      if (algorithm == Algorithm::astra) weighting = spec_weighting(lab, spec);
      auto a = run_attack(lab, spec, example, budget, algorithm, run, weighting ? &*weighting : nullptr,
                          algorithm == Algorithm::astra ? std::string(to_string(spec.weighting)) : "-");
      const auto text = generate_text(lab.weights, lab.vocab, a.record.final_tokens, example.target.size());
      std::printf("initial target logprobs %.6f\n", a.phases.front().initial_target_logprobs());
      print_records({&a.record, 1});
      std::printf("greedy continuation: \"%s\"\n", Vocabulary::escape(text).c_str());
      const auto trace = a.named_trace();
      auto meta = lab_metadata(lab, spec);
      meta["protocol"] = "attack";
      emit_results({a.record}, {&trace, 1}, to_json(spec), meta, spec.output_dir);
      return 0;
    }

    if (*compare) {
      const auto rep = run_comparison(lab, spec);
      write_comparison(rep, lab, spec);
      for (const auto& [id, d] : rep.d_r) std::printf("%-10s D_r = %+.6f\n", id.c_str(), d);
      std::printf("mean D_r %+.6f (standard error %.6f) over %zu examples\n", rep.mean, rep.standard_error,
                  rep.d_r.size());
      return 0;
    }

    if (*scale) {
      const auto rep = run_scaling(lab, spec);
      write_scaling(rep, lab, spec);
      std::cout << format_scaling_csv(rep.rows);
      for (const auto& e : rep.errors) std::fprintf(stderr, "failed: %s\n", e.c_str());
      return 0;
    }

    if (*ablate) {
      const auto rep = run_ablation(lab, spec);
      write_ablation(rep, lab, spec);
      for (std::size_t i = 0; i < rep.names.size(); ++i)
        std::printf("%-20s final mean target logprobs %.6f\n", rep.names[i].c_str(), rep.curves[i].back());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
