#pragma once

// Turns a results directory into plot-ready tables: success rate and mean
// best TargetLogprobs per (budget, algorithm, variant), and the per-iteration
// TargetLogprobs curve averaged over each group's traces.

#include "attnlab/harness/results.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <tuple>
#include <vector>

namespace attnlab::harness {

struct ReportGroup {
  BudgetConfig budget;
  Algorithm algorithm = Algorithm::gcg;
  std::string variant;
  std::size_t runs = 0;
  std::size_t successes = 0;
  double sum_best = 0.0;
  std::vector<double> curve_sum;
  std::size_t curves = 0;

  std::string label() const {
    std::string s = std::string(to_string(algorithm));
    if (variant != "-") s += ":" + variant;
    return s + "@" + std::to_string(budget.prefix_tokens) + "+" + std::to_string(budget.suffix_tokens);
  }
};

struct Report {
  std::vector<ReportGroup> groups;
  std::string summary_csv;
  std::string curves_csv;
};

// Reads iteration,phase,loss,target_logprobs rows and returns the last column.
inline std::vector<double> trace_target_logprobs(std::string_view csv) {
  const auto rows = parse_csv(csv);
  if (rows.empty() || rows[0].size() != 4 || rows[0][3] != "target_logprobs")
    throw FormatError("trace csv: unexpected header");
  std::vector<double> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != 4) throw FormatError("trace csv: row " + std::to_string(i) + " has wrong width");
    out.push_back(detail::parse_number<double>(rows[i][3], "target_logprobs"));
  }
  return out;
}

inline Report build_report(const std::filesystem::path& results_dir) {
  const auto records = parse_results_csv(read_text_file(results_dir / "results.csv"));
  std::map<std::tuple<BudgetConfig, Algorithm, std::string>, ReportGroup> groups;
  for (const auto& r : records) {
    auto& g = groups[{r.budget, r.algorithm, r.variant}];
    g.budget = r.budget;
    g.algorithm = r.algorithm;
    g.variant = r.variant;
    ++g.runs;
    g.successes += r.success ? 1 : 0;
    g.sum_best += r.best_target_logprobs;
    const auto trace_path = results_dir / "traces" / (trace_file_stem(r) + ".csv");
    if (!std::filesystem::exists(trace_path)) continue;
    const auto curve = trace_target_logprobs(read_text_file(trace_path));
    if (g.curves == 0) g.curve_sum.assign(curve.size(), 0.0);
    if (curve.size() != g.curve_sum.size())
      throw Error("report: trace " + trace_path.string() + " has " + std::to_string(curve.size()) +
                  " points, expected " + std::to_string(g.curve_sum.size()));
    for (std::size_t i = 0; i < curve.size(); ++i) g.curve_sum[i] += curve[i];
    ++g.curves;
  }

  Report rep;
  rep.summary_csv = "prefix_tokens,suffix_tokens,algorithm,variant,runs,successes,asr,mean_best_target_logprobs\n";
  std::vector<std::string> names;
  std::vector<std::vector<double>> columns;
  for (auto& [key, g] : groups) {
    rep.summary_csv += std::to_string(g.budget.prefix_tokens) + "," + std::to_string(g.budget.suffix_tokens) + "," +
                       std::string(to_string(g.algorithm)) + "," + csv_field(g.variant) + "," +
                       std::to_string(g.runs) + "," + std::to_string(g.successes) + "," +
                       format_double(static_cast<double>(g.successes) / static_cast<double>(g.runs)) + "," +
                       format_double(g.sum_best / static_cast<double>(g.runs)) + "\n";
    if (g.curves) {
      std::vector<double> mean = g.curve_sum;
      for (auto& v : mean) v /= static_cast<double>(g.curves);
      names.push_back(g.label());
      columns.push_back(std::move(mean));
    }
    rep.groups.push_back(g);
  }
  rep.curves_csv = format_curves_csv(names, columns);
  return rep;
}

}  // namespace attnlab::harness
