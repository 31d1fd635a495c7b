#pragma once

// Result records, CSV emission/parsing and the run manifest.

#include "attnlab/harness/prompt.hpp"
#include "attnlab/optimizer.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

namespace attnlab::harness {

enum class Algorithm { gcg, unguided, astra };

inline std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::gcg: return "gcg";
    case Algorithm::unguided: return "unguided";
    case Algorithm::astra: return "astra";
  }
  return "gcg";
}

inline Algorithm parse_algorithm(std::string_view s) {
  if (s == "gcg") return Algorithm::gcg;
  if (s == "unguided") return Algorithm::unguided;
  if (s == "astra") return Algorithm::astra;
  throw ConfigError("unknown algorithm '" + std::string(s) + "' (expected gcg, unguided or astra)");
}

struct ResultRecord {
  std::string example_id;
  BudgetConfig budget;
  Algorithm algorithm = Algorithm::gcg;
  std::string variant = "-";  // weighting scheme for astra runs
  std::uint64_t seed = 0;
  bool success = false;
  double best_target_logprobs = 0.0;
  std::size_t iterations = 0;
  double wall_time_s = 0.0;
  TokenSequence final_tokens;

  bool operator==(const ResultRecord&) const = default;

  auto sort_key() const { return std::tie(example_id, budget, algorithm, variant, seed); }
};

inline void sort_records(std::vector<ResultRecord>& records) {
  std::stable_sort(records.begin(), records.end(),
                   [](const ResultRecord& a, const ResultRecord& b) { return a.sort_key() < b.sort_key(); });
}

// ---------------------------------------------------------------------------
// Minimal RFC 4180 style CSV.

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw FormatError("csv: unterminated quoted field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string tokens_to_string(std::span<const TokenId> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(tokens[i]);
  }
  return out;
}

inline TokenSequence tokens_from_string(std::string_view s) {
  TokenSequence out;
  std::istringstream in{std::string(s)};
  long long v = 0;
  while (in >> v) {
    if (v < 0) throw FormatError("negative token id in token list");
    out.push_back(static_cast<TokenId>(v));
  }
  if (!in.eof()) throw FormatError("bad token list '" + std::string(s) + "'");
  return out;
}

inline constexpr std::string_view kResultsHeader =
    "example_id,prefix_tokens,suffix_tokens,algorithm,variant,seed,success,best_target_logprobs,iterations,"
    "wall_time_s,final_tokens";

inline std::string format_results_csv(std::span<const ResultRecord> records) {
  std::string out(kResultsHeader);
  out += '\n';
  for (const auto& r : records) {
    out += csv_field(r.example_id) + ',' + std::to_string(r.budget.prefix_tokens) + ',' +
           std::to_string(r.budget.suffix_tokens) + ',' + std::string(to_string(r.algorithm)) + ',' +
           csv_field(r.variant) + ',' + std::to_string(r.seed) + ',' + (r.success ? "1" : "0") + ',' +
           format_double(r.best_target_logprobs) + ',' + std::to_string(r.iterations) + ',' +
           format_double(r.wall_time_s) + ',' + tokens_to_string(r.final_tokens) + '\n';
  }
  return out;
}

namespace detail {

template <typename T>
T parse_number(const std::string& s, const char* column) {
  if constexpr (std::is_floating_point_v<T>) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
  } else {
    T v{};
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec == std::errc{} && ptr == s.data() + s.size()) return v;
  }
  throw FormatError(std::string("results csv: bad value '") + s + "' in column " + column);
}

}  // namespace detail

inline std::vector<ResultRecord> parse_results_csv(std::string_view text) {
  auto rows = parse_csv(text);
  if (rows.empty()) throw FormatError("results csv: missing header");
  std::string header;
  for (std::size_t i = 0; i < rows[0].size(); ++i) header += (i ? "," : "") + rows[0][i];
  if (header != kResultsHeader) throw FormatError("results csv: unexpected header '" + header + "'");
  std::vector<ResultRecord> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& f = rows[i];
    if (f.size() != 11) throw FormatError("results csv: row " + std::to_string(i) + " has " + std::to_string(f.size()) + " fields");
    ResultRecord r;
    r.example_id = f[0];
    r.budget.prefix_tokens = detail::parse_number<std::size_t>(f[1], "prefix_tokens");
    r.budget.suffix_tokens = detail::parse_number<std::size_t>(f[2], "suffix_tokens");
    r.algorithm = parse_algorithm(f[3]);
    r.variant = f[4];
    r.seed = detail::parse_number<std::uint64_t>(f[5], "seed");
    if (f[6] != "0" && f[6] != "1") throw FormatError("results csv: bad success flag '" + f[6] + "'");
    r.success = f[6] == "1";
    r.best_target_logprobs = detail::parse_number<double>(f[7], "best_target_logprobs");
    r.iterations = detail::parse_number<std::size_t>(f[8], "iterations");
    r.wall_time_s = detail::parse_number<double>(f[9], "wall_time_s");
    r.final_tokens = tokens_from_string(f[10]);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Hash of the canonical (sorted-key) JSON dump of a configuration.
inline std::string config_hash(const nlohmann::json& config) { return hex64(fnv1a64(config.dump())); }

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw Error("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error("failed writing " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Columns of unequal length leave trailing cells blank.
inline std::string format_curves_csv(const std::vector<std::string>& names,
                                     const std::vector<std::vector<double>>& columns) {
  std::size_t rows = 0;
  for (const auto& c : columns) rows = std::max(rows, c.size());
  std::string out = "iteration";
  for (const auto& n : names) out += "," + csv_field(n);
  out += '\n';
  for (std::size_t i = 0; i < rows; ++i) {
    out += std::to_string(i);
    for (const auto& c : columns) out += "," + (i < c.size() ? format_double(c[i]) : std::string{});
    out += '\n';
  }
  return out;
}

struct NamedTrace {
  std::string name;  // file stem under traces/
  std::string csv;
};

inline std::string trace_file_stem(const ResultRecord& r) {
  std::string stem = r.example_id + "_p" + std::to_string(r.budget.prefix_tokens) + "s" +
                     std::to_string(r.budget.suffix_tokens) + "_" + std::string(to_string(r.algorithm));
  if (r.variant != "-") stem += "_" + r.variant;
  stem += "_" + std::to_string(r.seed);
  for (auto& c : stem)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-' && c != '.') c = '_';
  return stem;
}

// Writes results.csv (records sorted), traces/<name>.csv and manifest.json.
// The manifest carries the configuration, its hash and any extra metadata.
inline void emit_results(std::vector<ResultRecord> records, std::span<const NamedTrace> traces,
                         const nlohmann::json& config, const nlohmann::json& metadata,
                         const std::filesystem::path& directory) {
  sort_records(records);
  write_text_file(directory / "results.csv", format_results_csv(records));
  std::vector<std::string> trace_files;
  for (const auto& t : traces) {
    write_text_file(directory / "traces" / (t.name + ".csv"), t.csv);
    trace_files.push_back("traces/" + t.name + ".csv");
  }
  std::sort(trace_files.begin(), trace_files.end());
  nlohmann::json manifest = {{"config", config},
                             {"config_hash", config_hash(config)},
                             {"records", records.size()},
                             {"trace_files", trace_files},
                             {"metadata", metadata}};
  write_text_file(directory / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace attnlab::harness
