#pragma once

// Byte-sequence vocabulary. File format: one entry per line, token id = line
// number (0-based). Entries use backslash escapes \\ \n \t \r and \xHH. The
// delimiter literals [INST] [/INST] [DATA] [/DATA] are reserved: they are only
// ever emitted by prompt assembly, never produced by encode().

#include "attnlab/tinyformer.hpp"

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace attnlab::harness {

inline constexpr std::array<std::string_view, 4> kDelimiters{"[INST]", "[/INST]", "[DATA]", "[/DATA]"};

class Vocabulary {
 public:
  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> entries) : entries_(std::move(entries)) {
    for (std::size_t id = 0; id < entries_.size(); ++id) {
      const auto& e = entries_[id];
      if (e.empty()) throw FormatError("vocabulary: empty entry at line " + std::to_string(id + 1));
      if (!index_.emplace(e, static_cast<TokenId>(id)).second)
        throw FormatError("vocabulary: duplicate entry at line " + std::to_string(id + 1));
      if (is_delimiter(e)) {
        special_.push_back(static_cast<TokenId>(id));
      } else {
        longest_ = std::max(longest_, e.size());
      }
    }
    for (auto d : kDelimiters)
      if (!index_.contains(std::string(d)))
        throw FormatError("vocabulary: missing reserved delimiter " + std::string(d));
  }

  // 4 delimiters, printable ASCII, newline, and 28 frequent English bigrams: 128 entries.
  static Vocabulary builtin() {
    std::vector<std::string> e(kDelimiters.begin(), kDelimiters.end());
    for (char c = ' '; c <= '~'; ++c) e.emplace_back(1, c);
    e.emplace_back("\n");
    for (const char* bigram : {"th", "he", "in", "er", "an", "re", "on", "at", "en", "nd", "ti", "es", "or", "te",
                               "of", "ed", "is", "it", "al", "ar", "st", "to", "nt", "ng", "se", "ha", "as", "ou"})
      e.emplace_back(bigram);
    return Vocabulary(std::move(e));
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open vocabulary file " + path.string());
    std::vector<std::string> entries;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
      ++number;
      try {
        entries.push_back(unescape(line));
      } catch (const FormatError& err) {
        throw FormatError(path.string() + ":" + std::to_string(number) + ": " + err.what());
      }
    }
    return Vocabulary(std::move(entries));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    for (const auto& e : entries_) out << escape(e) << '\n';
    if (!out) throw Error("failed writing " + path.string());
  }

  std::size_t size() const { return entries_.size(); }
  const std::string& entry(TokenId id) const { return entries_.at(id); }
  const std::vector<TokenId>& special_tokens() const { return special_; }

  TokenId id_of(std::string_view entry) const {
    auto it = index_.find(std::string(entry));
    if (it == index_.end()) throw RangeError("vocabulary has no entry '" + std::string(entry) + "'");
    return it->second;
  }

  bool is_special(TokenId id) const { return std::find(special_.begin(), special_.end(), id) != special_.end(); }

  // Greedy longest match over non-reserved entries.
  TokenSequence encode(std::string_view text) const {
    TokenSequence out;
    std::size_t pos = 0;
    while (pos < text.size()) {
      bool matched = false;
      for (std::size_t len = std::min(longest_, text.size() - pos); len > 0; --len) {
        auto it = index_.find(std::string(text.substr(pos, len)));
        if (it != index_.end() && !is_delimiter(it->first)) {
          out.push_back(it->second);
          pos += len;
          matched = true;
          break;
        }
      }
      if (!matched)
        throw FormatError("cannot tokenize byte 0x" + hex_byte(static_cast<unsigned char>(text[pos])) +
                          " at offset " + std::to_string(pos));
    }
    return out;
  }

  std::string decode(std::span<const TokenId> tokens) const {
    std::string out;
    for (auto t : tokens) out += entry(t);
    return out;
  }

  static bool is_delimiter(std::string_view s) {
    return std::find(kDelimiters.begin(), kDelimiters.end(), s) != kDelimiters.end();
  }

  static std::string escape(std::string_view raw) {
    std::string out;
    for (unsigned char c : raw) {
      switch (c) {
        case '\\': out += "\\\\"; break;
        case '\n': out += "\\n"; break;
        case '\t': out += "\\t"; break;
        case '\r': out += "\\r"; break;
        default:
          if (c < 0x20 || c >= 0x7f) out += "\\x" + hex_byte(c);
          else out.push_back(static_cast<char>(c));
      }
    }
    return out;
  }

  static std::string unescape(std::string_view line) {
    std::string out;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] != '\\') {
        out.push_back(line[i]);
        continue;
      }
      if (++i >= line.size()) throw FormatError("dangling backslash");
      switch (line[i]) {
        case '\\': out.push_back('\\'); break;
        case 'n': out.push_back('\n'); break;
        case 't': out.push_back('\t'); break;
        case 'r': out.push_back('\r'); break;
        case 'x': {
          const auto hex = std::string(line.substr(i + 1, 2));
          if (hex.size() != 2 || hex.find_first_not_of("0123456789abcdefABCDEF") != std::string::npos)
            throw FormatError("bad \\x escape");
          out.push_back(static_cast<char>(std::stoi(hex, nullptr, 16)));
          i += 2;
          break;
        }
        default:
          throw FormatError(std::string("unknown escape \\") + line[i]);
      }
    }
    return out;
  }

 private:
  static std::string hex_byte(unsigned char c) {
    static constexpr char digits[] = "0123456789abcdef";
    return {digits[c >> 4], digits[c & 0xf]};
  }

  std::vector<std::string> entries_;
  std::map<std::string, TokenId> index_;
  std::vector<TokenId> special_;
  std::size_t longest_ = 1;
};

}  // namespace attnlab::harness
