#pragma once

// Fixed vocabulary with greedy longest-match tokenization.
//
// Mutating a token sequence one id at a time can produce sequences that no
// tokenizer would emit for their own text (e.g. ["a","b"] when "ab" is a
// token). `canonicalize` maps such sequences back to the tokenization the
// text actually receives, so a prompt sent as text behaves like the ids that
// were scored.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gcq/errors.hpp"
#include "gcq/rng.hpp"

namespace gcq {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

class Vocabulary {
 public:
  Vocabulary() = default;

  /// Token ids are the positions in `surfaces`.
  explicit Vocabulary(std::vector<std::string> surfaces) : surfaces_(std::move(surfaces)) {
    std::set<char> alphabet;
    for (std::size_t id = 0; id < surfaces_.size(); ++id) {
      const auto& s = surfaces_[id];
      if (s.empty()) throw ConfigError("token " + std::to_string(id) + " has an empty surface");
      if (!index_.emplace(s, static_cast<TokenId>(id)).second)
        throw ConfigError("duplicate surface '" + s + "'");
      max_len_ = std::max(max_len_, s.size());
      alphabet.insert(s.begin(), s.end());
    }
    for (char c : alphabet) {
      if (!index_.count(std::string(1, c)))
        throw ConfigError(std::string("character '") + c + "' has no single-character token");
    }
  }

  std::size_t size() const noexcept { return surfaces_.size(); }
  const std::string& surface(TokenId id) const {
    if (id >= surfaces_.size())
      throw TokenRangeError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                            std::to_string(surfaces_.size()));
    return surfaces_[id];
  }
  bool contains(TokenId id) const noexcept { return id < surfaces_.size(); }

  TokenSeq tokenize(std::string_view text) const {
    TokenSeq out;
    std::size_t pos = 0;
    std::string probe;
    while (pos < text.size()) {
      const std::size_t longest = std::min(max_len_, text.size() - pos);
      bool matched = false;
      for (std::size_t len = longest; len >= 1; --len) {
        probe.assign(text.substr(pos, len));
        auto it = index_.find(probe);
        if (it != index_.end()) {
          out.push_back(it->second);
          pos += len;
          matched = true;
          break;
        }
      }
      if (!matched) throw TokenizeError(pos, text[pos]);
    }
    return out;
  }

  std::string detokenize(const TokenSeq& seq) const {
    std::string out;
    for (TokenId id : seq) out += surface(id);
    return out;
  }

  TokenSeq canonicalize(const TokenSeq& seq) const { return tokenize(detokenize(seq)); }

  bool is_canonical(const TokenSeq& seq) const { return canonicalize(seq) == seq; }

  /// One line per token: `<id>\t<surface>`.
  void save(std::ostream& os) const {
    for (std::size_t id = 0; id < surfaces_.size(); ++id) os << id << '\t' << surfaces_[id] << '\n';
  }

  static Vocabulary load(std::istream& is) {
    std::vector<std::pair<std::size_t, std::string>> rows;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw ConfigError("vocabulary line without tab: " + line);
      std::size_t id = 0;
      try {
        id = std::stoul(line.substr(0, tab));
      } catch (const std::exception&) {
        throw ConfigError("bad token id in vocabulary line: " + line);
      }
      rows.emplace_back(id, line.substr(tab + 1));
    }
    std::sort(rows.begin(), rows.end());
    std::vector<std::string> surfaces;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].first != i) throw ConfigError("vocabulary ids are not dense 0..n-1");
      surfaces.push_back(std::move(rows[i].second));
    }
    return Vocabulary(std::move(surfaces));
  }

  const std::vector<std::string>& surfaces() const noexcept { return surfaces_; }

 private:
  std::vector<std::string> surfaces_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_len_ = 0;
};

/// Single characters first, then `pairs` distinct two-character tokens drawn
/// from them. Pairs overlap the singles by construction, so random id
/// sequences are frequently non-canonical.
inline Vocabulary make_vocabulary(std::size_t singles, std::size_t pairs, std::uint64_t seed) {
  static constexpr std::string_view kAlphabet =
      "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
  if (singles == 0 || singles > kAlphabet.size())
    throw ConfigError("single-character token count must be in 1.." +
                      std::to_string(kAlphabet.size()));
  if (pairs > singles * singles) throw ConfigError("too many pair tokens requested");
  std::vector<std::string> surfaces;
  for (std::size_t i = 0; i < singles; ++i) surfaces.emplace_back(1, kAlphabet[i]);
  Rng rng(seed);
  std::set<std::string> seen;
  while (seen.size() < pairs) {
    std::string s{kAlphabet[uniform_index(rng, singles)], kAlphabet[uniform_index(rng, singles)]};
    if (seen.insert(s).second) surfaces.push_back(s);
  }
  return Vocabulary(std::move(surfaces));
}

/// The 64-token default: 48 single characters plus 16 overlapping pairs.
inline Vocabulary make_default_vocabulary(std::uint64_t seed = 7) {
  return make_vocabulary(48, 16, seed);
}

inline std::string format_seq(const TokenSeq& seq) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < seq.size(); ++i) os << (i ? "," : "") << seq[i];
  os << ']';
  return os.str();
}

}  // namespace gcq
