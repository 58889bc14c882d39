#include <gtest/gtest.h>

#include <functional>
#include <sstream>

#include "gcq/vocab.hpp"

using namespace gcq;

namespace {

Vocabulary abc() { return Vocabulary({"a", "b", "ab"}); }

// All segmentations of `text` into vocabulary surfaces, as token-length
// vectors; the reference picks the lexicographically largest one.
TokenSeq leftmost_longest(const Vocabulary& v, const std::string& text) {
  std::vector<TokenSeq> all;
  TokenSeq cur;
  std::function<void(std::size_t)> rec = [&](std::size_t pos) {
    if (pos == text.size()) {
      all.push_back(cur);
      return;
    }
    for (TokenId id = 0; id < v.size(); ++id) {
      const auto& s = v.surface(id);
      if (text.compare(pos, s.size(), s) == 0) {
        cur.push_back(id);
        rec(pos + s.size());
        cur.pop_back();
      }
    }
  };
  rec(0);
  auto lengths = [&](const TokenSeq& seg) {
    std::vector<std::size_t> l;
    for (auto id : seg) l.push_back(v.surface(id).size());
    return l;
  };
  return *std::max_element(all.begin(), all.end(),
                           [&](const TokenSeq& a, const TokenSeq& b) { return lengths(a) < lengths(b); });
}

}  // namespace

TEST(Tokenize, EmptyText) { EXPECT_TRUE(abc().tokenize("").empty()); }

TEST(Tokenize, LongestMatchWins) {
  EXPECT_EQ(abc().tokenize("ab"), (TokenSeq{2}));
  EXPECT_EQ(abc().tokenize("aba"), (TokenSeq{2, 0}));
}

TEST(Tokenize, AgreesWithSegmentationEnumeration) {
  const auto v = make_vocabulary(6, 10, 3);
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    std::string text;
    const std::size_t len = uniform_index(rng, 9);
    for (std::size_t i = 0; i < len; ++i) text += v.surface(static_cast<TokenId>(uniform_index(rng, 6)));
    EXPECT_EQ(v.tokenize(text), leftmost_longest(v, text)) << text;
  }
}

TEST(Tokenize, UnknownCharacterReportsPosition) {
  try {
    abc().tokenize("abzb");
    FAIL() << "expected TokenizeError";
  } catch (const TokenizeError& e) {
    EXPECT_EQ(e.position(), 2u);
  }
}

TEST(Detokenize, Concatenates) {
  const auto v = abc();
  EXPECT_EQ(v.detokenize({}), "");
  EXPECT_EQ(v.detokenize({2, 0}), "aba");
  EXPECT_EQ(v.detokenize({0, 1}), "ab");
  EXPECT_THROW(v.detokenize({3}), TokenRangeError);
}

TEST(Canonicalize, Examples) {
  const auto v = abc();
  EXPECT_EQ(v.canonicalize({0, 1}), (TokenSeq{2}));
  EXPECT_EQ(v.canonicalize({2, 0}), (TokenSeq{2, 0}));
  EXPECT_FALSE(v.is_canonical({0, 1}));
  EXPECT_TRUE(v.is_canonical({2, 0}));
}

TEST(Canonicalize, IdempotentAndTextPreserving) {
  const auto v = make_default_vocabulary();
  Rng rng(11);
  std::size_t changed = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    TokenSeq s(20);
    for (auto& t : s) t = static_cast<TokenId>(uniform_index(rng, v.size()));
    const auto c = v.canonicalize(s);
    EXPECT_EQ(v.canonicalize(c), c);
    EXPECT_EQ(v.detokenize(c), v.detokenize(s));
    changed += c != s ? 1 : 0;
  }
  // overlapping surfaces must make raw mutations non-canonical fairly often
  EXPECT_GT(changed, 100u);
}

TEST(Vocabulary, RoundTripText) {
  const auto v = make_default_vocabulary();
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::string text;
    for (std::size_t i = 0; i < 30; ++i) text += v.surface(static_cast<TokenId>(uniform_index(rng, 48)));
    EXPECT_EQ(v.detokenize(v.tokenize(text)), text);
    EXPECT_TRUE(v.is_canonical(v.tokenize(text)));
  }
}

TEST(Vocabulary, DefaultShape) {
  const auto v = make_default_vocabulary();
  EXPECT_EQ(v.size(), 64u);
  std::size_t pairs = 0;
  for (const auto& s : v.surfaces()) pairs += s.size() == 2 ? 1 : 0;
  EXPECT_EQ(pairs, 16u);
  EXPECT_EQ(make_default_vocabulary().surfaces(), v.surfaces());
}

TEST(Vocabulary, RejectsBadTables) {
  EXPECT_THROW(Vocabulary({"a", "a"}), ConfigError);
  EXPECT_THROW(Vocabulary({"a", ""}), ConfigError);
  EXPECT_THROW(Vocabulary({"a", "ab"}), ConfigError);  // 'b' has no single token
}

TEST(Vocabulary, SaveLoad) {
  const auto v = make_default_vocabulary(9);
  std::stringstream ss;
  v.save(ss);
  EXPECT_EQ(ss.str().substr(0, 4), "0\ta\n");
  const auto back = Vocabulary::load(ss);
  EXPECT_EQ(back.surfaces(), v.surfaces());

  std::stringstream gap("0\ta\n2\tb\n");
  EXPECT_THROW(Vocabulary::load(gap), ConfigError);
}
