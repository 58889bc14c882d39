#pragma once

// Deterministic interpolated n-gram scorer used both as the black-box target
// (behind the mock API) and as the local proxy.
//
//   logit(t | ctx) = log(lambda*C(ctx,t) + (1-lambda)*C(t) + alpha)
//                    + beta*[t continues an earlier occurrence of the context suffix]
//                    + bias(t)
//
// The repetition term looks for the longest context suffix (up to
// `repeat_window` tokens) that also occurs earlier in the context and boosts
// the token that followed that earlier occurrence (most recent on ties).
// Periodic contexts are a special case: for [x,y,x,y] the suffix [x,y] recurs
// at the start and is followed by x.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "gcq/errors.hpp"
#include "gcq/rng.hpp"
#include "gcq/vocab.hpp"

namespace gcq {

using LogitVector = std::vector<double>;
using BiasMap = std::map<TokenId, double>;

struct ToyLmConfig {
  std::uint64_t seed = 1;
  std::size_t vocab_size = 64;
  std::size_t order = 2;
  double lambda = 0.95;
  double alpha = 1.0;
  double beta = 0.0;
  std::size_t repeat_window = 10;
  std::size_t corpus_tokens = 100000;
  std::size_t hidden_states = 32;
  // Fraction of the corpus drawn from the `seed` chain; the rest comes from
  // the `alt_seed` chain. Proxies use overlap < 1 to mismatch the target.
  double overlap = 1.0;
  std::uint64_t alt_seed = 0;

  void save(std::ostream& os) const {
    os << std::setprecision(17);
    os << "seed=" << seed << '\n'
       << "n=" << vocab_size << '\n'
       << "order=" << order << '\n'
       << "lambda=" << lambda << '\n'
       << "alpha=" << alpha << '\n'
       << "beta=" << beta << '\n'
       << "repeat_window=" << repeat_window << '\n'
       << "corpus_tokens=" << corpus_tokens << '\n'
       << "hidden_states=" << hidden_states << '\n'
       << "overlap=" << overlap << '\n'
       << "alt_seed=" << alt_seed << '\n';
  }

  /// Parses `key=value` lines; unknown keys are rejected, missing keys keep defaults.
  static ToyLmConfig load(std::istream& is) {
    ToyLmConfig c;
    std::string line;
    while (std::getline(is, line)) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        if (line.find_first_not_of(" \t\r") != std::string::npos)
          throw ConfigError("model config line without '=': " + line);
        continue;
      }
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
      };
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      try {
        if (key == "seed") c.seed = std::stoull(value);
        else if (key == "n") c.vocab_size = std::stoul(value);
        else if (key == "order") c.order = std::stoul(value);
        else if (key == "lambda") c.lambda = std::stod(value);
        else if (key == "alpha") c.alpha = std::stod(value);
        else if (key == "beta") c.beta = std::stod(value);
        else if (key == "repeat_window") c.repeat_window = std::stoul(value);
        else if (key == "corpus_tokens") c.corpus_tokens = std::stoul(value);
        else if (key == "hidden_states") c.hidden_states = std::stoul(value);
        else if (key == "overlap") c.overlap = std::stod(value);
        else if (key == "alt_seed") c.alt_seed = std::stoull(value);
        else throw ConfigError("unknown model config key: " + key);
      } catch (const std::invalid_argument&) {
        throw ConfigError("bad value for model config key " + key + ": " + value);
      }
    }
    return c;
  }
};

/// Numerically stable log-softmax; sums in index order.
inline std::vector<double> log_softmax(const LogitVector& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

/// Index of the maximum entry, lowest index on ties.
inline TokenId argmax_token(const LogitVector& logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<TokenId>(best);
}

class ToyLM {
 public:
  using CountTable = std::map<TokenSeq, std::vector<double>>;

  /// Builds count tables from the synthetic hidden-Markov corpus.
  static ToyLM build(const ToyLmConfig& config) {
    validate(config);
    ToyLM lm(config);
    const std::size_t n = config.vocab_size;
    const std::size_t from_main =
        static_cast<std::size_t>(std::llround(config.overlap * static_cast<double>(config.corpus_tokens)));
    TokenSeq corpus;
    corpus.reserve(config.corpus_tokens);
    sample_chain(config, config.seed, from_main, corpus);
    sample_chain(config, config.alt_seed, config.corpus_tokens - from_main, corpus);

    lm.unigram_.assign(n, 0.0);
    std::unordered_map<std::uint64_t, std::vector<double>> ctx_counts;
    const std::size_t k = config.order - 1;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      lm.unigram_[corpus[i]] += 1.0;
      if (k == 0) continue;
      if (i < k) continue;
      auto& row = ctx_counts[lm.encode(corpus.data() + i - k, k)];
      if (row.empty()) row.assign(n, 0.0);
      row[corpus[i]] += 1.0;
    }
    lm.finalize(ctx_counts);
    return lm;
  }

  /// Builds from explicit counts, for hand-constructed instances. Each key of
  /// `contextual` must have exactly order-1 tokens.
  static ToyLM from_counts(ToyLmConfig config, const CountTable& contextual,
                           std::vector<double> unigram) {
    if (unigram.size() != config.vocab_size) throw ConfigError("unigram table size mismatch");
    config.corpus_tokens = 0;
    validate(config);
    ToyLM lm(config);
    lm.unigram_ = std::move(unigram);
    std::unordered_map<std::uint64_t, std::vector<double>> ctx_counts;
    for (const auto& [ctx, row] : contextual) {
      if (ctx.size() != config.order - 1) throw ConfigError("context length must be order-1");
      if (row.size() != config.vocab_size) throw ConfigError("count row size mismatch");
      for (TokenId t : ctx)
        if (t >= config.vocab_size) throw TokenRangeError("context token out of range");
      ctx_counts[lm.encode(ctx.data(), ctx.size())] = row;
    }
    lm.finalize(ctx_counts);
    return lm;
  }

  const ToyLmConfig& config() const noexcept { return config_; }
  std::size_t vocab_size() const noexcept { return config_.vocab_size; }

  /// Token whose logit receives the repetition bonus, if any.
  std::optional<TokenId> repetition_token(const TokenSeq& context) const {
    const std::size_t len = context.size();
    const std::size_t window = config_.repeat_window;
    std::size_t best_k = 0;
    std::size_t best_j = 0;
    for (std::size_t j = len; j-- > 1;) {
      const std::size_t cap = std::min(window, j);
      std::size_t k = 0;
      while (k < cap && context[j - 1 - k] == context[len - 1 - k]) ++k;
      if (k > best_k) {
        best_k = k;
        best_j = j;
        if (k == window) break;
      }
    }
    if (best_k == 0) return std::nullopt;
    return context[best_j];
  }

  LogitVector next_logits(const TokenSeq& context, const BiasMap* bias = nullptr) const {
    for (TokenId t : context)
      if (t >= config_.vocab_size) throw TokenRangeError("context token " + std::to_string(t) + " out of range");
    LogitVector logits = base_row(context);
    if (config_.beta != 0.0) {
      if (auto rep = repetition_token(context)) logits[*rep] += config_.beta;
    }
    if (bias) {
      for (const auto& [t, b] : *bias) {
        if (t >= config_.vocab_size) throw TokenRangeError("bias token out of range");
        logits[t] += b;
      }
    }
    return logits;
  }

  double conditional_logprob(const TokenSeq& context, TokenId token) const {
    if (token >= config_.vocab_size) throw TokenRangeError("token out of range");
    const LogitVector logits = next_logits(context);
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    return logits[token] - (mx + std::log(sum));
  }

  /// Sum of log p(target_i | prompt ++ target_<i).
  double cumulative_logprob(const TokenSeq& prompt, const TokenSeq& target) const {
    TokenSeq ctx = prompt;
    ctx.reserve(prompt.size() + target.size());
    double total = 0.0;
    for (TokenId t : target) {
      total += conditional_logprob(ctx, t);
      ctx.push_back(t);
    }
    return total;
  }

  TokenSeq greedy_generate(const TokenSeq& prompt, std::size_t n_tokens, const BiasMap* bias = nullptr) const {
    TokenSeq ctx = prompt;
    TokenSeq out;
    out.reserve(n_tokens);
    for (std::size_t i = 0; i < n_tokens; ++i) {
      const TokenId next = argmax_token(next_logits(ctx, bias));
      out.push_back(next);
      ctx.push_back(next);
    }
    return out;
  }

 private:
  explicit ToyLM(ToyLmConfig config) : config_(std::move(config)) {}

  static void validate(const ToyLmConfig& c) {
    if (c.vocab_size < 2) throw ConfigError("vocabulary size must be at least 2");
    if (c.order < 1) throw ConfigError("order must be at least 1");
    if (c.lambda < 0.0 || c.lambda > 1.0) throw ConfigError("lambda must lie in [0,1]");
    if (!(c.alpha > 0.0)) throw ConfigError("alpha must be positive");
    if (c.beta < 0.0) throw ConfigError("beta must be non-negative");
    if (c.overlap < 0.0 || c.overlap > 1.0) throw ConfigError("overlap must lie in [0,1]");
    if (c.hidden_states < 1) throw ConfigError("hidden_states must be positive");
    double span = 1.0;
    for (std::size_t i = 1; i < c.order; ++i) span *= static_cast<double>(c.vocab_size);
    if (span > 1e18) throw ConfigError("order too large for this vocabulary");
  }

  std::uint64_t encode(const TokenId* ctx, std::size_t k) const {
    std::uint64_t key = 0;
    for (std::size_t i = 0; i < k; ++i) key = key * config_.vocab_size + ctx[i];
    return key;
  }

  void finalize(const std::unordered_map<std::uint64_t, std::vector<double>>& ctx_counts) {
    const std::size_t n = config_.vocab_size;
    const double lam = config_.lambda;
    default_row_.resize(n);
    for (std::size_t t = 0; t < n; ++t)
      default_row_[t] = std::log((1.0 - lam) * unigram_[t] + config_.alpha);
    for (const auto& [key, counts] : ctx_counts) {
      LogitVector row(n);
      for (std::size_t t = 0; t < n; ++t)
        row[t] = std::log(lam * counts[t] + (1.0 - lam) * unigram_[t] + config_.alpha);
      rows_.emplace(key, std::move(row));
    }
    if (config_.order == 1) {
      LogitVector row(n);
      for (std::size_t t = 0; t < n; ++t)
        row[t] = std::log(lam * unigram_[t] + (1.0 - lam) * unigram_[t] + config_.alpha);
      rows_.emplace(0, std::move(row));
    }
  }

  const LogitVector& base_row(const TokenSeq& context) const {
    const std::size_t k = config_.order - 1;
    if (k == 0) return rows_.at(0);
    if (context.size() < k) return default_row_;
    auto it = rows_.find(encode(context.data() + context.size() - k, k));
    return it == rows_.end() ? default_row_ : it->second;
  }

  // Hidden-Markov corpus sampler. Each state favors a handful of tokens and
  // usually moves to one preferred successor, so the previous token carries
  // real information about the next one.
  static void sample_chain(const ToyLmConfig& c, std::uint64_t seed, std::size_t count, TokenSeq& out) {
    if (count == 0) return;
    const std::size_t n = c.vocab_size;
    const std::size_t h = c.hidden_states;
    Rng param_rng(mix_seed(seed, 0));
    std::vector<std::vector<double>> emit_cdf(h), trans_cdf(h);
    for (std::size_t s = 0; s < h; ++s) {
      std::vector<double> w(n, 0.005);
      double weight = 1.0;
      for (std::size_t r = 0; r < std::min<std::size_t>(4, n); ++r) {
        w[uniform_index(param_rng, n)] += weight;
        weight *= 0.5;
      }
      emit_cdf[s] = to_cdf(w);
      std::vector<double> tw(h, 0.15 / static_cast<double>(h));
      tw[uniform_index(param_rng, h)] += 0.6;
      tw[uniform_index(param_rng, h)] += 0.25;
      trans_cdf[s] = to_cdf(tw);
    }
    Rng rng(mix_seed(seed, 1));
    std::size_t state = uniform_index(rng, h);
    for (std::size_t i = 0; i < count; ++i) {
      out.push_back(static_cast<TokenId>(draw(emit_cdf[state], rng)));
      state = draw(trans_cdf[state], rng);
    }
  }

  static std::vector<double> to_cdf(const std::vector<double>& w) {
    std::vector<double> cdf(w.size());
    double total = 0.0;
    for (double x : w) total += x;
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      acc += w[i] / total;
      cdf[i] = acc;
    }
    cdf.back() = 1.0;
    return cdf;
  }

  static std::size_t draw(const std::vector<double>& cdf, Rng& rng) {
    const double u = uniform_unit(rng);
    return static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
  }

  ToyLmConfig config_;
  std::vector<double> unigram_;
  LogitVector default_row_;
  std::unordered_map<std::uint64_t, LogitVector> rows_;
};

}  // namespace gcq
