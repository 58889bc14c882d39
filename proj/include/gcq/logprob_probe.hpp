#pragma once

// Reconstructs conditional logprobs of arbitrary tokens through an endpoint
// that only reports the top-5 logprobs of sampled tokens.
//
// Biased top-k: add bias b to the token so it surfaces in the top-5, read its
// biased probability q, then invert the softmax shift:
//     p = q / (e^b (1 - q) + q).
// With b = -log p_hat and p_hat close to p, q lands near 1/2, far from both
// the top-5 cutoff and the saturation at 1.
//
// Unbiased top-k: the reported logprobs ignore the bias, so instead search for
// the smallest bias that makes the token the greedy sample; at that point
// logit(token) + b* = logit(top), hence logprob(token) = logprob(top) - b*.
//
// Scoring a target of t tokens after a p-token prompt issues one request per
// target token with the already-scored target prefix supplied as completion
// prefix, costing p*t prompt tokens and t(t+1)/2 completion tokens.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>

#include "gcq/api_wire.hpp"
#include "gcq/cost_ledger.hpp"
#include "gcq/errors.hpp"
#include "gcq/vocab.hpp"

namespace gcq {

/// Probability of a token after adding `bias` to its logit.
inline double bias_apply(double p, double bias) {
  const double scaled = p * std::exp(bias);
  return scaled / (scaled + (1.0 - p));
}

/// Inverse of bias_apply.
inline double unbias(double p_biased, double bias) {
  if (!(p_biased > 0.0 && p_biased < 1.0))
    throw DegenerateProbability("biased probability must lie strictly inside (0,1), got " +
                                std::to_string(p_biased));
  return p_biased / (std::exp(bias) * (1.0 - p_biased) + p_biased);
}

// Log-domain versions. A biased probability close to 1 keeps its complement
// to full precision only as a logprob (1 - q = -expm1(log q)), which is also
// the form the endpoint reports.

/// log of bias_apply(exp(logprob), bias).
inline double bias_apply_log(double logprob, double bias) {
  // q = 1 / (1 + (1-p) / (p e^b))
  const double log_rest = std::log(-std::expm1(logprob));
  return -std::log1p(std::exp(log_rest - logprob - bias));
}

/// log of unbias(exp(logprob_biased), bias).
inline double unbias_log(double logprob_biased, double bias) {
  if (!(logprob_biased < 0.0) || !std::isfinite(logprob_biased))
    throw DegenerateProbability("biased logprob must be finite and negative, got " +
                                std::to_string(logprob_biased));
  // p = q / (e^b (1-q) + q)
  const double rest = -std::expm1(logprob_biased);
  return logprob_biased - std::log(std::exp(bias) * rest + std::exp(logprob_biased));
}

enum class ProbeMethod { Direct, BiasedTop5, BinarySearch };

inline std::string to_string(ProbeMethod m) {
  switch (m) {
    case ProbeMethod::Direct: return "direct";
    case ProbeMethod::BiasedTop5: return "biased-top5";
    case ProbeMethod::BinarySearch: return "binary-search";
  }
  return "unknown";
}

struct LogprobEstimate {
  double value = 0.0;
  ProbeMethod method = ProbeMethod::Direct;
  std::size_t queries_used = 0;
};

struct CumulativeLogprob {
  double value = 0.0;
  bool short_circuited = false;
  std::size_t tokens_scored = 0;
  LedgerSnapshot cost;
};

struct ProbeOptions {
  ApiEra era = ApiEra::BiasedTopK;
  std::size_t vocab_size = 0;
  // Bisection stops once the bracket is this narrow.
  double search_tolerance = 1e-3;
  // Biased probabilities above 1 - guard are considered saturated.
  double saturation_guard = 1e-9;
  std::size_t max_cache_entries = 1'000'000;
};

struct ProbeStats {
  std::size_t probes = 0;
  std::size_t informed_probes = 0;     // started from an explicit or parent estimate
  std::size_t informed_first_hits = 0; // ... and succeeded with one request
  std::size_t fallbacks = 0;
};

class LogprobProbe {
 public:
  LogprobProbe(ApiClient& client, ProbeOptions options) : client_(&client), options_(options) {
    if (options_.vocab_size == 0) throw ConfigError("probe needs the vocabulary size");
  }

  ApiClient& client() noexcept { return *client_; }
  const ProbeStats& stats() const noexcept { return stats_; }
  ApiEra era() const noexcept { return options_.era; }

  /// log p(token | prompt ++ prefix). `estimate` is a guess of that logprob.
  LogprobEstimate infer_token_logprob(const TokenSeq& prompt, const TokenSeq& prefix, TokenId token,
                                      std::optional<double> estimate = std::nullopt) {
    const bool informed = estimate.has_value();
    const double guess = estimate.value_or(-std::log(static_cast<double>(options_.vocab_size)));
    LogprobEstimate r;
    switch (options_.era) {
      case ApiEra::PromptLogprobs: r = via_echo(prompt, prefix, token); break;
      case ApiEra::BiasedTopK: r = via_biased_top_k(prompt, prefix, token, guess); break;
      case ApiEra::UnbiasedTopK: r = via_greedy_flip(prompt, prefix, token, guess); break;
    }
    ++stats_.probes;
    if (r.queries_used > 1) ++stats_.fallbacks;
    if (informed) {
      ++stats_.informed_probes;
      if (r.queries_used == 1) ++stats_.informed_first_hits;
    }
    remember(prompt, prefix, token, r.value);
    return r;
  }

  /// Sum of log p(target_i | prompt ++ target_<i). With `stop_below`, returns
  /// as soon as the partial sum falls below it; the omitted terms are all
  /// non-positive, so the returned value is an upper bound on the full sum.
  /// `parent`, when given, supplies per-position estimates from an earlier
  /// scoring of that prompt against the same target.
  CumulativeLogprob cumulative_logprob(const TokenSeq& prompt, const TokenSeq& target,
                                       std::optional<double> stop_below = std::nullopt,
                                       const TokenSeq* parent = nullptr) {
    const LedgerSnapshot before = client_->ledger().snapshot();
    CumulativeLogprob out;
    if (target.empty()) return out;
    if (options_.era == ApiEra::PromptLogprobs) {
      TokenSeq full = prompt;
      full.insert(full.end(), target.begin(), target.end());
      CompletionRequest req;
      req.prompt = full;
      req.echo = true;
      const auto resp = client_->send(req);
      if (!resp.prompt_logprobs || resp.prompt_logprobs->size() != full.size())
        throw ProtocolError("malformed_response", "echo did not return prompt logprobs");
      for (std::size_t i = prompt.size(); i < full.size(); ++i) out.value += (*resp.prompt_logprobs)[i];
      out.tokens_scored = target.size();
      out.cost = client_->ledger().snapshot() - before;
      return out;
    }
    TokenSeq prefix;
    prefix.reserve(target.size());
    for (std::size_t i = 0; i < target.size(); ++i) {
      std::optional<double> estimate;
      if (parent) estimate = recall(*parent, prefix, target[i]);
      out.value += infer_token_logprob(prompt, prefix, target[i], estimate).value;
      out.tokens_scored = i + 1;
      prefix.push_back(target[i]);
      if (stop_below && out.value < *stop_below && i + 1 < target.size()) {
        out.short_circuited = true;
        break;
      }
    }
    out.cost = client_->ledger().snapshot() - before;
    return out;
  }

  std::optional<double> recall(const TokenSeq& prompt, const TokenSeq& prefix, TokenId token) const {
    auto it = cache_.find(key(prompt, prefix, token));
    if (it == cache_.end()) return std::nullopt;
    return it->second;
  }

 private:
  using Key = std::pair<std::uint64_t, std::uint64_t>;

  static std::uint64_t fnv(const TokenSeq& seq, std::uint64_t h = 1469598103934665603ULL) {
    for (TokenId t : seq) {
      h ^= t + 1;
      h *= 1099511628211ULL;
    }
    return h;
  }

  // (prompt hash, hash of the prefix length and the scored target tokens)
  static Key key(const TokenSeq& prompt, const TokenSeq& prefix, TokenId token) {
    std::uint64_t h = fnv(prefix, 0xcbf29ce484222325ULL ^ prefix.size());
    h ^= token + 0x9e3779b97f4a7c15ULL;
    h *= 1099511628211ULL;
    return {fnv(prompt), h};
  }

  void remember(const TokenSeq& prompt, const TokenSeq& prefix, TokenId token, double value) {
    if (cache_.size() >= options_.max_cache_entries) cache_.clear();
    cache_[key(prompt, prefix, token)] = value;
  }

  CompletionRequest probe_request(const TokenSeq& prompt, const TokenSeq& prefix, TokenId token, double bias) const {
    CompletionRequest req;
    req.prompt = prompt;
    req.completion_prefix = prefix;
    req.max_tokens = 1;
    req.top_logprobs = kMaxTopLogprobs;
    req.logit_bias[token] = bias;
    return req;
  }

  LogprobEstimate via_echo(const TokenSeq& prompt, const TokenSeq& prefix, TokenId token) {
    TokenSeq full = prompt;
    full.insert(full.end(), prefix.begin(), prefix.end());
    full.push_back(token);
    CompletionRequest req;
    req.prompt = full;
    req.echo = true;
    const auto resp = client_->send(req);
    if (!resp.prompt_logprobs || resp.prompt_logprobs->empty())
      throw ProtocolError("malformed_response", "echo did not return prompt logprobs");
    return {resp.prompt_logprobs->back(), ProbeMethod::Direct, 1};
  }

  LogprobEstimate via_biased_top_k(const TokenSeq& prompt, const TokenSeq& prefix, TokenId token, double guess) {
    enum class Reading { Absent, Saturated, Usable };
    std::size_t queries = 0;
    double q = 0.0, log_q = 0.0;
    auto read = [&](double bias) {
      ++queries;
      const auto resp = client_->send(probe_request(prompt, prefix, token, bias));
      if (resp.top_logprobs.empty()) throw ProtocolError("malformed_response", "missing top_logprobs");
      for (const auto& e : resp.top_logprobs.front()) {
        if (e.token != token) continue;
        log_q = e.logprob;
        q = std::exp(e.logprob);
        if (q <= 0.0) return Reading::Absent;
        return q > 1.0 - options_.saturation_guard ? Reading::Saturated : Reading::Usable;
      }
      return Reading::Absent;
    };
    auto result = [&](double bias) {
      return LogprobEstimate{unbias_log(log_q, bias),
                             queries == 1 ? ProbeMethod::BiasedTop5 : ProbeMethod::BinarySearch, queries};
    };

    const double start = std::clamp(-guess, -kMaxBias, kMaxBias);
    Reading r = read(start);
    if (r == Reading::Usable) return result(start);

    double lo = start, hi = start;  // lo: absent, hi: saturated
    if (r == Reading::Saturated) {
      // Retry once with the bias that would put the token near 1/2.
      const double odds = q < 1.0 ? std::log(q / (1.0 - q)) : 40.0;
      const double lowered = std::max(-kMaxBias, start - std::max(odds, 1.0));
      r = read(lowered);
      if (r == Reading::Usable) return result(lowered);
      if (r == Reading::Saturated) {
        hi = lowered;
        double step = 2.0;
        for (;;) {
          if (hi <= -kMaxBias) throw UnreachableToken("token saturates at every admissible bias");
          const double next = std::max(-kMaxBias, hi - step);
          r = read(next);
          if (r == Reading::Usable) return result(next);
          if (r == Reading::Absent) {
            lo = next;
            break;
          }
          hi = next;
          step *= 2.0;
        }
      } else {
        lo = lowered;
      }
    } else {
      // Absent: expand upwards geometrically.
      double step = 1.0;
      for (;;) {
        if (lo >= kMaxBias)
          throw UnreachableToken("token " + std::to_string(token) + " never surfaces in the top-5");
        const double next = std::min(kMaxBias, lo + step);
        r = read(next);
        if (r == Reading::Usable) return result(next);
        if (r == Reading::Saturated) {
          hi = next;
          break;
        }
        lo = next;
        step *= 2.0;
      }
    }
    // lo absent, hi saturated: bisect for a usable bias.
    while (hi - lo > options_.search_tolerance) {
      const double mid = 0.5 * (lo + hi);
      r = read(mid);
      if (r == Reading::Usable) return result(mid);
      if (r == Reading::Absent) lo = mid;
      else hi = mid;
    }
    throw UnreachableToken("no bias surfaces token " + std::to_string(token) + " without saturating it");
  }

  LogprobEstimate via_greedy_flip(const TokenSeq& prompt, const TokenSeq& prefix, TokenId token, double guess) {
    std::size_t queries = 0;
    double top_logprob = 0.0;
    double fifth_logprob = 0.0;
    std::optional<double> reported;
    auto flips = [&](double bias) {
      ++queries;
      const auto resp = client_->send(probe_request(prompt, prefix, token, bias));
      if (resp.top_logprobs.empty() || resp.top_logprobs.front().empty() || resp.tokens.empty())
        throw ProtocolError("malformed_response", "missing top_logprobs");
      const auto& top = resp.top_logprobs.front();
      top_logprob = top.front().logprob;
      fifth_logprob = top.back().logprob;
      reported.reset();
      for (const auto& e : top)
        if (e.token == token) reported = e.logprob;
      return resp.tokens.front() == token;
    };

    const double start = std::clamp(-guess, 0.0, kMaxBias);
    const bool flipped = flips(start);
    if (reported) return {*reported, ProbeMethod::BiasedTop5, queries};

    // The token ranks below the reported list, so the flip bias exceeds the
    // gap between the top and the last reported entry.
    double lo = std::max(0.0, top_logprob - fifth_logprob);
    double hi = start;
    if (!flipped) {
      lo = std::max(lo, start);
      double step = 1.0;
      for (;;) {
        if (lo >= kMaxBias)
          throw UnreachableToken("token " + std::to_string(token) + " never becomes the greedy sample");
        const double next = std::min(kMaxBias, lo + step);
        if (flips(next)) {
          hi = next;
          break;
        }
        lo = next;
        step *= 2.0;
      }
    }
    lo = std::min(lo, hi);
    while (hi - lo > options_.search_tolerance) {
      const double mid = 0.5 * (lo + hi);
      if (flips(mid)) hi = mid;
      else lo = mid;
    }
    return {top_logprob - 0.5 * (lo + hi), ProbeMethod::BinarySearch, queries};
  }

  ApiClient* client_;
  ProbeOptions options_;
  ProbeStats stats_;
  std::map<Key, double> cache_;
};

}  // namespace gcq
