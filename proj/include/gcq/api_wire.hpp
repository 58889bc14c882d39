#pragma once

// Minimal completions/moderations wire protocol. Records are single-line JSON
// objects; one request line produces exactly one response line. The schema is
// documented in docs/wire_protocol.md.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "gcq/cost_ledger.hpp"
#include "gcq/errors.hpp"
#include "gcq/moderation.hpp"
#include "gcq/rng.hpp"
#include "gcq/toy_lm.hpp"
#include "gcq/vocab.hpp"

namespace gcq {

using json = nlohmann::json;

inline constexpr std::size_t kMaxTopLogprobs = 5;
inline constexpr std::size_t kMaxBiasEntries = 300;
inline constexpr double kMaxBias = 100.0;
inline constexpr std::size_t kMaxCompletionTokens = 4096;

/// Which logprob facilities the endpoint exposes.
enum class ApiEra {
  PromptLogprobs,  // echo returns prompt-token logprobs; bias affects top-k
  BiasedTopK,      // no prompt logprobs; bias affects the reported top-k
  UnbiasedTopK,    // bias affects sampling only; top-k reflects the raw model
};

inline std::string to_string(ApiEra era) {
  switch (era) {
    case ApiEra::PromptLogprobs: return "prompt-logprobs";
    case ApiEra::BiasedTopK: return "biased-topk";
    case ApiEra::UnbiasedTopK: return "unbiased-topk";
  }
  return "unknown";
}

inline ApiEra parse_era(const std::string& s) {
  if (s == "prompt-logprobs") return ApiEra::PromptLogprobs;
  if (s == "biased-topk") return ApiEra::BiasedTopK;
  if (s == "unbiased-topk") return ApiEra::UnbiasedTopK;
  throw ConfigError("unknown API era '" + s + "' (expected prompt-logprobs, biased-topk or unbiased-topk)");
}

struct CompletionRequest {
  std::variant<TokenSeq, std::string> prompt;
  // Tokens treated as already generated: they extend the context and are
  // billed as completion tokens.
  TokenSeq completion_prefix;
  std::size_t max_tokens = 0;
  BiasMap logit_bias;
  std::size_t top_logprobs = 0;
  bool echo = false;
  std::uint64_t seed = 0;
};

struct TopLogprob {
  TokenId token = 0;
  double logprob = 0.0;
  bool operator==(const TopLogprob&) const = default;
};

struct CompletionResponse {
  TokenSeq tokens;
  std::vector<std::vector<TopLogprob>> top_logprobs;  // one list per generated token
  std::optional<std::vector<double>> prompt_logprobs;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
};

struct NoiseConfig {
  bool enabled = false;
  // Per-logit standard deviation. The default, 0.068 / sqrt(8), is a rough stand-in
  // aimed at a loss spread near 0.068 over 8-token targets.
  double sigma = 0.024;
  std::uint64_t seed = 0;
};

// --- JSON encoding -----------------------------------------------------------

inline json to_json(const CompletionRequest& r) {
  json j;
  j["endpoint"] = "/completions";
  if (std::holds_alternative<TokenSeq>(r.prompt)) j["prompt"] = std::get<TokenSeq>(r.prompt);
  else j["prompt"] = std::get<std::string>(r.prompt);
  if (!r.completion_prefix.empty()) j["completion_prefix"] = r.completion_prefix;
  j["max_tokens"] = r.max_tokens;
  json bias = json::object();
  for (const auto& [t, b] : r.logit_bias) bias[std::to_string(t)] = b;
  j["logit_bias"] = bias;
  j["logprobs"] = r.top_logprobs;
  j["echo"] = r.echo;
  j["seed"] = r.seed;
  return j;
}

namespace detail {

template <class T>
T field_or(const json& j, const char* key, T fallback) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  return it->get<T>();
}

inline TokenSeq token_array(const json& j, const char* what) {
  if (!j.is_array()) throw ProtocolError("invalid_request", std::string(what) + " must be an array of token ids");
  TokenSeq out;
  for (const auto& e : j) {
    if (!e.is_number_integer() || e.get<long long>() < 0)
      throw ProtocolError("invalid_request", std::string(what) + " must contain non-negative integers");
    out.push_back(static_cast<TokenId>(e.get<long long>()));
  }
  return out;
}

}  // namespace detail

inline CompletionRequest completion_request_from_json(const json& j) {
  if (!j.is_object()) throw ProtocolError("malformed", "request must be an object");
  CompletionRequest r;
  const auto prompt = j.find("prompt");
  if (prompt == j.end()) throw ProtocolError("invalid_request", "missing prompt");
  if (prompt->is_string()) r.prompt = prompt->get<std::string>();
  else r.prompt = detail::token_array(*prompt, "prompt");
  if (auto it = j.find("completion_prefix"); it != j.end() && !it->is_null())
    r.completion_prefix = detail::token_array(*it, "completion_prefix");
  try {
    const auto max_tokens = detail::field_or<long long>(j, "max_tokens", 16);
    if (max_tokens < 0) throw ProtocolError("invalid_request", "max_tokens must be non-negative");
    r.max_tokens = static_cast<std::size_t>(max_tokens);
    const auto logprobs = detail::field_or<long long>(j, "logprobs", 0);
    if (logprobs < 0 || logprobs > static_cast<long long>(kMaxTopLogprobs))
      throw ProtocolError("invalid_request", "logprobs must lie in [0,5]");
    r.top_logprobs = static_cast<std::size_t>(logprobs);
    r.echo = detail::field_or<bool>(j, "echo", false);
    r.seed = detail::field_or<std::uint64_t>(j, "seed", 0);
    if (auto it = j.find("logit_bias"); it != j.end() && !it->is_null()) {
      if (!it->is_object()) throw ProtocolError("invalid_request", "logit_bias must be an object");
      if (it->size() > kMaxBiasEntries)
        throw ProtocolError("bias_map_too_large", "logit_bias has more than 300 entries");
      for (const auto& [key, value] : it->items()) {
        std::size_t used = 0;
        unsigned long id = 0;
        try {
          id = std::stoul(key, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used != key.size() || key.empty())
          throw ProtocolError("invalid_request", "logit_bias key '" + key + "' is not a token id");
        if (!value.is_number()) throw ProtocolError("invalid_request", "logit_bias values must be numbers");
        r.logit_bias[static_cast<TokenId>(id)] = value.get<double>();
      }
    }
  } catch (const json::exception& e) {
    throw ProtocolError("invalid_request", e.what());
  }
  return r;
}

inline json to_json(const CompletionResponse& r) {
  json j;
  j["tokens"] = r.tokens;
  json tops = json::array();
  for (const auto& pos : r.top_logprobs) {
    json entries = json::array();
    for (const auto& e : pos) entries.push_back(json::array({e.token, e.logprob}));
    tops.push_back(std::move(entries));
  }
  j["top_logprobs"] = std::move(tops);
  if (r.prompt_logprobs) j["prompt_logprobs"] = *r.prompt_logprobs;
  j["usage"] = {{"prompt_tokens", r.prompt_tokens}, {"completion_tokens", r.completion_tokens}};
  return j;
}

inline void throw_if_error(const json& j) {
  if (auto it = j.find("error"); it != j.end()) {
    throw ProtocolError(detail::field_or<std::string>(*it, "code", "unknown"),
                        detail::field_or<std::string>(*it, "message", ""));
  }
}

inline CompletionResponse completion_response_from_json(const json& j) {
  throw_if_error(j);
  try {
    CompletionResponse r;
    r.tokens = detail::token_array(j.at("tokens"), "tokens");
    for (const auto& pos : j.at("top_logprobs")) {
      std::vector<TopLogprob> entries;
      for (const auto& e : pos) entries.push_back({e.at(0).get<TokenId>(), e.at(1).get<double>()});
      r.top_logprobs.push_back(std::move(entries));
    }
    if (auto it = j.find("prompt_logprobs"); it != j.end()) r.prompt_logprobs = it->get<std::vector<double>>();
    r.prompt_tokens = j.at("usage").at("prompt_tokens").get<std::uint64_t>();
    r.completion_tokens = j.at("usage").at("completion_tokens").get<std::uint64_t>();
    return r;
  } catch (const json::exception& e) {
    throw ProtocolError("malformed_response", e.what());
  }
}

inline json moderation_request_json(std::span<const std::string> texts) {
  json j;
  j["endpoint"] = "/moderations";
  j["input"] = json::array();
  for (const auto& t : texts) j["input"].push_back(t);
  return j;
}

inline json to_json(const std::vector<ModerationResult>& results) {
  json arr = json::array();
  for (const auto& r : results) {
    json cats = json::array();
    for (const auto& c : r.categories) cats.push_back({{"name", c.name}, {"score", c.score}, {"flagged", c.flagged}});
    arr.push_back({{"flagged", r.flagged()}, {"categories", std::move(cats)}});
  }
  return json{{"results", std::move(arr)}};
}

inline std::vector<ModerationResult> moderation_results_from_json(const json& j) {
  throw_if_error(j);
  try {
    std::vector<ModerationResult> out;
    for (const auto& r : j.at("results")) {
      ModerationResult mr;
      for (const auto& c : r.at("categories"))
        mr.categories.push_back({c.at("name").get<std::string>(), c.at("score").get<double>(),
                                 c.at("flagged").get<bool>()});
      out.push_back(std::move(mr));
    }
    return out;
  } catch (const json::exception& e) {
    throw ProtocolError("malformed_response", e.what());
  }
}

inline json error_json(const std::string& code, const std::string& message) {
  return json{{"error", {{"code", code}, {"message", message}}}};
}

// --- Mock server ---------------------------------------------------------------

/// Wraps a ToyLM (and optionally a moderation model) behind the wire protocol.
/// Thread-safe: the only mutable state is the request counters.
class MockServer {
 public:
  MockServer(std::shared_ptr<const ToyLM> lm, ApiEra era, NoiseConfig noise = {},
             std::shared_ptr<const Vocabulary> vocab = nullptr,
             std::shared_ptr<const ModerationModel> moderation = nullptr)
      : lm_(std::move(lm)), era_(era), noise_(noise), vocab_(std::move(vocab)),
        moderation_(std::move(moderation)) {}

  ApiEra era() const noexcept { return era_; }
  const ToyLM& model() const noexcept { return *lm_; }
  std::uint64_t completion_requests() const noexcept { return completion_requests_.load(); }
  std::uint64_t moderation_requests() const noexcept { return moderation_requests_.load(); }

  CompletionResponse handle(const CompletionRequest& req) {
    const std::size_t n = lm_->vocab_size();
    TokenSeq prompt;
    if (std::holds_alternative<TokenSeq>(req.prompt)) {
      prompt = std::get<TokenSeq>(req.prompt);
    } else {
      if (!vocab_) throw ProtocolError("invalid_request", "text prompts need a server vocabulary");
      try {
        prompt = vocab_->tokenize(std::get<std::string>(req.prompt));
      } catch (const TokenizeError& e) {
        throw ProtocolError("invalid_request", e.what());
      }
    }
    for (TokenId t : prompt)
      if (t >= n) throw ProtocolError("invalid_request", "prompt token " + std::to_string(t) + " out of range");
    for (TokenId t : req.completion_prefix)
      if (t >= n) throw ProtocolError("invalid_request", "completion_prefix token out of range");
    if (req.top_logprobs > kMaxTopLogprobs) throw ProtocolError("invalid_request", "logprobs must lie in [0,5]");
    if (req.logit_bias.size() > kMaxBiasEntries)
      throw ProtocolError("bias_map_too_large", "logit_bias has more than 300 entries");
    if (req.max_tokens > kMaxCompletionTokens) throw ProtocolError("invalid_request", "max_tokens too large");
    BiasMap bias;
    for (const auto& [t, b] : req.logit_bias) {
      if (t >= n) throw ProtocolError("invalid_request", "logit_bias token " + std::to_string(t) + " out of range");
      if (!std::isfinite(b)) throw ProtocolError("invalid_request", "logit_bias values must be finite");
      bias[t] = std::clamp(b, -kMaxBias, kMaxBias);
    }

    const std::uint64_t serial = completion_requests_.fetch_add(1);
    Rng noise_rng(mix_seed(noise_.seed, serial));

    CompletionResponse resp;
    resp.prompt_tokens = prompt.size();
    resp.completion_tokens = req.completion_prefix.size() + req.max_tokens;

    if (era_ == ApiEra::PromptLogprobs && req.echo) {
      std::vector<double> lps;
      TokenSeq ctx;
      for (TokenId t : prompt) {
        LogitVector logits = lm_->next_logits(ctx);
        perturb(logits, noise_rng);
        lps.push_back(log_softmax(logits)[t]);
        ctx.push_back(t);
      }
      resp.prompt_logprobs = std::move(lps);
    }

    TokenSeq ctx = prompt;
    ctx.insert(ctx.end(), req.completion_prefix.begin(), req.completion_prefix.end());
    for (std::size_t i = 0; i < req.max_tokens; ++i) {
      LogitVector raw = lm_->next_logits(ctx);
      perturb(raw, noise_rng);
      LogitVector biased = raw;
      for (const auto& [t, b] : bias) biased[t] += b;
      const TokenId next = argmax_token(biased);
      if (req.top_logprobs > 0) {
        const auto lps = log_softmax(era_ == ApiEra::UnbiasedTopK ? raw : biased);
        resp.top_logprobs.push_back(top_k(lps, req.top_logprobs));
      }
      resp.tokens.push_back(next);
      ctx.push_back(next);
    }
    return resp;
  }

  std::vector<ModerationResult> moderate(std::span<const std::string> texts) {
    if (!moderation_) throw ProtocolError("unknown_endpoint", "this server has no moderation model");
    if (texts.empty()) throw ProtocolError("invalid_request", "input must not be empty");
    std::vector<ModerationResult> out;
    try {
      out = moderation_->moderate(texts);
    } catch (const TokenizeError& e) {
      throw ProtocolError("invalid_request", e.what());
    }
    moderation_requests_.fetch_add(1);
    return out;
  }

  /// Decodes one request line and returns the encoded response line.
  std::string handle_line(const std::string& line) {
    json reply;
    try {
      json req;
      try {
        req = json::parse(line);
      } catch (const json::parse_error& e) {
        throw ProtocolError("malformed", e.what());
      }
      if (!req.is_object()) throw ProtocolError("malformed", "request must be an object");
      const std::string endpoint = detail::field_or<std::string>(req, "endpoint", "/completions");
      if (endpoint == "/completions") {
        reply = to_json(handle(completion_request_from_json(req)));
      } else if (endpoint == "/moderations") {
        const auto input = req.find("input");
        if (input == req.end() || !input->is_array())
          throw ProtocolError("invalid_request", "input must be an array of strings");
        std::vector<std::string> texts;
        for (const auto& t : *input) {
          if (!t.is_string()) throw ProtocolError("invalid_request", "input must be an array of strings");
          texts.push_back(t.get<std::string>());
        }
        reply = to_json(moderate(texts));
      } else {
        throw ProtocolError("unknown_endpoint", "no endpoint " + endpoint);
      }
    } catch (const ProtocolError& e) {
      reply = error_json(e.code(), e.what());
    } catch (const json::exception& e) {
      reply = error_json("invalid_request", e.what());
    }
    return reply.dump();
  }

 private:
  void perturb(LogitVector& logits, Rng& rng) const {
    if (!noise_.enabled || noise_.sigma == 0.0) return;
    for (double& v : logits) v += noise_.sigma * standard_normal(rng);
  }

  static std::vector<TopLogprob> top_k(const std::vector<double>& lps, std::size_t k) {
    std::vector<TokenId> idx(lps.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<TokenId>(i);
    k = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](TokenId a, TokenId b) { return lps[a] > lps[b] || (lps[a] == lps[b] && a < b); });
    std::vector<TopLogprob> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back({idx[i], lps[idx[i]]});
    return out;
  }

  std::shared_ptr<const ToyLM> lm_;
  ApiEra era_;
  NoiseConfig noise_;
  std::shared_ptr<const Vocabulary> vocab_;
  std::shared_ptr<const ModerationModel> moderation_;
  std::atomic<std::uint64_t> completion_requests_{0};
  std::atomic<std::uint64_t> moderation_requests_{0};
};

// --- Transports and client ----------------------------------------------------------

/// Moves request lines to a server and returns response lines in order.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::vector<std::string> exchange(std::span<const std::string> lines) = 0;
};

class InProcessTransport final : public Transport {
 public:
  explicit InProcessTransport(MockServer& server) : server_(&server) {}
  std::vector<std::string> exchange(std::span<const std::string> lines) override {
    std::vector<std::string> out;
    out.reserve(lines.size());
    for (const auto& l : lines) out.push_back(server_->handle_line(l));
    return out;
  }

 private:
  MockServer* server_;
};

struct ClientOptions {
  std::size_t max_retries = 3;
};

/// Budget-enforcing API client. Not thread-safe; use one client per worker.
class ApiClient {
 public:
  ApiClient(Transport& transport, CostLedger ledger = {}, ClientOptions options = {},
            const Vocabulary* vocab = nullptr)
      : transport_(&transport), ledger_(std::move(ledger)), options_(options), vocab_(vocab) {}

  CompletionResponse send(const CompletionRequest& req) {
    auto out = send_batch(std::span<const CompletionRequest>(&req, 1));
    return std::move(out.front());
  }

  /// Pipelines a batch over the transport; responses come back in submission order.
  std::vector<CompletionResponse> send_batch(std::span<const CompletionRequest> reqs) {
    std::uint64_t prompt = 0, completion = 0;
    for (const auto& r : reqs) {
      prompt += estimate_prompt_tokens(r);
      completion += r.completion_prefix.size() + r.max_tokens;
    }
    if (ledger_.max_requests && ledger_.requests() + reqs.size() > *ledger_.max_requests)
      throw BudgetExceeded("request budget exhausted");
    ledger_.require(prompt, completion);
    std::vector<std::string> lines;
    lines.reserve(reqs.size());
    for (const auto& r : reqs) lines.push_back(to_json(r).dump());
    const auto replies = exchange_with_retry(lines);
    std::vector<CompletionResponse> out;
    out.reserve(replies.size());
    for (const auto& reply : replies) {
      json j;
      try {
        j = json::parse(reply);
      } catch (const json::parse_error& e) {
        throw ProtocolError("malformed_response", e.what());
      }
      out.push_back(completion_response_from_json(j));
      ledger_.charge(out.back().prompt_tokens, out.back().completion_tokens);
    }
    return out;
  }

  std::vector<ModerationResult> moderate(std::span<const std::string> texts) {
    ledger_.require(0, 0);
    const std::string line = moderation_request_json(texts).dump();
    const auto replies = exchange_with_retry(std::span<const std::string>(&line, 1));
    json j;
    try {
      j = json::parse(replies.at(0));
    } catch (const json::parse_error& e) {
      throw ProtocolError("malformed_response", e.what());
    }
    auto results = moderation_results_from_json(j);
    ledger_.charge(0, 0);
    return results;
  }

  const CostLedger& ledger() const noexcept { return ledger_; }
  CostLedger& ledger() noexcept { return ledger_; }

 private:
  std::uint64_t estimate_prompt_tokens(const CompletionRequest& r) const {
    if (std::holds_alternative<TokenSeq>(r.prompt)) return std::get<TokenSeq>(r.prompt).size();
    const auto& text = std::get<std::string>(r.prompt);
    if (vocab_) {
      try {
        return vocab_->tokenize(text).size();
      } catch (const TokenizeError&) {
      }
    }
    return text.size();  // upper bound: every token spans at least one character
  }

  std::vector<std::string> exchange_with_retry(std::span<const std::string> lines) {
    for (std::size_t attempt = 0;; ++attempt) {
      try {
        auto replies = transport_->exchange(lines);
        if (replies.size() != lines.size()) throw TransportError("response count mismatch");
        return replies;
      } catch (const TransportError&) {
        if (attempt >= options_.max_retries) throw;
      }
    }
  }

  Transport* transport_;
  CostLedger ledger_;
  ClientOptions options_;
  const Vocabulary* vocab_;
};

}  // namespace gcq
