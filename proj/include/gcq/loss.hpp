#pragma once

// Objectives the attack engines minimize. The engines only see `Objective`;
// whether a loss comes from a local model call or from logprob reconstruction
// through the API is decided by the oracle behind it.

#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gcq/api_wire.hpp"
#include "gcq/cost_ledger.hpp"
#include "gcq/errors.hpp"
#include "gcq/logprob_probe.hpp"
#include "gcq/moderation.hpp"
#include "gcq/toy_lm.hpp"
#include "gcq/vocab.hpp"

namespace gcq {

struct ScoredLoss {
  double loss = 0.0;
  bool short_circuited = false;
};

/// Something that scores and generates continuations of token prompts.
class LanguageOracle {
 public:
  virtual ~LanguageOracle() = default;

  /// Negative cumulative logprob of `target` after `prompt`. Scoring stops
  /// early once the partial loss exceeds `stop_above`; the returned value is
  /// then a lower bound on the full loss that is already above the threshold.
  virtual ScoredLoss target_loss(const TokenSeq& prompt, const TokenSeq& target,
                                 std::optional<double> stop_above = std::nullopt,
                                 const TokenSeq* parent = nullptr) = 0;
  virtual TokenSeq generate(const TokenSeq& prompt, std::size_t n_tokens) = 0;
  virtual LedgerSnapshot usage() const = 0;
};

/// Direct calls into a ToyLM. Charges a ledger as if each scored target token
/// were an API request, so budgets behave the same as against the endpoint.
class LocalOracle final : public LanguageOracle {
 public:
  explicit LocalOracle(const ToyLM& lm, CostLedger ledger = {}) : lm_(&lm), ledger_(std::move(ledger)) {}

  ScoredLoss target_loss(const TokenSeq& prompt, const TokenSeq& target, std::optional<double> stop_above,
                         const TokenSeq*) override {
    TokenSeq ctx = prompt;
    double loss = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
      ledger_.require(prompt.size(), i + 1);
      loss -= lm_->conditional_logprob(ctx, target[i]);
      ledger_.charge(prompt.size(), i + 1);
      ctx.push_back(target[i]);
      if (stop_above && loss > *stop_above && i + 1 < target.size()) return {loss, true};
    }
    return {loss, false};
  }

  TokenSeq generate(const TokenSeq& prompt, std::size_t n_tokens) override {
    ledger_.require(prompt.size(), n_tokens);
    auto out = lm_->greedy_generate(prompt, n_tokens);
    ledger_.charge(prompt.size(), n_tokens);
    return out;
  }

  LedgerSnapshot usage() const override { return ledger_.snapshot(); }
  CostLedger& ledger() noexcept { return ledger_; }

 private:
  const ToyLM* lm_;
  CostLedger ledger_;
};

/// Scores through the completions API with logprob reconstruction.
class RemoteOracle final : public LanguageOracle {
 public:
  RemoteOracle(ApiClient& client, ProbeOptions options) : client_(&client), probe_(client, options) {}

  ScoredLoss target_loss(const TokenSeq& prompt, const TokenSeq& target, std::optional<double> stop_above,
                         const TokenSeq* parent) override {
    std::optional<double> stop_below;
    if (stop_above) stop_below = -*stop_above;
    const auto r = probe_.cumulative_logprob(prompt, target, stop_below, parent);
    return {-r.value, r.short_circuited};
  }

  TokenSeq generate(const TokenSeq& prompt, std::size_t n_tokens) override {
    CompletionRequest req;
    req.prompt = prompt;
    req.max_tokens = n_tokens;
    return client_->send(req).tokens;
  }

  LedgerSnapshot usage() const override { return client_->ledger().snapshot(); }
  LogprobProbe& probe() noexcept { return probe_; }

 private:
  ApiClient* client_;
  LogprobProbe probe_;
};

inline ScoredLoss target_loss(LanguageOracle& oracle, const TokenSeq& prompt, const TokenSeq& target,
                              std::optional<double> stop_above = std::nullopt) {
  if (target.empty()) return {};
  return oracle.target_loss(prompt, target, stop_above);
}

/// True when greedy decoding after `prompt` reproduces `target` exactly.
/// Costs one generation request of len(target) tokens.
inline bool success_check(LanguageOracle& oracle, const TokenSeq& prompt, const TokenSeq& target) {
  if (target.empty()) return true;
  return oracle.generate(prompt, target.size()) == target;
}

/// A (payload, target) pair of a multi-string objective; the optimized
/// suffix is appended to the payload.
struct UniversalItem {
  TokenSeq payload;
  TokenSeq target;
};

inline TokenSeq concat(const TokenSeq& a, const TokenSeq& b) {
  TokenSeq out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

/// Mean target loss of payload ++ suffix over the items.
inline double universal_loss(LanguageOracle& oracle, const TokenSeq& suffix, std::span<const UniversalItem> items) {
  if (items.empty()) throw EmptyInput("universal loss needs at least one target");
  double total = 0.0;
  for (const auto& item : items) total += target_loss(oracle, concat(item.payload, suffix), item.target).loss;
  return total / static_cast<double>(items.size());
}

// --- Moderation endpoints ------------------------------------------------------

class ModerationEndpoint {
 public:
  virtual ~ModerationEndpoint() = default;
  /// At most 32 texts per call; each call is one request.
  virtual std::vector<ModerationResult> moderate(std::span<const std::string> texts) = 0;
  virtual LedgerSnapshot usage() const = 0;
};

class LocalModerationEndpoint final : public ModerationEndpoint {
 public:
  explicit LocalModerationEndpoint(const ModerationModel& model, CostLedger ledger = {})
      : model_(&model), ledger_(std::move(ledger)) {}
  std::vector<ModerationResult> moderate(std::span<const std::string> texts) override {
    ledger_.require(0, 0);
    auto out = model_->moderate(texts);
    ledger_.charge(0, 0);
    return out;
  }
  LedgerSnapshot usage() const override { return ledger_.snapshot(); }

 private:
  const ModerationModel* model_;
  CostLedger ledger_;
};

class RemoteModerationEndpoint final : public ModerationEndpoint {
 public:
  explicit RemoteModerationEndpoint(ApiClient& client) : client_(&client) {}
  std::vector<ModerationResult> moderate(std::span<const std::string> texts) override {
    return client_->moderate(texts);
  }
  LedgerSnapshot usage() const override { return client_->ledger().snapshot(); }

 private:
  ApiClient* client_;
};

/// Sum of category scores of one text. Thresholds are never consulted.
inline double moderation_loss(ModerationEndpoint& endpoint, const std::string& text) {
  const auto results = endpoint.moderate(std::span<const std::string>(&text, 1));
  return results.at(0).score_sum();
}

// --- Objectives ------------------------------------------------------------------

class Objective {
 public:
  virtual ~Objective() = default;

  /// Number of candidates the objective prefers to score per call.
  virtual std::size_t batch_size() const { return 1; }
  virtual std::vector<ScoredLoss> evaluate(std::span<const TokenSeq> prompts, std::optional<double> stop_above,
                                           const TokenSeq* parent) = 0;
  virtual bool success(const TokenSeq& prompt) = 0;
  virtual bool has_proxy() const { return false; }
  virtual double proxy_loss(const TokenSeq&) const { throw ConfigError("objective has no proxy"); }
  virtual LedgerSnapshot usage() const = 0;
  /// Prompt built by repeating the target, for objectives that have one.
  virtual std::optional<TokenSeq> repeat_seed(std::size_t) const { return std::nullopt; }
  virtual const Vocabulary& vocab() const = 0;
};

/// Left-truncated repetition of the target filling m positions.
inline TokenSeq init_repeat(const TokenSeq& target, std::size_t m) {
  if (target.empty()) throw EmptyInput("cannot build a repeat prompt from an empty target");
  if (m == 0) throw ConfigError("prompt length must be at least 1");
  TokenSeq out(m);
  const std::size_t t = target.size();
  // out[m-1] = target[t-1], walking backwards through the copies
  for (std::size_t i = 0; i < m; ++i) out[m - 1 - i] = target[t - 1 - (i % t)];
  return out;
}

class TargetStringObjective final : public Objective {
 public:
  TargetStringObjective(LanguageOracle& oracle, const Vocabulary& vocab, TokenSeq target,
                        const ToyLM* proxy = nullptr)
      : oracle_(&oracle), vocab_(&vocab), target_(std::move(target)), proxy_(proxy) {}

  std::vector<ScoredLoss> evaluate(std::span<const TokenSeq> prompts, std::optional<double> stop_above,
                                   const TokenSeq* parent) override {
    std::vector<ScoredLoss> out;
    for (const auto& p : prompts) {
      if (target_.empty()) out.push_back({});
      else out.push_back(oracle_->target_loss(p, target_, stop_above, parent));
    }
    return out;
  }
  bool success(const TokenSeq& prompt) override { return success_check(*oracle_, prompt, target_); }
  bool has_proxy() const override { return proxy_ != nullptr; }
  double proxy_loss(const TokenSeq& prompt) const override {
    if (!proxy_) throw ConfigError("objective has no proxy");
    return -proxy_->cumulative_logprob(prompt, target_);
  }
  LedgerSnapshot usage() const override { return oracle_->usage(); }
  std::optional<TokenSeq> repeat_seed(std::size_t m) const override { return init_repeat(target_, m); }
  const Vocabulary& vocab() const override { return *vocab_; }
  const TokenSeq& target() const noexcept { return target_; }

 private:
  LanguageOracle* oracle_;
  const Vocabulary* vocab_;
  TokenSeq target_;
  const ToyLM* proxy_;
};

/// Mean loss over several (payload, target) items sharing one suffix.
class UniversalTargetObjective final : public Objective {
 public:
  UniversalTargetObjective(LanguageOracle& oracle, const Vocabulary& vocab, std::vector<UniversalItem> items,
                           const ToyLM* proxy = nullptr)
      : oracle_(&oracle), vocab_(&vocab), items_(std::move(items)), proxy_(proxy) {
    if (items_.empty()) throw EmptyInput("universal objective needs at least one target");
  }

  std::vector<ScoredLoss> evaluate(std::span<const TokenSeq> prompts, std::optional<double>,
                                   const TokenSeq*) override {
    std::vector<ScoredLoss> out;
    for (const auto& p : prompts) out.push_back({universal_loss(*oracle_, p, items_), false});
    return out;
  }
  bool success(const TokenSeq& prompt) override {
    for (const auto& item : items_)
      if (!success_check(*oracle_, concat(item.payload, prompt), item.target)) return false;
    return true;
  }
  bool has_proxy() const override { return proxy_ != nullptr; }
  double proxy_loss(const TokenSeq& prompt) const override {
    if (!proxy_) throw ConfigError("objective has no proxy");
    double total = 0.0;
    for (const auto& item : items_) total -= proxy_->cumulative_logprob(concat(item.payload, prompt), item.target);
    return total / static_cast<double>(items_.size());
  }
  LedgerSnapshot usage() const override { return oracle_->usage(); }
  const Vocabulary& vocab() const override { return *vocab_; }

 private:
  LanguageOracle* oracle_;
  const Vocabulary* vocab_;
  std::vector<UniversalItem> items_;
  const ToyLM* proxy_;
};

/// Moderation evasion: the suffix is appended to each payload text and the
/// loss is the mean over payloads of the summed category scores. Success means
/// no payload is flagged. Texts are packed into batches of at most 32.
class ModerationObjective final : public Objective {
 public:
  ModerationObjective(ModerationEndpoint& endpoint, const Vocabulary& vocab, std::vector<std::string> payloads)
      : endpoint_(&endpoint), vocab_(&vocab), payloads_(std::move(payloads)) {
    if (payloads_.empty()) throw EmptyInput("moderation objective needs at least one payload");
  }

  std::size_t batch_size() const override { return kMaxModerationBatch; }

  std::vector<ScoredLoss> evaluate(std::span<const TokenSeq> prompts, std::optional<double>,
                                   const TokenSeq*) override {
    std::vector<std::string> texts;
    for (const auto& p : prompts) {
      const std::string suffix = vocab_->detokenize(p);
      for (const auto& payload : payloads_) texts.push_back(payload + suffix);
    }
    const auto results = moderate_all(texts);
    std::vector<ScoredLoss> out;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      double total = 0.0;
      bool any_flag = false;
      for (std::size_t k = 0; k < payloads_.size(); ++k) {
        const auto& r = results[i * payloads_.size() + k];
        total += r.score_sum();
        any_flag = any_flag || r.flagged();
      }
      unflagged_[prompts[i]] = !any_flag;
      out.push_back({total / static_cast<double>(payloads_.size()), false});
    }
    return out;
  }

  /// Uses flags from the most recent evaluation of this prompt when available.
  bool success(const TokenSeq& prompt) override {
    if (auto it = unflagged_.find(prompt); it != unflagged_.end()) return it->second;
    evaluate(std::span<const TokenSeq>(&prompt, 1), std::nullopt, nullptr);
    return unflagged_.at(prompt);
  }

  LedgerSnapshot usage() const override { return endpoint_->usage(); }
  const Vocabulary& vocab() const override { return *vocab_; }
  const std::vector<std::string>& payloads() const noexcept { return payloads_; }

 private:
  std::vector<ModerationResult> moderate_all(const std::vector<std::string>& texts) {
    std::vector<ModerationResult> out;
    for (std::size_t i = 0; i < texts.size(); i += kMaxModerationBatch) {
      const std::size_t n = std::min(kMaxModerationBatch, texts.size() - i);
      auto part = endpoint_->moderate(std::span<const std::string>(texts.data() + i, n));
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }

  ModerationEndpoint* endpoint_;
  const Vocabulary* vocab_;
  std::vector<std::string> payloads_;
  std::map<TokenSeq, bool> unflagged_;
};

}  // namespace gcq
