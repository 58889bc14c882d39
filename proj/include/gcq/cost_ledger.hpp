#pragma once

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>

#include "gcq/errors.hpp"

namespace gcq {

struct LedgerSnapshot {
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
  std::uint64_t requests = 0;
  double spend = 0.0;

  LedgerSnapshot operator-(const LedgerSnapshot& o) const {
    return {prompt_tokens - o.prompt_tokens, completion_tokens - o.completion_tokens,
            requests - o.requests, spend - o.spend};
  }
  bool operator==(const LedgerSnapshot&) const = default;
};

/// Token, request and currency counters with an optional hard budget.
/// Defaults price tokens like a 2024 instruct-completions model
/// ($1.50 / $2.00 per million prompt / completion tokens).
class CostLedger {
 public:
  double price_per_1k_prompt = 0.0015;
  double price_per_1k_completion = 0.002;
  std::optional<double> budget;                  // currency
  std::optional<std::uint64_t> max_requests;     // request-count budget

  double cost_of(std::uint64_t prompt, std::uint64_t completion) const {
    return static_cast<double>(prompt) / 1000.0 * price_per_1k_prompt +
           static_cast<double>(completion) / 1000.0 * price_per_1k_completion;
  }

  double spend() const { return cost_of(prompt_tokens_, completion_tokens_); }

  bool would_exceed(std::uint64_t prompt, std::uint64_t completion) const {
    if (max_requests && requests_ + 1 > *max_requests) return true;
    if (budget && cost_of(prompt_tokens_ + prompt, completion_tokens_ + completion) > *budget) return true;
    return false;
  }

  /// Throws BudgetExceeded without recording anything if the request does not fit.
  void require(std::uint64_t prompt, std::uint64_t completion) const {
    if (!would_exceed(prompt, completion)) return;
    std::ostringstream os;
    os << "budget exhausted: spent " << spend() << " over " << requests_ << " requests";
    throw BudgetExceeded(os.str());
  }

  void charge(std::uint64_t prompt, std::uint64_t completion) {
    prompt_tokens_ += prompt;
    completion_tokens_ += completion;
    ++requests_;
  }

  std::uint64_t prompt_tokens() const noexcept { return prompt_tokens_; }
  std::uint64_t completion_tokens() const noexcept { return completion_tokens_; }
  std::uint64_t requests() const noexcept { return requests_; }

  LedgerSnapshot snapshot() const { return {prompt_tokens_, completion_tokens_, requests_, spend()}; }

  /// Adds another ledger's counters (used when merging per-candidate deltas).
  void merge(const LedgerSnapshot& delta) {
    prompt_tokens_ += delta.prompt_tokens;
    completion_tokens_ += delta.completion_tokens;
    requests_ += delta.requests;
  }

 private:
  std::uint64_t prompt_tokens_ = 0;
  std::uint64_t completion_tokens_ = 0;
  std::uint64_t requests_ = 0;
};

}  // namespace gcq
