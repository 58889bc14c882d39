#pragma once

// Query-based prompt optimizers.
//
//  * gcq_attack: best-first search over single-token mutations. Each
//    iteration expands the best buffered prompt into b_p random neighbours,
//    keeps the b_q best under the proxy loss and scores those with the true
//    loss, inserting them into a bounded buffer.
//  * greedy_query_only: one incumbent, B random neighbours per iteration,
//    keep the best if it improves.
//  * position_first: probe one replacement per position, then spend B'
//    replacements on the position whose probe helped most.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gcq/candidate_buffer.hpp"
#include "gcq/cost_ledger.hpp"
#include "gcq/errors.hpp"
#include "gcq/loss.hpp"
#include "gcq/rng.hpp"
#include "gcq/vocab.hpp"

namespace gcq {

enum class InitKind { Repeat, Random, Given };

inline std::string to_string(InitKind k) {
  switch (k) {
    case InitKind::Repeat: return "repeat";
    case InitKind::Random: return "random";
    case InitKind::Given: return "given";
  }
  return "unknown";
}

enum class Outcome { Success, BudgetExhausted, IterationsExhausted };

inline std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::Success: return "success";
    case Outcome::BudgetExhausted: return "budget_exhausted";
    case Outcome::IterationsExhausted: return "iterations_exhausted";
  }
  return "unknown";
}

struct IterationRecord {
  std::size_t iteration = 0;
  std::optional<double> best_loss;
  std::optional<double> worst_loss;
  std::size_t queries = 0;  // cumulative true-loss evaluations
  LedgerSnapshot ledger;
  bool success = false;
  std::optional<double> holdout_asr;
};

struct AttackTrace {
  std::vector<IterationRecord> iterations;
  TokenSeq final_prompt;  // canonical
  std::optional<double> final_loss;
  Outcome outcome = Outcome::IterationsExhausted;
  std::size_t queries = 0;
  std::vector<bool> decisions;  // buffer accept/reject, in evaluation order
  std::vector<Candidate> final_buffer;
};

/// Called after each iteration with the current best (canonical) prompt; the
/// returned value is stored as the iteration's holdout ASR.
using HoldoutProbe = std::function<std::optional<double>(const TokenSeq&)>;

struct GcqConfig {
  std::size_t prompt_length = 20;     // m
  std::size_t iterations = 100;       // T
  std::size_t proxy_batch = 8192;     // b_p
  std::size_t query_batch = 32;       // b_q
  std::size_t buffer_size = 128;      // B
  InitKind init = InitKind::Repeat;
  TokenSeq given;
  std::uint64_t seed = 0;
  bool short_circuit = true;
  bool stop_on_success = true;
  HoldoutProbe holdout;

  void validate() const {
    if (prompt_length < 1) throw ConfigError("prompt length must be at least 1");
    if (buffer_size < 1) throw ConfigError("buffer size must be at least 1");
    if (query_batch < 1) throw ConfigError("query batch must be at least 1");
    if (query_batch > proxy_batch) throw ConfigError("query batch must not exceed proxy batch");
    if (init == InitKind::Given && given.size() != prompt_length)
      throw ConfigError("given initial prompt must have the configured length");
  }
};

struct VariantConfig {
  std::size_t suffix_length = 20;    // l
  std::size_t batch = 512;           // B
  std::size_t focused_batch = 64;    // B'
  std::size_t iterations = 100;
  std::uint64_t seed = 0;
  std::optional<TokenSeq> initial;

  void validate() const {
    if (suffix_length < 1) throw ConfigError("suffix length must be at least 1");
    if (batch < 1) throw ConfigError("batch must be at least 1");
    if (focused_batch > batch) throw ConfigError("focused batch must not exceed batch");
    if (initial && initial->size() != suffix_length)
      throw ConfigError("initial suffix must have the configured length");
  }
};

namespace detail {

inline TokenSeq uniform_prompt(Rng& rng, std::size_t m, std::size_t n) {
  TokenSeq s(m);
  for (auto& t : s) t = static_cast<TokenId>(uniform_index(rng, n));
  return s;
}

/// Replacement token for position `j`; an identity draw is resampled once.
inline TokenId replacement(Rng& rng, std::size_t n, TokenId current) {
  auto t = static_cast<TokenId>(uniform_index(rng, n));
  if (t == current) t = static_cast<TokenId>(uniform_index(rng, n));
  return t;
}

inline TokenSeq mutate(Rng& rng, const TokenSeq& base, std::size_t n) {
  TokenSeq s = base;
  const std::size_t j = uniform_index(rng, s.size());
  s[j] = replacement(rng, n, s[j]);
  return s;
}

/// Scores candidates in objective-sized chunks.
inline std::vector<ScoredLoss> score_all(Objective& obj, std::span<const TokenSeq> canon) {
  std::vector<ScoredLoss> out;
  const std::size_t chunk = std::max<std::size_t>(1, obj.batch_size());
  for (std::size_t i = 0; i < canon.size(); i += chunk) {
    const std::size_t k = std::min(chunk, canon.size() - i);
    auto part = obj.evaluate(canon.subspan(i, k), std::nullopt, nullptr);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

}  // namespace detail

inline AttackTrace gcq_attack(Objective& objective, const GcqConfig& config) {
  config.validate();
  const Vocabulary& vocab = objective.vocab();
  const std::size_t n = vocab.size();
  const std::size_t m = config.prompt_length;
  Rng rng(config.seed);
  CandidateBuffer buffer(config.buffer_size);
  AttackTrace trace;
  std::set<TokenSeq> checked;
  double global_best = std::numeric_limits<double>::infinity();
  std::size_t iteration = 0;

  auto record = [&](bool success) {
    IterationRecord rec;
    rec.iteration = iteration;
    if (!buffer.empty()) {
      rec.best_loss = buffer.best().loss;
      rec.worst_loss = buffer.worst().loss;
    }
    rec.queries = trace.queries;
    rec.ledger = objective.usage();
    rec.success = success;
    if (config.holdout && !buffer.empty()) rec.holdout_asr = config.holdout(vocab.canonicalize(buffer.best().seq));
    trace.iterations.push_back(rec);
  };
  auto finish = [&](Outcome outcome, std::optional<TokenSeq> winner, std::optional<double> winner_loss) {
    trace.outcome = outcome;
    if (winner) {
      trace.final_prompt = vocab.canonicalize(*winner);
      trace.final_loss = winner_loss;
    } else if (!buffer.empty()) {
      trace.final_prompt = vocab.canonicalize(buffer.best().seq);
      trace.final_loss = buffer.best().loss;
    }
    trace.final_buffer = buffer.sorted();
    return trace;
  };
  // Success checks cost a generation each, so a prompt is checked at most once.
  auto check = [&](const TokenSeq& canon) {
    if (!config.stop_on_success || !checked.insert(canon).second) return false;
    return objective.success(canon);
  };

  try {
    std::vector<TokenSeq> seeds;
    if (config.init == InitKind::Repeat) {
      auto seed = objective.repeat_seed(m);
      if (!seed) throw ConfigError("objective does not support repeat initialization");
      seeds.push_back(std::move(*seed));
    } else if (config.init == InitKind::Given) {
      seeds.push_back(config.given);
    }
    if (!seeds.empty() && check(vocab.canonicalize(seeds.front()))) {
      record(true);
      return finish(Outcome::Success, seeds.front(), std::nullopt);
    }
    while (seeds.size() < config.buffer_size) seeds.push_back(detail::uniform_prompt(rng, m, n));

    std::vector<TokenSeq> canon;
    for (const auto& s : seeds) canon.push_back(vocab.canonicalize(s));
    const auto losses = detail::score_all(objective, canon);
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      ++trace.queries;
      trace.decisions.push_back(buffer.try_insert({seeds[i], losses[i].loss}));
    }
    global_best = buffer.best().loss;
    if (check(vocab.canonicalize(buffer.best().seq))) {
      record(true);
      return finish(Outcome::Success, buffer.best().seq, buffer.best().loss);
    }
    record(false);

    const std::size_t expand = objective.has_proxy() ? config.proxy_batch : config.query_batch;
    for (iteration = 1; iteration <= config.iterations; ++iteration) {
      const TokenSeq parent_seq = buffer.best().seq;
      const TokenSeq parent = vocab.canonicalize(parent_seq);

      std::vector<TokenSeq> batch;
      batch.reserve(expand);
      for (std::size_t i = 0; i < expand; ++i) batch.push_back(detail::mutate(rng, parent_seq, n));

      std::vector<std::size_t> order(batch.size());
      std::iota(order.begin(), order.end(), 0);
      if (objective.has_proxy()) {
        std::vector<double> ploss(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) ploss[i] = objective.proxy_loss(batch[i]);
        const std::size_t keep = std::min(config.query_batch, batch.size());
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                          [&](std::size_t a, std::size_t b) {
                            return ploss[a] < ploss[b] || (ploss[a] == ploss[b] && a < b);
                          });
        order.resize(keep);
      }

      const std::size_t chunk = std::max<std::size_t>(1, objective.batch_size());
      for (std::size_t start = 0; start < order.size(); start += chunk) {
        const std::size_t k = std::min(chunk, order.size() - start);
        std::vector<TokenSeq> canon_chunk;
        for (std::size_t i = 0; i < k; ++i) canon_chunk.push_back(vocab.canonicalize(batch[order[start + i]]));
        std::optional<double> stop;
        if (config.short_circuit && buffer.full()) stop = buffer.worst().loss;
        const auto scored = objective.evaluate(canon_chunk, stop, &parent);
        for (std::size_t i = 0; i < k; ++i) {
          ++trace.queries;
          const TokenSeq& cand = batch[order[start + i]];
          const double loss = scored[i].loss;
          const bool accepted = buffer.try_insert({cand, loss});
          trace.decisions.push_back(accepted);
          if (accepted && loss < global_best) {
            global_best = loss;
            if (check(canon_chunk[i])) {
              record(true);
              return finish(Outcome::Success, cand, loss);
            }
          }
        }
      }
      record(false);
    }
    iteration = config.iterations;
    return finish(Outcome::IterationsExhausted, std::nullopt, std::nullopt);
  } catch (const BudgetExceeded&) {
    record(false);
    return finish(Outcome::BudgetExhausted, std::nullopt, std::nullopt);
  }
}

namespace detail {

/// Shared driver for the two proxy-free variants. `propose` fills the
/// candidate list for one iteration given the incumbent and a scorer.
template <class Propose>
AttackTrace incumbent_search(Objective& objective, const VariantConfig& config, Propose&& propose) {
  config.validate();
  const Vocabulary& vocab = objective.vocab();
  Rng rng(config.seed);
  AttackTrace trace;
  TokenSeq incumbent = config.initial ? *config.initial : uniform_prompt(rng, config.suffix_length, vocab.size());
  double incumbent_loss = 0.0;
  std::size_t iteration = 0;
  std::set<TokenSeq> checked;

  auto record = [&](bool success) {
    IterationRecord rec;
    rec.iteration = iteration;
    rec.best_loss = incumbent_loss;
    rec.worst_loss = incumbent_loss;
    rec.queries = trace.queries;
    rec.ledger = objective.usage();
    rec.success = success;
    trace.iterations.push_back(rec);
  };
  auto finish = [&](Outcome outcome) {
    trace.outcome = outcome;
    trace.final_prompt = vocab.canonicalize(incumbent);
    trace.final_loss = incumbent_loss;
    trace.final_buffer = {{incumbent, incumbent_loss}};
    return trace;
  };
  auto check = [&](const TokenSeq& canon) { return checked.insert(canon).second && objective.success(canon); };
  auto score = [&](std::span<const TokenSeq> cands) {
    std::vector<TokenSeq> canon;
    for (const auto& c : cands) canon.push_back(vocab.canonicalize(c));
    auto losses = score_all(objective, canon);
    trace.queries += cands.size();
    std::vector<double> out;
    for (const auto& l : losses) out.push_back(l.loss);
    return out;
  };

  try {
    const TokenSeq init_canon = vocab.canonicalize(incumbent);
    incumbent_loss = score_all(objective, std::span<const TokenSeq>(&init_canon, 1)).front().loss;
    if (check(init_canon)) {
      record(true);
      return finish(Outcome::Success);
    }
    record(false);
    for (iteration = 1; iteration <= config.iterations; ++iteration) {
      std::vector<TokenSeq> cands;
      std::vector<double> losses;
      propose(rng, incumbent, score, cands, losses);
      std::size_t best = 0;
      for (std::size_t i = 1; i < losses.size(); ++i)
        if (losses[i] < losses[best]) best = i;
      const bool improved = !losses.empty() && losses[best] < incumbent_loss;
      trace.decisions.push_back(improved);
      if (improved) {
        incumbent = cands[best];
        incumbent_loss = losses[best];
        if (check(vocab.canonicalize(incumbent))) {
          record(true);
          return finish(Outcome::Success);
        }
      }
      record(false);
    }
    iteration = config.iterations;
    return finish(Outcome::IterationsExhausted);
  } catch (const BudgetExceeded&) {
    record(false);
    return finish(Outcome::BudgetExhausted);
  }
}

}  // namespace detail

inline AttackTrace greedy_query_only(Objective& objective, const VariantConfig& config) {
  const std::size_t n = objective.vocab().size();
  return detail::incumbent_search(
      objective, config,
      [&](Rng& rng, const TokenSeq& incumbent, auto& score, std::vector<TokenSeq>& cands, std::vector<double>& losses) {
        for (std::size_t i = 0; i < config.batch; ++i) cands.push_back(detail::mutate(rng, incumbent, n));
        losses = score(cands);
      });
}

inline AttackTrace position_first(Objective& objective, const VariantConfig& config) {
  const std::size_t n = objective.vocab().size();
  return detail::incumbent_search(
      objective, config,
      [&](Rng& rng, const TokenSeq& incumbent, auto& score, std::vector<TokenSeq>& cands, std::vector<double>& losses) {
        const std::size_t l = incumbent.size();
        for (std::size_t pos = 0; pos < l; ++pos) {
          TokenSeq c = incumbent;
          c[pos] = detail::replacement(rng, n, c[pos]);
          cands.push_back(std::move(c));
        }
        losses = score(cands);
        std::size_t focus = 0;
        for (std::size_t pos = 1; pos < l; ++pos)
          if (losses[pos] < losses[focus]) focus = pos;
        std::vector<TokenSeq> focused;
        for (std::size_t i = 0; i < config.focused_batch; ++i) {
          TokenSeq c = incumbent;
          c[focus] = detail::replacement(rng, n, c[focus]);
          focused.push_back(std::move(c));
        }
        const auto more = score(focused);
        cands.insert(cands.end(), focused.begin(), focused.end());
        losses.insert(losses.end(), more.begin(), more.end());
      });
}

struct ReproductionRate {
  std::size_t reproduced = 0;
  std::size_t total = 0;
  double rate() const { return static_cast<double>(reproduced) / static_cast<double>(total); }
};

struct Solution {
  TokenSeq prompt;
  TokenSeq target;
};

/// Re-runs the success check once per solution.
inline ReproductionRate reevaluate(LanguageOracle& oracle, std::span<const Solution> solutions) {
  if (solutions.empty()) throw EmptyInput("no solutions to re-evaluate");
  ReproductionRate r;
  r.total = solutions.size();
  for (const auto& s : solutions)
    if (success_check(oracle, s.prompt, s.target)) ++r.reproduced;
  return r;
}

}  // namespace gcq
