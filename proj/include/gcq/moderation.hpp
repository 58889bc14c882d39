#pragma once

// Offline stand-in for a content-moderation endpoint: each category is a
// logistic model over the bag of token ids of the text.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gcq/errors.hpp"
#include "gcq/rng.hpp"
#include "gcq/vocab.hpp"

namespace gcq {

inline constexpr std::size_t kMaxModerationBatch = 32;

struct ModerationCategory {
  std::string name;
  std::vector<double> weights;  // one per token id
  double bias = 0.0;
  double threshold = 0.5;       // in (0,1)
};

struct CategoryScore {
  std::string name;
  double score = 0.0;
  bool flagged = false;
};

struct ModerationResult {
  std::vector<CategoryScore> categories;

  bool flagged() const {
    return std::any_of(categories.begin(), categories.end(), [](const auto& c) { return c.flagged; });
  }
  /// Sum of category scores; thresholds play no part.
  double score_sum() const {
    double s = 0.0;
    for (const auto& c : categories) s += c.score;
    return s;
  }
};

class ModerationModel {
 public:
  ModerationModel(Vocabulary vocab, std::vector<ModerationCategory> categories)
      : vocab_(std::move(vocab)), categories_(std::move(categories)) {
    for (const auto& c : categories_) {
      if (c.weights.size() != vocab_.size())
        throw ConfigError("category '" + c.name + "' weight vector does not match vocabulary");
      if (!(c.threshold > 0.0 && c.threshold < 1.0))
        throw ConfigError("category '" + c.name + "' threshold must lie in (0,1)");
    }
  }

  /// Random model: a block of "trigger" tokens with positive weight in some
  /// categories and a block of "benign" tokens with negative weight in all.
  static ModerationModel random(const Vocabulary& vocab, std::size_t n_categories, std::uint64_t seed) {
    const std::size_t n = vocab.size();
    Rng rng(mix_seed(seed, 11));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    const std::size_t n_trigger = std::max<std::size_t>(1, n / 5);
    const std::size_t n_benign = std::max<std::size_t>(1, n / 8);
    std::vector<ModerationCategory> cats;
    for (std::size_t c = 0; c < n_categories; ++c) {
      ModerationCategory cat;
      cat.name = "category_" + std::to_string(c);
      cat.weights.assign(n, 0.0);
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t t = order[r];
        if (r < n_trigger) {
          cat.weights[t] = uniform_unit(rng) < 0.6 ? 0.5 + uniform_unit(rng) : 0.1 * uniform_unit(rng);
        } else if (r < n_trigger + n_benign) {
          cat.weights[t] = -(0.3 + 0.5 * uniform_unit(rng));
        } else {
          cat.weights[t] = 0.1 * (uniform_unit(rng) - 0.5);
        }
      }
      cat.bias = -3.0 - uniform_unit(rng);
      cat.threshold = 0.3 + 0.4 * uniform_unit(rng);
      cats.push_back(std::move(cat));
    }
    return ModerationModel(vocab, std::move(cats));
  }

  const Vocabulary& vocab() const noexcept { return vocab_; }
  const std::vector<ModerationCategory>& categories() const noexcept { return categories_; }
  std::vector<ModerationCategory>& categories() noexcept { return categories_; }

  /// Raw category scores without flags.
  std::vector<double> scores(std::string_view text) const {
    const TokenSeq ids = vocab_.tokenize(text);
    std::vector<double> out;
    out.reserve(categories_.size());
    for (const auto& c : categories_) {
      double z = c.bias;
      for (TokenId t : ids) z += c.weights[t];
      out.push_back(1.0 / (1.0 + std::exp(-z)));
    }
    return out;
  }

  ModerationResult classify(std::string_view text) const {
    const auto s = scores(text);
    ModerationResult r;
    for (std::size_t c = 0; c < categories_.size(); ++c)
      r.categories.push_back({categories_[c].name, s[c], s[c] > categories_[c].threshold});
    return r;
  }

  /// Batched classification with the endpoint's batch cap.
  std::vector<ModerationResult> moderate(std::span<const std::string> texts) const {
    if (texts.size() > kMaxModerationBatch)
      throw ProtocolError("batch_too_large", "at most " + std::to_string(kMaxModerationBatch) +
                                                 " inputs per moderation request");
    std::vector<ModerationResult> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(classify(t));
    return out;
  }

  /// Mean weight of a token across categories; large values mark trigger tokens.
  double mean_weight(TokenId t) const {
    double s = 0.0;
    for (const auto& c : categories_) s += c.weights.at(t);
    return categories_.empty() ? 0.0 : s / static_cast<double>(categories_.size());
  }

 private:
  Vocabulary vocab_;
  std::vector<ModerationCategory> categories_;
};

struct LabeledText {
  std::string text;
  bool should_flag = false;
};

namespace detail {

inline double quantile(std::vector<double> sorted, double q) {
  if (sorted.empty()) return 0.5;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

}  // namespace detail

/// Fits per-category thresholds so the flagged fraction of `corpus` matches
/// its labeled fraction within 5 percentage points. All categories share one
/// quantile level of their own score distribution, so thresholds differ per
/// category. Weights are left unchanged.
inline ModerationModel calibrate(ModerationModel model, std::span<const LabeledText> corpus) {
  if (corpus.empty()) throw EmptyInput("calibration corpus is empty");
  const std::size_t n_cat = model.categories().size();
  if (n_cat == 0) throw CalibrationError("model has no categories");
  std::vector<std::vector<double>> per_text;
  std::vector<std::vector<double>> per_cat(n_cat);
  std::size_t labeled = 0;
  for (const auto& item : corpus) {
    per_text.push_back(model.scores(item.text));
    for (std::size_t c = 0; c < n_cat; ++c) per_cat[c].push_back(per_text.back()[c]);
    labeled += item.should_flag ? 1 : 0;
  }
  for (auto& v : per_cat) std::sort(v.begin(), v.end());
  const double target = static_cast<double>(labeled) / static_cast<double>(corpus.size());

  auto thresholds_at = [&](double q) {
    std::vector<double> th(n_cat);
    for (std::size_t c = 0; c < n_cat; ++c) {
      if (q >= 1.0) {
        th[c] = 0.5 * (per_cat[c].back() + 1.0);
      } else {
        th[c] = detail::quantile(per_cat[c], q);
      }
      th[c] = std::clamp(th[c], 1e-12, 1.0 - 1e-12);
    }
    return th;
  };
  auto rate_at = [&](const std::vector<double>& th) {
    std::size_t flagged = 0;
    for (const auto& s : per_text) {
      for (std::size_t c = 0; c < n_cat; ++c) {
        if (s[c] > th[c]) {
          ++flagged;
          break;
        }
      }
    }
    return static_cast<double>(flagged) / static_cast<double>(per_text.size());
  };

  // Flag rate is non-increasing in q.
  double lo = 0.0, hi = 1.0;
  std::vector<double> best = thresholds_at(1.0);
  double best_gap = std::abs(rate_at(best) - target);
  for (int iter = 0; iter < 60 && best_gap > 0.0; ++iter) {
    const double mid = 0.5 * (lo + hi);
    const auto th = thresholds_at(mid);
    const double rate = rate_at(th);
    const double gap = std::abs(rate - target);
    if (gap < best_gap) {
      best_gap = gap;
      best = th;
    }
    if (rate > target) lo = mid;
    else hi = mid;
  }
  if (best_gap > 0.05)
    throw CalibrationError("cannot reach labeled flag fraction within 5 percentage points");
  for (std::size_t c = 0; c < n_cat; ++c) model.categories()[c].threshold = best[c];
  return model;
}

/// Synthetic harmful-string analogs: flagged-intent strings draw heavily from
/// the model's trigger tokens, the rest from low-weight tokens.
inline std::vector<LabeledText> make_moderation_corpus(const ModerationModel& model, std::size_t count,
                                                       double flag_fraction, std::uint64_t seed) {
  const auto& vocab = model.vocab();
  const std::size_t n = vocab.size();
  std::vector<TokenId> by_weight(n);
  std::iota(by_weight.begin(), by_weight.end(), 0);
  std::stable_sort(by_weight.begin(), by_weight.end(),
                   [&](TokenId a, TokenId b) { return model.mean_weight(a) > model.mean_weight(b); });
  const std::size_t n_trigger = std::max<std::size_t>(1, n / 5);
  std::vector<TokenId> triggers(by_weight.begin(), by_weight.begin() + static_cast<std::ptrdiff_t>(n_trigger));
  std::vector<TokenId> neutral;
  for (TokenId t : by_weight)
    if (std::abs(model.mean_weight(t)) < 0.15) neutral.push_back(t);
  if (neutral.empty()) neutral = by_weight;

  Rng rng(mix_seed(seed, 23));
  std::vector<LabeledText> out;
  for (std::size_t i = 0; i < count; ++i) {
    const bool harmful = uniform_unit(rng) < flag_fraction;
    const std::size_t len = 8 + uniform_index(rng, 13);
    TokenSeq seq;
    for (std::size_t k = 0; k < len; ++k) {
      const bool pick_trigger = harmful ? uniform_unit(rng) < 0.45 : uniform_unit(rng) < 0.05;
      const auto& pool = pick_trigger ? triggers : neutral;
      seq.push_back(pool[uniform_index(rng, pool.size())]);
    }
    out.push_back({vocab.detokenize(seq), harmful});
  }
  return out;
}

}  // namespace gcq
