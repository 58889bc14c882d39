#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <memory>

#include "gcq/loss.hpp"

using namespace gcq;

namespace {

std::shared_ptr<const ToyLM> structured_lm(double beta = 0.0) {
  ToyLmConfig c;
  c.corpus_tokens = 20000;
  c.beta = beta;
  return std::make_shared<const ToyLM>(ToyLM::build(c));
}

TokenSeq random_seq(Rng& rng, std::size_t len, std::size_t n = 64) {
  TokenSeq s(len);
  for (auto& t : s) t = static_cast<TokenId>(uniform_index(rng, n));
  return s;
}

// Independent greedy rollout straight from the logits.
TokenSeq rollout(const ToyLM& lm, TokenSeq ctx, std::size_t n) {
  TokenSeq out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto logits = lm.next_logits(ctx);
    TokenId best = 0;
    for (TokenId t = 1; t < logits.size(); ++t)
      if (logits[t] > logits[best]) best = t;
    out.push_back(best);
    ctx.push_back(best);
  }
  return out;
}

}  // namespace

TEST(InitRepeat, Examples) {
  const TokenSeq xyz{1, 2, 3};
  EXPECT_EQ(init_repeat(xyz, 6), (TokenSeq{1, 2, 3, 1, 2, 3}));
  EXPECT_EQ(init_repeat(xyz, 7), (TokenSeq{3, 1, 2, 3, 1, 2, 3}));
  EXPECT_EQ(init_repeat({1, 2, 3, 4, 5}, 3), (TokenSeq{3, 4, 5}));
  EXPECT_THROW(init_repeat({}, 3), EmptyInput);
}

TEST(InitRepeat, MatchesConcatenationDefinition) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto target = random_seq(rng, 1 + uniform_index(rng, 7));
    const std::size_t m = 1 + uniform_index(rng, 25);
    TokenSeq copies;
    const std::size_t k = (m + target.size() - 1) / target.size();
    for (std::size_t c = 0; c < k; ++c) copies.insert(copies.end(), target.begin(), target.end());
    EXPECT_EQ(init_repeat(target, m), TokenSeq(copies.end() - static_cast<std::ptrdiff_t>(m), copies.end()));
  }
}

TEST(TargetLoss, EmptyTargetIsZero) {
  auto lm = structured_lm();
  LocalOracle o(*lm);
  EXPECT_EQ(target_loss(o, {1, 2}, {}).loss, 0.0);
  EXPECT_EQ(o.usage().requests, 0u);
}

TEST(TargetLoss, LocalAndRemoteMatchModel) {
  auto lm = structured_lm(1.0);
  LocalOracle local(*lm);
  MockServer server(lm, ApiEra::BiasedTopK);
  InProcessTransport tr(server);
  ApiClient client(tr);
  RemoteOracle remote(client, {ApiEra::BiasedTopK, 64});
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const auto prompt = random_seq(rng, 10);
    const auto target = random_seq(rng, 1 + uniform_index(rng, 6));
    double exact = 0.0;
    TokenSeq ctx = prompt;
    for (TokenId t : target) {
      exact -= lm->conditional_logprob(ctx, t);
      ctx.push_back(t);
    }
    const double tol = 1e-9 * static_cast<double>(target.size());
    EXPECT_NEAR(target_loss(local, prompt, target).loss, exact, tol);
    EXPECT_NEAR(target_loss(remote, prompt, target).loss, exact, tol);
    EXPECT_GE(target_loss(local, prompt, target).loss, 0.0);
  }
}

TEST(TargetLoss, ShortCircuitDecisionMatchesFullScoring) {
  auto lm = structured_lm();
  MockServer server(lm, ApiEra::BiasedTopK);
  InProcessTransport tr(server);
  ApiClient client(tr);
  RemoteOracle remote(client, {ApiEra::BiasedTopK, 64});
  LocalOracle local(*lm);
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const auto prompt = random_seq(rng, 10);
    const auto target = random_seq(rng, 5);
    const double full = target_loss(local, prompt, target).loss;
    const double worst = full * (0.5 + uniform_unit(rng));
    for (LanguageOracle* o : {static_cast<LanguageOracle*>(&local), static_cast<LanguageOracle*>(&remote)}) {
      const auto sc = target_loss(*o, prompt, target, worst);
      EXPECT_LE(sc.loss, full + 1e-9);
      EXPECT_EQ(sc.loss <= worst, full <= worst);
    }
  }
}

TEST(LocalOracle, ChargesLikeTheEndpoint) {
  auto lm = structured_lm();
  LocalOracle o(*lm);
  target_loss(o, TokenSeq(20, 1), {1, 2, 3, 4});
  EXPECT_EQ(o.usage().prompt_tokens, 80u);
  EXPECT_EQ(o.usage().completion_tokens, 10u);
  success_check(o, TokenSeq(20, 1), {1, 2, 3});
  EXPECT_EQ(o.usage().completion_tokens, 13u);
  EXPECT_EQ(o.usage().requests, 5u);
}

TEST(UniversalLoss, MeanOfTargets) {
  auto lm = structured_lm();
  LocalOracle o(*lm);
  const TokenSeq suffix{4, 5, 6};
  const std::vector<UniversalItem> one{{{1}, {7, 8}}};
  EXPECT_DOUBLE_EQ(universal_loss(o, suffix, one), target_loss(o, {1, 4, 5, 6}, {7, 8}).loss);
  std::vector<UniversalItem> items{{{1}, {7, 8}}, {{2, 3}, {9}}, {{}, {10, 11, 12}}};
  double mean = 0.0;
  for (const auto& it : items) mean += target_loss(o, concat(it.payload, suffix), it.target).loss;
  mean /= 3.0;
  EXPECT_NEAR(universal_loss(o, suffix, items), mean, 1e-12);
  std::reverse(items.begin(), items.end());
  EXPECT_NEAR(universal_loss(o, suffix, items), mean, 1e-12);
  EXPECT_THROW(universal_loss(o, suffix, std::vector<UniversalItem>{}), EmptyInput);
}

namespace {

// Objective with fixed per-prompt losses, for exercising universal averaging.
struct FixedOracle final : LanguageOracle {
  std::map<TokenSeq, double> table;
  ScoredLoss target_loss(const TokenSeq& prompt, const TokenSeq&, std::optional<double>, const TokenSeq*) override {
    return {table.at(prompt), false};
  }
  TokenSeq generate(const TokenSeq&, std::size_t n) override { return TokenSeq(n, 0); }
  LedgerSnapshot usage() const override { return {}; }
};

}  // namespace

TEST(UniversalLoss, TwoTargetsAverage) {
  FixedOracle o;
  o.table[{1, 9}] = 1.0;
  o.table[{2, 9}] = 3.0;
  const std::vector<UniversalItem> items{{{1}, {5}}, {{2}, {5}}};
  EXPECT_DOUBLE_EQ(universal_loss(o, {9}, items), 2.0);
}

TEST(ModerationLoss, SumOfScores) {
  Vocabulary v({"a", "b"});
  auto logit = [](double p) { return std::log(p / (1 - p)); };
  ModerationModel m(v, {{"x", {logit(0.3), 0.0}, 0.0, 0.9}, {"y", {logit(0.2), 0.0}, 0.0, 0.1}});
  LocalModerationEndpoint ep(m);
  EXPECT_NEAR(moderation_loss(ep, "a"), 0.5, 1e-12);
  EXPECT_GT(moderation_loss(ep, "b"), 0.0);
  ModerationModel zero(v, {{"x", {-40.0, -40.0}, -40.0, 0.5}});
  LocalModerationEndpoint ep0(zero);
  EXPECT_NEAR(moderation_loss(ep0, "ab"), 0.0, 1e-12);
}

TEST(SuccessCheck, CopyProneModelReproducesRepeatedTarget) {
  ToyLmConfig c;
  c.corpus_tokens = 20000;
  c.beta = 25.0;
  const auto lm = ToyLM::build(c);
  LocalOracle o(lm);
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const auto target = random_seq(rng, 1 + uniform_index(rng, 8));
    EXPECT_TRUE(success_check(o, concat(target, target), target));
  }
  EXPECT_TRUE(success_check(o, {1, 2}, {}));
}

TEST(SuccessCheck, AgreesWithRollout) {
  auto lm = structured_lm(2.0);
  LocalOracle o(*lm);
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    const auto prompt = random_seq(rng, 10);
    const auto guess = random_seq(rng, 5);
    const auto truth = rollout(*lm, prompt, 5);
    EXPECT_TRUE(success_check(o, prompt, truth));
    EXPECT_EQ(success_check(o, prompt, guess), guess == truth);
  }
}

TEST(ModerationObjective, PacksBatchesOf32) {
  const auto v = make_default_vocabulary();
  const auto m = ModerationModel::random(v, 5, 1);
  LocalModerationEndpoint ep(m);
  std::vector<std::string> payloads(20, "abc");
  ModerationObjective obj(ep, v, payloads);
  std::vector<TokenSeq> prompts(32, TokenSeq{1, 2});
  const auto losses = obj.evaluate(prompts, std::nullopt, nullptr);
  EXPECT_EQ(losses.size(), 32u);
  EXPECT_EQ(obj.usage().requests, 20u);  // 640 texts
  EXPECT_NEAR(losses[0].loss, m.classify("abc" + v.detokenize({1, 2})).score_sum(), 1e-12);
}

TEST(ModerationObjective, SuccessMeansNoFlags) {
  const auto v = make_default_vocabulary();
  const auto m = ModerationModel::random(v, 5, 1);
  LocalModerationEndpoint ep(m);
  ModerationObjective obj(ep, v, {"ab", "cd"});
  const TokenSeq s{3, 4};
  EXPECT_EQ(obj.success(s), !m.classify("ab" + v.detokenize(s)).flagged() && !m.classify("cd" + v.detokenize(s)).flagged());
}
