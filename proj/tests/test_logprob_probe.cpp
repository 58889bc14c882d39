#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <memory>

#include "gcq/logprob_probe.hpp"

using namespace gcq;

namespace {

std::shared_ptr<const ToyLM> structured_lm(double beta = 1.0) {
  ToyLmConfig c;
  c.corpus_tokens = 20000;
  c.beta = beta;
  return std::make_shared<const ToyLM>(ToyLM::build(c));
}

struct Rig {
  MockServer server;
  InProcessTransport transport;
  ApiClient client;
  LogprobProbe probe;
  Rig(std::shared_ptr<const ToyLM> lm, ApiEra era)
      : server(std::move(lm), era), transport(server), client(transport), probe(client, {era, 64}) {}
};

// Forward simulation of a 3-token softmax with a bias on one token.
double biased_prob(std::vector<double> p, std::size_t k, double b) {
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] * (i == k ? std::exp(b) : 1.0);
  return p[k] * std::exp(b) / z;
}

TokenSeq random_seq(Rng& rng, std::size_t len) {
  TokenSeq s(len);
  for (auto& t : s) t = static_cast<TokenId>(uniform_index(rng, 64));
  return s;
}

}  // namespace

TEST(Unbias, IdentityAtZeroBias) {
  for (double p : {1e-6, 0.1, 0.5, 0.9}) EXPECT_DOUBLE_EQ(unbias(p, 0.0), p);
}

TEST(Unbias, ThreeTokenExample) {
  const double q = biased_prob({0.7, 0.2, 0.1}, 2, std::log(4.0));
  EXPECT_NEAR(q, 0.4 / 1.3, 1e-15);
  EXPECT_NEAR(unbias(q, std::log(4.0)), 0.1, 1e-15);
}

TEST(Unbias, RoundTrip) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double p = 1e-6 + (1 - 2e-6) * uniform_unit(rng);
    const double b = 40.0 * uniform_unit(rng) - 20.0;
    EXPECT_NEAR(std::exp(unbias_log(bias_apply_log(std::log(p), b), b)), p, 1e-12);
    EXPECT_NEAR(std::exp(bias_apply_log(std::log(p), b)), biased_prob({p, 1 - p}, 0, b), 1e-12);
    EXPECT_NEAR(bias_apply(p, b), biased_prob({p, 1 - p}, 0, b), 1e-12);
  }
}

TEST(Unbias, ProbabilityDomainLosesPrecisionNearOne) {
  // q = bias_apply(0.5, 20) is within 3e-9 of 1; its complement keeps only
  // about 8 significant digits as a double, the logprob keeps all of them
  const double q = bias_apply(0.5, 20.0);
  EXPECT_GT(std::abs(unbias(q, 20.0) - 0.5), 1e-12);
  EXPECT_NEAR(std::exp(unbias_log(bias_apply_log(std::log(0.5), 20.0), 20.0)), 0.5, 1e-15);
  // moderate biases are fine either way
  EXPECT_NEAR(unbias(bias_apply(0.3, 2.0), 2.0), 0.3, 1e-14);
}

TEST(Unbias, DegenerateInputs) {
  EXPECT_THROW(unbias(0.0, 1.0), DegenerateProbability);
  EXPECT_THROW(unbias(1.0, 1.0), DegenerateProbability);
  EXPECT_THROW(unbias_log(0.0, 1.0), DegenerateProbability);
  EXPECT_THROW(unbias_log(-std::numeric_limits<double>::infinity(), 1.0), DegenerateProbability);
}

TEST(InferTokenLogprob, TopTokenWithExactEstimateNeedsOneQuery) {
  Rig rig(structured_lm(), ApiEra::BiasedTopK);
  const TokenSeq prompt{3, 7};
  const TokenId top = rig.server.model().greedy_generate(prompt, 1)[0];
  const double exact = rig.server.model().conditional_logprob(prompt, top);
  const auto est = rig.probe.infer_token_logprob(prompt, {}, top, exact);
  EXPECT_EQ(est.method, ProbeMethod::BiasedTop5);
  EXPECT_EQ(est.queries_used, 1u);
  EXPECT_NEAR(est.value, exact, 1e-12);
}

TEST(InferTokenLogprob, BiasedEraMatchesModel) {
  Rig rig(structured_lm(), ApiEra::BiasedTopK);
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const auto prompt = random_seq(rng, 1 + uniform_index(rng, 10));
    const auto prefix = random_seq(rng, uniform_index(rng, 4));
    const auto token = static_cast<TokenId>(uniform_index(rng, 64));
    TokenSeq ctx = prompt;
    ctx.insert(ctx.end(), prefix.begin(), prefix.end());
    const auto est = rig.probe.infer_token_logprob(prompt, prefix, token);
    EXPECT_NEAR(est.value, rig.server.model().conditional_logprob(ctx, token), 1e-9);
  }
}

TEST(InferTokenLogprob, UnbiasedEraWithinTolerance) {
  Rig rig(structured_lm(), ApiEra::UnbiasedTopK);
  Rng rng(6);
  for (int i = 0; i < 100; ++i) {
    const auto prompt = random_seq(rng, 1 + uniform_index(rng, 10));
    const auto token = static_cast<TokenId>(uniform_index(rng, 64));
    const auto est = rig.probe.infer_token_logprob(prompt, {}, token);
    EXPECT_NEAR(est.value, rig.server.model().conditional_logprob(prompt, token), 1e-3);
  }
}

TEST(InferTokenLogprob, BadEstimateFallsBack) {
  for (ApiEra era : {ApiEra::BiasedTopK, ApiEra::UnbiasedTopK}) {
    Rig rig(structured_lm(), era);
    const TokenSeq prompt{12};
    const auto lps = log_softmax(rig.server.model().next_logits(prompt));
    const auto last = static_cast<TokenId>(std::min_element(lps.begin(), lps.end()) - lps.begin());
    // estimate claims the token is e^10 times more likely than it is
    const auto est = rig.probe.infer_token_logprob(prompt, {}, last, lps[last] + 10.0);
    EXPECT_GT(est.queries_used, 1u);
    EXPECT_EQ(est.method, ProbeMethod::BinarySearch);
    EXPECT_NEAR(est.value, lps[last], era == ApiEra::BiasedTopK ? 1e-9 : 1e-3);
    // and the opposite direction
    const auto est2 = rig.probe.infer_token_logprob(prompt, {}, last, lps[last] - 10.0);
    EXPECT_NEAR(est2.value, lps[last], era == ApiEra::BiasedTopK ? 1e-9 : 1e-3);
  }
}

TEST(InferTokenLogprob, SaturationTriggersLowerBias) {
  // a near-certain token with a wildly pessimistic estimate saturates first
  ToyLmConfig c;
  c.vocab_size = 64;
  c.lambda = 0.0;
  c.alpha = 1e-12;
  std::vector<double> uni(64, 1e-6);
  uni[9] = 1.0;
  auto lm = std::make_shared<const ToyLM>(ToyLM::from_counts(c, {}, uni));
  Rig rig(lm, ApiEra::BiasedTopK);
  const auto est = rig.probe.infer_token_logprob({0}, {}, 9, -60.0);
  EXPECT_GT(est.queries_used, 1u);
  EXPECT_NEAR(est.value, lm->conditional_logprob({0}, 9), 1e-9);
}

TEST(InferTokenLogprob, EchoEra) {
  Rig rig(structured_lm(), ApiEra::PromptLogprobs);
  const auto est = rig.probe.infer_token_logprob({4, 5}, {6}, 7);
  EXPECT_EQ(est.method, ProbeMethod::Direct);
  EXPECT_NEAR(est.value, rig.server.model().conditional_logprob({4, 5, 6}, 7), 1e-12);
}

TEST(CumulativeLogprob, EmptyTargetIsFree) {
  Rig rig(structured_lm(), ApiEra::BiasedTopK);
  const auto r = rig.probe.cumulative_logprob({1, 2}, {});
  EXPECT_EQ(r.value, 0.0);
  EXPECT_EQ(rig.client.ledger().requests(), 0u);
}

TEST(CumulativeLogprob, CostModel) {
  Rig rig(structured_lm(), ApiEra::BiasedTopK);
  Rng rng(3);
  const auto prompt = random_seq(rng, 20);
  const TokenSeq target{5, 9, 1, 30};
  // score once to seed the cache, then again with the prompt as its own parent
  rig.probe.cumulative_logprob(prompt, target);
  const auto r = rig.probe.cumulative_logprob(prompt, target, std::nullopt, &prompt);
  EXPECT_EQ(r.cost.prompt_tokens, 80u);
  EXPECT_EQ(r.cost.completion_tokens, 10u);
  EXPECT_EQ(r.cost.requests, 4u);
}

TEST(CumulativeLogprob, MatchesModel) {
  for (ApiEra era : {ApiEra::PromptLogprobs, ApiEra::BiasedTopK, ApiEra::UnbiasedTopK}) {
    Rig rig(structured_lm(), era);
    Rng rng(9);
    for (int i = 0; i < 30; ++i) {
      const auto prompt = random_seq(rng, 1 + uniform_index(rng, 12));
      const auto target = random_seq(rng, 1 + uniform_index(rng, 6));
      const auto r = rig.probe.cumulative_logprob(prompt, target);
      const double exact = rig.server.model().cumulative_logprob(prompt, target);
      const double tol = era == ApiEra::UnbiasedTopK ? 1e-3 : 1e-9;
      EXPECT_NEAR(r.value, exact, tol * static_cast<double>(target.size()));
    }
  }
}

TEST(CumulativeLogprob, ShortCircuitIsSound) {
  Rig rig(structured_lm(), ApiEra::BiasedTopK);
  Rng rng(10);
  std::size_t stopped = 0;
  for (int i = 0; i < 100; ++i) {
    const auto prompt = random_seq(rng, 8);
    const auto target = random_seq(rng, 6);
    const double exact = rig.server.model().cumulative_logprob(prompt, target);
    const double stop = exact * uniform_unit(rng);
    const auto r = rig.probe.cumulative_logprob(prompt, target, stop);
    if (r.short_circuited) {
      ++stopped;
      EXPECT_LT(r.value, stop);
      EXPECT_LT(r.tokens_scored, target.size());
    }
    EXPECT_GE(r.value, exact - 1e-9);
  }
  EXPECT_GT(stopped, 20u);
}

TEST(CumulativeLogprob, ParentEstimatesGiveFirstProbeHits) {
  Rig rig(structured_lm(), ApiEra::BiasedTopK);
  Rng rng(11);
  const auto target = random_seq(rng, 5);
  auto parent = random_seq(rng, 20);
  rig.probe.cumulative_logprob(parent, target);
  for (int i = 0; i < 200; ++i) {
    auto child = parent;
    child[uniform_index(rng, child.size())] = static_cast<TokenId>(uniform_index(rng, 64));
    rig.probe.cumulative_logprob(child, target, std::nullopt, &parent);
    if (i % 10 == 0) parent = child;
  }
  const auto& st = rig.probe.stats();
  ASSERT_GT(st.informed_probes, 500u);
  EXPECT_GE(static_cast<double>(st.informed_first_hits) / static_cast<double>(st.informed_probes), 0.99);
}

TEST(CumulativeLogprob, BudgetErrorMidSearch) {
  auto lm = structured_lm();
  MockServer server(lm, ApiEra::BiasedTopK);
  InProcessTransport tr(server);
  CostLedger l;
  l.max_requests = 3;
  ApiClient client(tr, l);
  LogprobProbe probe(client, {ApiEra::BiasedTopK, 64});
  EXPECT_THROW(probe.cumulative_logprob({1, 2, 3}, {4, 5, 6, 7, 8}), BudgetExceeded);
  EXPECT_LE(client.ledger().requests(), 3u);
}
