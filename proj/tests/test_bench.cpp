#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "gcq/bench.hpp"

using namespace gcq;

namespace {

json small_config(const std::string& out) {
  json j = json::parse(R"({
    "seed": 3,
    "objective": "target",
    "engine": {"kind": "gcq", "prompt_length": 8, "iterations": 10, "proxy_batch": 64,
               "query_batch": 8, "buffer_size": 8, "init": "random"},
    "oracle": {"kind": "mock", "era": "biased-topk"},
    "model": {"seed": 2, "beta": 3.0, "corpus_tokens": 20000},
    "proxy": {"alt_seed": 9, "overlap": 0.7},
    "budget": {"usd": 0.01},
    "dataset": {"generate": {"count": 6, "min_length": 2, "max_length": 7, "seed": 1}}
  })");
  j["output"] = out;
  return j;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path tmpdir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("gcq_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

json record(const std::string& outcome, double spend, std::size_t iters, std::size_t len) {
  return json{{"kind", "target"}, {"outcome", outcome}, {"spend", spend},
              {"iterations", iters}, {"target_tokens", len}, {"rerun", false}};
}

}  // namespace

TEST(ExperimentConfig, RoundTripsThroughJson) {
  const auto c = ExperimentConfig::from_json(small_config("x"));
  const auto j = c.to_json();
  EXPECT_EQ(j.at("engine").at("buffer_size"), 8);
  EXPECT_EQ(j.at("model").at("lambda"), 0.95);  // default made explicit
  const auto again = ExperimentConfig::from_json(j);
  EXPECT_EQ(again.to_json(), j);
}

TEST(ExperimentConfig, ProxyBetaOverride) {
  auto j = small_config("x");
  j["proxy"] = {{"alt_seed", 5}, {"overlap", 0.5}, {"beta", 0.0}};
  const auto c = ExperimentConfig::from_json(j);
  ASSERT_TRUE(c.proxy && c.proxy->beta);
  EXPECT_EQ(*c.proxy->beta, 0.0);
  EXPECT_EQ(ExperimentConfig::from_json(c.to_json()).to_json(), c.to_json());
  j["proxy"].erase("beta");
  EXPECT_FALSE(ExperimentConfig::from_json(j).proxy->beta.has_value());
}

TEST(ExperimentConfig, RejectsUnknownKinds) {
  auto j = small_config("x");
  j["engine"]["kind"] = "annealing";
  EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
  j = small_config("x");
  j.erase("dataset");
  EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
  j = small_config("x");
  j["oracle"]["era"] = "future";
  EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
}

TEST(GenerateTargets, LengthsAndDeterminism) {
  const auto vocab = make_default_vocabulary();
  ToyLmConfig mc;
  mc.corpus_tokens = 20000;
  const auto lm = ToyLM::build(mc);
  TargetGenSpec spec{12, 1, 6, 4};
  const auto a = generate_targets(vocab, lm, spec);
  EXPECT_EQ(a, generate_targets(vocab, lm, spec));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(vocab.tokenize(a[i]).size(), 1 + i % 6);
}

TEST(TrainHoldoutSplit, ThirtyItems) {
  std::vector<int> items(30);
  std::iota(items.begin(), items.end(), 0);
  const auto [train, holdout] = train_holdout_split(items, 20, 5);
  EXPECT_EQ(train.size(), 20u);
  EXPECT_EQ(holdout.size(), 10u);
  std::set<int> all(train.begin(), train.end());
  all.insert(holdout.begin(), holdout.end());
  EXPECT_EQ(all.size(), 30u);
  EXPECT_EQ(train_holdout_split(items, 20, 5).first, train);
  EXPECT_NE(train_holdout_split(items, 20, 6).first, train);
}

TEST(RunSuite, RecordsRespectBudgetAndRerunIsByteIdentical) {
  const auto d1 = tmpdir("a"), d2 = tmpdir("b");
  const auto r1 = run_suite(ExperimentConfig::from_json(small_config(d1.string())));
  run_suite(ExperimentConfig::from_json(small_config(d2.string())));
  ASSERT_EQ(r1.size(), 6u);
  for (const auto& r : r1) {
    EXPECT_LE(r.at("spend").get<double>(), 0.01);
    EXPECT_TRUE(r.contains("final_prompt"));
    EXPECT_TRUE(r.contains("queries"));
  }
  EXPECT_EQ(slurp(d1 / "traces.jsonl"), slurp(d2 / "traces.jsonl"));
  auto c1 = json::parse(slurp(d1 / "config.json"));
  auto c2 = json::parse(slurp(d2 / "config.json"));
  c1.erase("output");
  c2.erase("output");
  EXPECT_EQ(c1, c2);
}

TEST(RunSuite, UniversalModeLogsHoldout) {
  auto j = small_config("");
  j["objective"] = "universal";
  j["train_size"] = 4;
  j["dataset"] = {{"generate", {{"count", 7}, {"min_length", 1}, {"max_length", 2}, {"seed", 2}}}};
  j["engine"]["iterations"] = 3;
  j["oracle"] = {{"kind", "local"}};
  j["budget"] = json::object();
  const auto recs = run_suite(ExperimentConfig::from_json(j));
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].at("train").size(), 4u);
  EXPECT_EQ(recs[0].at("holdout_size"), 3);
  for (const auto& it : recs[0].at("trace")) EXPECT_TRUE(it.contains("holdout_asr"));
}

TEST(EmitCurves, SingleSuccessStep) {
  const auto t = emit_curves({record("success", 0.05, 3, 4)});
  EXPECT_EQ(t.asr_vs_cost, "cost_usd\tasr\n0\t0\n0.05\t1\n");
  EXPECT_EQ(t.asr_vs_iterations, "iteration\tasr\n0\t0\n3\t1\n");
  EXPECT_THROW(emit_curves({}), EmptyInput);
}

TEST(EmitCurves, LengthBucketsPartitionSuite) {
  std::vector<json> recs;
  Rng rng(1);
  for (int i = 0; i < 40; ++i)
    recs.push_back(record(uniform_unit(rng) < 0.5 ? "success" : "budget_exhausted", uniform_unit(rng),
                          uniform_index(rng, 50), 1 + uniform_index(rng, 40)));
  const auto t = emit_curves(recs, 5);
  std::istringstream in(t.asr_by_length);
  std::string line;
  std::getline(in, line);
  std::size_t total = 0, prev_hi = 0;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::size_t lo, hi, n, s;
    row >> lo >> hi >> n >> s;
    EXPECT_GT(lo, prev_hi);
    prev_hi = hi;
    total += n;
    // recount from the raw records
    std::size_t rn = 0, rs = 0;
    for (const auto& r : recs) {
      const auto len = r.at("target_tokens").get<std::size_t>();
      if (len >= lo && len <= hi) {
        ++rn;
        rs += r.at("outcome") == "success" ? 1 : 0;
      }
    }
    EXPECT_EQ(n, rn);
    EXPECT_EQ(s, rs);
  }
  EXPECT_EQ(total, 40u);
}

TEST(EmitCurves, CostCurveMatchesRecount) {
  std::vector<json> recs;
  Rng rng(2);
  for (int i = 0; i < 30; ++i)
    recs.push_back(record(uniform_unit(rng) < 0.6 ? "success" : "iterations_exhausted",
                          0.01 * static_cast<double>(uniform_index(rng, 10)), 1, 3));
  const auto t = emit_curves(recs);
  std::istringstream in(t.asr_vs_cost);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream row(line);
    double cost, asr;
    row >> cost >> asr;
    std::size_t hits = 0;
    for (const auto& r : recs)
      if (r.at("outcome") == "success" && r.at("spend").get<double>() <= cost) ++hits;
    EXPECT_NEAR(asr, static_cast<double>(hits) / 30.0, 1e-9);
  }
}

TEST(EmitCurves, ReadsWrittenTraces) {
  const auto d = tmpdir("c");
  run_suite(ExperimentConfig::from_json(small_config(d.string())));
  const auto recs = read_traces((d / "traces.jsonl").string());
  EXPECT_EQ(recs.size(), 6u);
  const auto t = emit_curves(recs);
  write_curves(t, (d / "curves").string());
  EXPECT_TRUE(std::filesystem::exists(d / "curves" / "asr_by_length.tsv"));
}
