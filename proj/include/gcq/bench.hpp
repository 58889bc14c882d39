#pragma once

// Experiment driver: configuration, synthetic datasets, suite execution,
// trace records and curve tables.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gcq/api_wire.hpp"
#include "gcq/attacks.hpp"
#include "gcq/errors.hpp"
#include "gcq/logprob_probe.hpp"
#include "gcq/loss.hpp"
#include "gcq/moderation.hpp"
#include "gcq/socket_transport.hpp"
#include "gcq/toy_lm.hpp"
#include "gcq/vocab.hpp"

namespace gcq {

// --- configuration ------------------------------------------------------------------

struct VocabSpec {
  std::size_t singles = 48;
  std::size_t pairs = 16;
  std::uint64_t seed = 7;
};

struct TargetGenSpec {
  std::size_t count = 20;
  std::size_t min_length = 1;
  std::size_t max_length = 10;
  std::uint64_t seed = 0;
};

struct OracleSpec {
  std::string kind = "local";  // local | mock | remote
  ApiEra era = ApiEra::BiasedTopK;
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
};

struct ProxySpec {
  std::uint64_t alt_seed = 0;
  double overlap = 1.0;
  // Repetition boost of the proxy; unset copies the model's.
  std::optional<double> beta;
};

struct EngineSpec {
  std::string kind = "gcq";  // gcq | greedy | position-first
  std::size_t prompt_length = 20;
  std::size_t iterations = 100;
  std::size_t proxy_batch = 256;
  std::size_t query_batch = 32;
  std::size_t buffer_size = 32;
  InitKind init = InitKind::Repeat;
  bool short_circuit = true;
  std::size_t batch = 512;
  std::size_t focused_batch = 64;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string objective = "target";  // target | universal | moderation
  std::string moderation_mode = "nonuniversal";
  EngineSpec engine;
  OracleSpec oracle;
  ToyLmConfig model;
  std::optional<ProxySpec> proxy;
  VocabSpec vocab;
  std::size_t moderation_categories = 5;
  std::uint64_t moderation_seed = 0;
  std::optional<double> budget_usd;
  std::optional<std::uint64_t> budget_requests;
  std::string dataset_path;
  std::optional<TargetGenSpec> generate;
  std::size_t train_size = 20;
  bool rerun_failures_doubled = false;
  std::string output;

  static ExperimentConfig from_json(const json& j);
  json to_json() const;
};

inline InitKind parse_init(const std::string& s) {
  if (s == "repeat") return InitKind::Repeat;
  if (s == "random") return InitKind::Random;
  throw ConfigError("unknown init '" + s + "' (expected repeat or random)");
}

inline ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.objective = j.value("objective", c.objective);
    c.moderation_mode = j.value("moderation_mode", c.moderation_mode);
    if (auto e = j.find("engine"); e != j.end()) {
      c.engine.kind = e->value("kind", c.engine.kind);
      c.engine.prompt_length = e->value("prompt_length", c.engine.prompt_length);
      c.engine.iterations = e->value("iterations", c.engine.iterations);
      c.engine.proxy_batch = e->value("proxy_batch", c.engine.proxy_batch);
      c.engine.query_batch = e->value("query_batch", c.engine.query_batch);
      c.engine.buffer_size = e->value("buffer_size", c.engine.buffer_size);
      c.engine.init = parse_init(e->value("init", to_string(c.engine.init)));
      c.engine.short_circuit = e->value("short_circuit", c.engine.short_circuit);
      c.engine.batch = e->value("batch", c.engine.batch);
      c.engine.focused_batch = e->value("focused_batch", c.engine.focused_batch);
    }
    if (auto o = j.find("oracle"); o != j.end()) {
      c.oracle.kind = o->value("kind", c.oracle.kind);
      c.oracle.era = parse_era(o->value("era", to_string(c.oracle.era)));
      c.oracle.host = o->value("host", c.oracle.host);
      c.oracle.port = o->value("port", c.oracle.port);
      c.oracle.noise_sigma = o->value("noise_sigma", c.oracle.noise_sigma);
      c.oracle.noise_seed = o->value("noise_seed", c.oracle.noise_seed);
    }
    if (auto m = j.find("model"); m != j.end()) {
      c.model.seed = m->value("seed", c.model.seed);
      c.model.vocab_size = m->value("n", c.model.vocab_size);
      c.model.order = m->value("order", c.model.order);
      c.model.lambda = m->value("lambda", c.model.lambda);
      c.model.alpha = m->value("alpha", c.model.alpha);
      c.model.beta = m->value("beta", c.model.beta);
      c.model.repeat_window = m->value("repeat_window", c.model.repeat_window);
      c.model.corpus_tokens = m->value("corpus_tokens", c.model.corpus_tokens);
      c.model.hidden_states = m->value("hidden_states", c.model.hidden_states);
    }
    if (auto p = j.find("model_config"); p != j.end()) {
      std::ifstream in(p->get<std::string>());
      if (!in) throw ConfigError("cannot open model config " + p->get<std::string>());
      c.model = ToyLmConfig::load(in);
    }
    if (auto p = j.find("proxy"); p != j.end() && !p->is_null()) {
      ProxySpec ps;
      ps.alt_seed = p->value("alt_seed", ps.alt_seed);
      ps.overlap = p->value("overlap", ps.overlap);
      if (auto b = p->find("beta"); b != p->end() && !b->is_null()) ps.beta = b->get<double>();
      c.proxy = ps;
    }
    if (auto v = j.find("vocab"); v != j.end()) {
      c.vocab.singles = v->value("singles", c.vocab.singles);
      c.vocab.pairs = v->value("pairs", c.vocab.pairs);
      c.vocab.seed = v->value("seed", c.vocab.seed);
    }
    c.moderation_categories = j.value("moderation_categories", c.moderation_categories);
    c.moderation_seed = j.value("moderation_seed", c.moderation_seed);
    if (auto b = j.find("budget"); b != j.end()) {
      if (b->contains("usd") && !b->at("usd").is_null()) c.budget_usd = b->at("usd").get<double>();
      if (b->contains("requests") && !b->at("requests").is_null())
        c.budget_requests = b->at("requests").get<std::uint64_t>();
    }
    if (auto d = j.find("dataset"); d != j.end()) {
      if (d->is_string()) {
        c.dataset_path = d->get<std::string>();
      } else if (d->contains("generate")) {
        const auto& g = d->at("generate");
        TargetGenSpec spec;
        spec.count = g.value("count", spec.count);
        spec.min_length = g.value("min_length", spec.min_length);
        spec.max_length = g.value("max_length", spec.max_length);
        spec.seed = g.value("seed", spec.seed);
        c.generate = spec;
      }
    }
    c.train_size = j.value("train_size", c.train_size);
    c.rerun_failures_doubled = j.value("rerun_failures_doubled", c.rerun_failures_doubled);
    c.output = j.value("output", c.output);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad experiment config: ") + e.what());
  }
  c.model.vocab_size = c.vocab.singles + c.vocab.pairs;
  if (c.objective != "target" && c.objective != "universal" && c.objective != "moderation")
    throw ConfigError("unknown objective '" + c.objective + "'");
  if (c.engine.kind != "gcq" && c.engine.kind != "greedy" && c.engine.kind != "position-first")
    throw ConfigError("unknown engine '" + c.engine.kind + "'");
  if (c.oracle.kind != "local" && c.oracle.kind != "mock" && c.oracle.kind != "remote")
    throw ConfigError("unknown oracle kind '" + c.oracle.kind + "'");
  if (c.dataset_path.empty() && !c.generate) throw ConfigError("config needs a dataset path or generator");
  return c;
}

inline json ExperimentConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["objective"] = objective;
  j["moderation_mode"] = moderation_mode;
  j["engine"] = {{"kind", engine.kind},          {"prompt_length", engine.prompt_length},
                 {"iterations", engine.iterations}, {"proxy_batch", engine.proxy_batch},
                 {"query_batch", engine.query_batch}, {"buffer_size", engine.buffer_size},
                 {"init", to_string(engine.init)},  {"short_circuit", engine.short_circuit},
                 {"batch", engine.batch},           {"focused_batch", engine.focused_batch}};
  j["oracle"] = {{"kind", oracle.kind}, {"era", to_string(oracle.era)}, {"host", oracle.host},
                 {"port", oracle.port}, {"noise_sigma", oracle.noise_sigma}, {"noise_seed", oracle.noise_seed}};
  j["model"] = {{"seed", model.seed},
                {"n", model.vocab_size},
                {"order", model.order},
                {"lambda", model.lambda},
                {"alpha", model.alpha},
                {"beta", model.beta},
                {"repeat_window", model.repeat_window},
                {"corpus_tokens", model.corpus_tokens},
                {"hidden_states", model.hidden_states}};
  j["proxy"] = proxy ? json{{"alt_seed", proxy->alt_seed},
                             {"overlap", proxy->overlap},
                             {"beta", proxy->beta ? json(*proxy->beta) : json(nullptr)}}
                      : json(nullptr);
  j["vocab"] = {{"singles", vocab.singles}, {"pairs", vocab.pairs}, {"seed", vocab.seed}};
  j["moderation_categories"] = moderation_categories;
  j["moderation_seed"] = moderation_seed;
  json budget = json::object();
  budget["usd"] = budget_usd ? json(*budget_usd) : json(nullptr);
  budget["requests"] = budget_requests ? json(*budget_requests) : json(nullptr);
  j["budget"] = budget;
  if (generate) {
    j["dataset"] = {{"generate",
                     {{"count", generate->count},
                      {"min_length", generate->min_length},
                      {"max_length", generate->max_length},
                      {"seed", generate->seed}}}};
  } else {
    j["dataset"] = dataset_path;
  }
  j["train_size"] = train_size;
  j["rerun_failures_doubled"] = rerun_failures_doubled;
  j["output"] = output;
  return j;
}

// --- datasets ------------------------------------------------------------------------

/// Draws a canonical token sequence of exactly `length` tokens from the model
/// (temperature 1, no repetition bonus influence on the first token).
inline TokenSeq sample_canonical_target(const Vocabulary& vocab, const ToyLM& lm, std::size_t length, Rng& rng) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    TokenSeq seq;
    while (seq.size() < length) {
      const auto lps = log_softmax(lm.next_logits(seq));
      double u = uniform_unit(rng), acc = 0.0;
      TokenId pick = static_cast<TokenId>(lps.size() - 1);
      for (std::size_t t = 0; t < lps.size(); ++t) {
        acc += std::exp(lps[t]);
        if (u < acc) {
          pick = static_cast<TokenId>(t);
          break;
        }
      }
      seq.push_back(pick);
      seq = vocab.canonicalize(seq);
    }
    if (seq.size() == length) return seq;
  }
  throw ConfigError("could not sample a canonical target of length " + std::to_string(length));
}

/// Synthetic target strings with token lengths spread evenly over the range.
inline std::vector<std::string> generate_targets(const Vocabulary& vocab, const ToyLM& lm, const TargetGenSpec& spec) {
  if (spec.min_length < 1 || spec.max_length < spec.min_length) throw ConfigError("bad target length range");
  Rng rng(mix_seed(spec.seed, 31));
  std::vector<std::string> out;
  const std::size_t span = spec.max_length - spec.min_length + 1;
  for (std::size_t i = 0; i < spec.count; ++i) {
    const std::size_t len = spec.min_length + (i % span);
    out.push_back(vocab.detokenize(sample_canonical_target(vocab, lm, len, rng)));
  }
  return out;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

template <class T>
void seeded_shuffle(std::vector<T>& v, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 41));
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

/// Shuffles with the seed and splits off the first `train_size` items.
template <class T>
std::pair<std::vector<T>, std::vector<T>> train_holdout_split(std::vector<T> items, std::size_t train_size,
                                                              std::uint64_t seed) {
  if (items.size() < train_size) throw ConfigError("dataset smaller than the training set");
  seeded_shuffle(items, seed);
  std::vector<T> train(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(train_size));
  std::vector<T> holdout(items.begin() + static_cast<std::ptrdiff_t>(train_size), items.end());
  return {std::move(train), std::move(holdout)};
}

/// The moderation model used by experiments and by `serve-mock`: random
/// weights, thresholds calibrated so that about a third of a synthetic
/// harmful-string corpus goes unflagged.
inline ModerationModel make_calibrated_moderation(const Vocabulary& vocab, std::size_t categories, std::uint64_t seed) {
  auto model = ModerationModel::random(vocab, categories, seed);
  const auto corpus = make_moderation_corpus(model, 574, 0.66, seed);
  return calibrate(std::move(model), corpus);
}

// --- traces -----------------------------------------------------------------------------

inline json trace_to_json(const AttackTrace& t) {
  json iters = json::array();
  for (const auto& r : t.iterations) {
    json rec;
    rec["iteration"] = r.iteration;
    rec["best_loss"] = r.best_loss ? json(*r.best_loss) : json(nullptr);
    rec["worst_loss"] = r.worst_loss ? json(*r.worst_loss) : json(nullptr);
    rec["queries"] = r.queries;
    rec["prompt_tokens"] = r.ledger.prompt_tokens;
    rec["completion_tokens"] = r.ledger.completion_tokens;
    rec["requests"] = r.ledger.requests;
    rec["spend"] = r.ledger.spend;
    rec["success"] = r.success;
    if (r.holdout_asr) rec["holdout_asr"] = *r.holdout_asr;
    iters.push_back(std::move(rec));
  }
  return iters;
}

// --- suite execution -----------------------------------------------------------------

struct SuiteContext {
  Vocabulary vocab;
  std::shared_ptr<const ToyLM> lm;
  std::unique_ptr<ToyLM> proxy;
  std::shared_ptr<const ModerationModel> moderation;
  std::unique_ptr<MockServer> server;
};

namespace detail {

inline CostLedger make_ledger(const ExperimentConfig& c, double budget_scale = 1.0) {
  CostLedger l;
  if (c.budget_usd) l.budget = *c.budget_usd * budget_scale;
  if (c.budget_requests)
    l.max_requests = static_cast<std::uint64_t>(std::llround(static_cast<double>(*c.budget_requests) * budget_scale));
  return l;
}

/// Owns the oracle stack for one attack run.
struct OracleStack {
  std::unique_ptr<Transport> transport;
  std::unique_ptr<ApiClient> client;
  std::unique_ptr<LanguageOracle> oracle;
  std::unique_ptr<ModerationEndpoint> moderation;
};

inline OracleStack make_oracle(const ExperimentConfig& c, SuiteContext& ctx, double budget_scale) {
  OracleStack s;
  const CostLedger ledger = make_ledger(c, budget_scale);
  if (c.oracle.kind == "local") {
    if (c.objective == "moderation") s.moderation = std::make_unique<LocalModerationEndpoint>(*ctx.moderation, ledger);
    else s.oracle = std::make_unique<LocalOracle>(*ctx.lm, ledger);
    return s;
  }
  if (c.oracle.kind == "mock") s.transport = std::make_unique<InProcessTransport>(*ctx.server);
  else s.transport = std::make_unique<SocketTransport>(c.oracle.host, c.oracle.port);
  s.client = std::make_unique<ApiClient>(*s.transport, ledger, ClientOptions{}, &ctx.vocab);
  if (c.objective == "moderation") {
    s.moderation = std::make_unique<RemoteModerationEndpoint>(*s.client);
  } else {
    ProbeOptions po;
    po.era = c.oracle.era;
    po.vocab_size = ctx.vocab.size();
    s.oracle = std::make_unique<RemoteOracle>(*s.client, po);
  }
  return s;
}

inline AttackTrace run_engine(const ExperimentConfig& c, Objective& obj, std::size_t prompt_length,
                              std::uint64_t seed, bool stop_on_success = true, HoldoutProbe holdout = {}) {
  if (c.engine.kind == "gcq") {
    GcqConfig g;
    g.prompt_length = prompt_length;
    g.iterations = c.engine.iterations;
    g.proxy_batch = obj.has_proxy() ? c.engine.proxy_batch : c.engine.query_batch;
    g.query_batch = c.engine.query_batch;
    g.buffer_size = c.engine.buffer_size;
    g.init = obj.repeat_seed(prompt_length) ? c.engine.init : InitKind::Random;
    g.seed = seed;
    g.short_circuit = c.engine.short_circuit;
    g.stop_on_success = stop_on_success;
    g.holdout = std::move(holdout);
    return gcq_attack(obj, g);
  }
  VariantConfig v;
  v.suffix_length = prompt_length;
  v.batch = c.engine.batch;
  v.focused_batch = c.engine.focused_batch;
  v.iterations = c.engine.iterations;
  v.seed = seed;
  return c.engine.kind == "greedy" ? greedy_query_only(obj, v) : position_first(obj, v);
}

inline json base_record(const AttackTrace& t, const Vocabulary& vocab) {
  json r;
  r["outcome"] = to_string(t.outcome);
  const LedgerSnapshot last = t.iterations.empty() ? LedgerSnapshot{} : t.iterations.back().ledger;
  r["spend"] = last.spend;
  r["prompt_tokens"] = last.prompt_tokens;
  r["completion_tokens"] = last.completion_tokens;
  r["requests"] = last.requests;
  r["queries"] = t.queries;
  r["iterations"] = t.iterations.empty() ? 0 : t.iterations.back().iteration;
  r["final_prompt"] = vocab.detokenize(t.final_prompt);
  r["final_prompt_ids"] = t.final_prompt;
  r["final_loss"] = t.final_loss ? json(*t.final_loss) : json(nullptr);
  r["trace"] = trace_to_json(t);
  return r;
}

}  // namespace detail

inline SuiteContext make_context(const ExperimentConfig& c) {
  SuiteContext ctx;
  ctx.vocab = make_vocabulary(c.vocab.singles, c.vocab.pairs, c.vocab.seed);
  ToyLmConfig mc = c.model;
  mc.vocab_size = ctx.vocab.size();
  ctx.lm = std::make_shared<const ToyLM>(ToyLM::build(mc));
  if (c.proxy) {
    ToyLmConfig pc = mc;
    pc.alt_seed = c.proxy->alt_seed;
    pc.overlap = c.proxy->overlap;
    if (c.proxy->beta) pc.beta = *c.proxy->beta;
    ctx.proxy = std::make_unique<ToyLM>(ToyLM::build(pc));
  }
  if (c.objective == "moderation")
    ctx.moderation = std::make_shared<const ModerationModel>(
        make_calibrated_moderation(ctx.vocab, c.moderation_categories, c.moderation_seed));
  if (c.oracle.kind == "mock") {
    NoiseConfig noise;
    noise.enabled = c.oracle.noise_sigma > 0.0;
    noise.sigma = c.oracle.noise_sigma;
    noise.seed = c.oracle.noise_seed;
    ctx.server = std::make_unique<MockServer>(ctx.lm, c.oracle.era, noise,
                                              std::make_shared<const Vocabulary>(ctx.vocab), ctx.moderation);
  }
  return ctx;
}

/// Runs the experiment and returns one JSON record per attack run. When
/// `output` is set, writes `traces.jsonl` and `config.json` there.
inline std::vector<json> run_suite(const ExperimentConfig& c) {
  SuiteContext ctx = make_context(c);
  std::vector<std::string> dataset;
  if (!c.generate) {
    dataset = read_lines(c.dataset_path);
  } else if (c.objective == "moderation") {
    // lengths come from the corpus generator; min/max_length are unused here
    for (auto& item : make_moderation_corpus(*ctx.moderation, c.generate->count, 0.66, c.generate->seed))
      dataset.push_back(std::move(item.text));
  } else {
    dataset = generate_targets(ctx.vocab, *ctx.lm, *c.generate);
  }
  if (dataset.empty()) throw ConfigError("dataset is empty");
  std::vector<json> records;
  const std::size_t m = c.engine.prompt_length;

  if (c.objective == "target") {
    std::vector<std::size_t> failed;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const TokenSeq target = ctx.vocab.tokenize(dataset[i]);
      auto stack = detail::make_oracle(c, ctx, 1.0);
      TargetStringObjective obj(*stack.oracle, ctx.vocab, target, ctx.proxy.get());
      const auto trace = detail::run_engine(c, obj, m, mix_seed(c.seed, i));
      json r = detail::base_record(trace, ctx.vocab);
      r["kind"] = "target";
      r["target_index"] = i;
      r["target"] = dataset[i];
      r["target_tokens"] = target.size();
      r["prompt_length"] = m;
      r["rerun"] = false;
      if (trace.outcome != Outcome::Success) failed.push_back(i);
      records.push_back(std::move(r));
    }
    if (c.rerun_failures_doubled) {
      for (std::size_t i : failed) {
        const TokenSeq target = ctx.vocab.tokenize(dataset[i]);
        auto stack = detail::make_oracle(c, ctx, 2.0);
        TargetStringObjective obj(*stack.oracle, ctx.vocab, target, ctx.proxy.get());
        const auto trace = detail::run_engine(c, obj, 2 * m, mix_seed(c.seed, i));
        json r = detail::base_record(trace, ctx.vocab);
        r["kind"] = "target";
        r["target_index"] = i;
        r["target"] = dataset[i];
        r["target_tokens"] = target.size();
        r["prompt_length"] = 2 * m;
        r["rerun"] = true;
        records.push_back(std::move(r));
      }
    }
  } else if (c.objective == "universal") {
    auto [train, holdout] = train_holdout_split(dataset, std::min(c.train_size, dataset.size()), c.seed);
    std::vector<UniversalItem> items;
    for (const auto& s : train) items.push_back({{}, ctx.vocab.tokenize(s)});
    std::vector<TokenSeq> holdout_targets;
    for (const auto& s : holdout) holdout_targets.push_back(ctx.vocab.tokenize(s));
    auto stack = detail::make_oracle(c, ctx, 1.0);
    UniversalTargetObjective obj(*stack.oracle, ctx.vocab, items, ctx.proxy.get());
    LocalOracle evaluator(*ctx.lm);
    HoldoutProbe probe = [&](const TokenSeq& suffix) -> std::optional<double> {
      if (holdout_targets.empty()) return std::nullopt;
      std::size_t ok = 0;
      for (const auto& t : holdout_targets) ok += success_check(evaluator, suffix, t) ? 1 : 0;
      return static_cast<double>(ok) / static_cast<double>(holdout_targets.size());
    };
    const auto trace = detail::run_engine(c, obj, m, c.seed, false, probe);
    json r = detail::base_record(trace, ctx.vocab);
    r["kind"] = "universal";
    r["train"] = train;
    r["holdout_size"] = holdout.size();
    records.push_back(std::move(r));
  } else {
    const ModerationModel& model = *ctx.moderation;
    std::vector<std::string> flagged;
    for (const auto& s : dataset)
      if (model.classify(s).flagged()) flagged.push_back(s);
    if (c.moderation_mode == "universal") {
      auto [train, holdout] = train_holdout_split(flagged, std::min(c.train_size, flagged.size()), c.seed);
      auto stack = detail::make_oracle(c, ctx, 1.0);
      ModerationObjective obj(*stack.moderation, ctx.vocab, train);
      HoldoutProbe probe = [&](const TokenSeq& suffix) -> std::optional<double> {
        if (holdout.empty()) return std::nullopt;
        const std::string s = ctx.vocab.detokenize(suffix);
        std::size_t ok = 0;
        for (const auto& h : holdout) ok += model.classify(h + s).flagged() ? 0 : 1;
        return static_cast<double>(ok) / static_cast<double>(holdout.size());
      };
      const auto trace = detail::run_engine(c, obj, m, c.seed, false, probe);
      json r = detail::base_record(trace, ctx.vocab);
      r["kind"] = "moderation-universal";
      r["train"] = train;
      r["holdout_size"] = holdout.size();
      records.push_back(std::move(r));
    } else {
      for (std::size_t i = 0; i < flagged.size(); ++i) {
        auto stack = detail::make_oracle(c, ctx, 1.0);
        ModerationObjective obj(*stack.moderation, ctx.vocab, {flagged[i]});
        const auto trace = detail::run_engine(c, obj, m, mix_seed(c.seed, i));
        json r = detail::base_record(trace, ctx.vocab);
        r["kind"] = "moderation";
        r["target_index"] = i;
        r["target"] = flagged[i];
        r["target_tokens"] = ctx.vocab.tokenize(flagged[i]).size();
        r["prompt_length"] = m;
        r["rerun"] = false;
        records.push_back(std::move(r));
      }
    }
  }

  if (!c.output.empty()) {
    std::filesystem::create_directories(c.output);
    std::ofstream traces(std::filesystem::path(c.output) / "traces.jsonl");
    for (const auto& r : records) traces << r.dump() << '\n';
    std::ofstream cfg(std::filesystem::path(c.output) / "config.json");
    cfg << c.to_json().dump(2) << '\n';
  }
  return records;
}

inline std::vector<json> read_traces(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open traces " + path);
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("bad trace record: ") + e.what());
    }
  }
  return out;
}

// --- curves -------------------------------------------------------------------------------

struct CurveTables {
  std::string asr_vs_cost;
  std::string asr_vs_iterations;
  std::string asr_by_length;
  std::string holdout_asr_vs_requests;
};

namespace detail {

inline std::string fmt_num(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

/// Cumulative success fraction as a step function over `xs` of the successes,
/// starting with a row at zero.
inline std::string step_table(const std::string& header, std::vector<double> xs, std::size_t total) {
  std::sort(xs.begin(), xs.end());
  auto frac = [&](std::size_t hits) { return fmt_num(static_cast<double>(hits) / static_cast<double>(total)); };
  std::ostringstream os;
  os << header << "\tasr\n";
  std::size_t hits = 0;
  while (hits < xs.size() && xs[hits] <= 0.0) ++hits;
  os << "0\t" << frac(hits) << '\n';
  for (std::size_t i = hits; i < xs.size(); ++i) {
    ++hits;
    if (i + 1 < xs.size() && xs[i + 1] == xs[i]) continue;
    os << fmt_num(xs[i]) << '\t' << frac(hits) << '\n';
  }
  return os.str();
}

}  // namespace detail

/// Tab-separated tables from per-target records. Rerun records are excluded
/// from the suite-level curves. `bucket_width` groups target lengths.
inline CurveTables emit_curves(const std::vector<json>& records, std::size_t bucket_width = 1) {
  if (records.empty()) throw EmptyInput("no trace records");
  if (bucket_width == 0) throw ConfigError("bucket width must be positive");
  CurveTables out;
  std::vector<double> costs, iters;
  std::size_t total = 0;
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> buckets;  // first length -> (count, successes)
  std::ostringstream holdout;
  holdout << "requests\tholdout_asr\n";
  for (const auto& r : records) {
    const std::string kind = r.value("kind", "target");
    if (kind == "universal" || kind == "moderation-universal") {
      for (const auto& it : r.at("trace"))
        if (it.contains("holdout_asr"))
          holdout << it.at("requests").get<std::uint64_t>() << '\t'
                  << detail::fmt_num(it.at("holdout_asr").get<double>()) << '\n';
      continue;
    }
    if (r.value("rerun", false)) continue;
    ++total;
    const bool ok = r.at("outcome").get<std::string>() == "success";
    if (ok) {
      costs.push_back(r.at("spend").get<double>());
      iters.push_back(static_cast<double>(r.at("iterations").get<std::size_t>()));
    }
    const std::size_t len = r.value("target_tokens", std::size_t{0});
    const std::size_t lo = len == 0 ? 0 : ((len - 1) / bucket_width) * bucket_width + 1;
    auto& b = buckets[lo];
    ++b.first;
    b.second += ok ? 1 : 0;
  }
  if (total > 0) {
    out.asr_vs_cost = detail::step_table("cost_usd", costs, total);
    out.asr_vs_iterations = detail::step_table("iteration", iters, total);
    std::ostringstream len;
    len << "length_min\tlength_max\ttargets\tsuccesses\tasr\n";
    for (const auto& [lo, b] : buckets) {
      const std::size_t hi = lo == 0 ? 0 : lo + bucket_width - 1;
      len << lo << '\t' << hi << '\t' << b.first << '\t' << b.second << '\t'
          << detail::fmt_num(static_cast<double>(b.second) / static_cast<double>(b.first)) << '\n';
    }
    out.asr_by_length = len.str();
  }
  out.holdout_asr_vs_requests = holdout.str();
  return out;
}

inline void write_curves(const CurveTables& t, const std::string& dir) {
  std::filesystem::create_directories(dir);
  auto put = [&](const char* name, const std::string& body) {
    if (body.empty()) return;
    std::ofstream(std::filesystem::path(dir) / name) << body;
  };
  put("asr_vs_cost.tsv", t.asr_vs_cost);
  put("asr_vs_iterations.tsv", t.asr_vs_iterations);
  put("asr_by_length.tsv", t.asr_by_length);
  put("holdout_asr_vs_requests.tsv", t.holdout_asr_vs_requests);
}

}  // namespace gcq
