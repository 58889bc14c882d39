// Command-line front end: run attack suites, serve the mock API, build curve tables.

#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "gcq/api_wire.hpp"
#include "gcq/bench.hpp"
#include "gcq/socket_transport.hpp"

namespace {

int cmd_attack(const std::string& config_path, const std::string& out_override) {
  std::ifstream in(config_path);
  if (!in) throw gcq::ConfigError("cannot open " + config_path);
  gcq::json j;
  try {
    j = gcq::json::parse(in);
  } catch (const gcq::json::parse_error& e) {
    throw gcq::ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  auto cfg = gcq::ExperimentConfig::from_json(j);
  if (!out_override.empty()) cfg.output = out_override;
  const auto records = gcq::run_suite(cfg);
  std::size_t wins = 0, runs = 0;
  for (const auto& r : records) {
    if (r.value("rerun", false)) continue;
    ++runs;
    wins += r.at("outcome") == "success" ? 1 : 0;
  }
  std::cout << "runs: " << runs << "  successes: " << wins << '\n';
  if (!cfg.output.empty()) std::cout << "traces: " << cfg.output << "/traces.jsonl\n";
  return 0;
}

int cmd_serve(const std::string& era, const std::string& model_config, double sigma, std::uint64_t noise_seed,
              std::uint16_t port, std::size_t singles, std::size_t pairs, std::uint64_t vocab_seed,
              std::size_t categories, std::uint64_t moderation_seed) {
  auto vocab = std::make_shared<const gcq::Vocabulary>(gcq::make_vocabulary(singles, pairs, vocab_seed));
  gcq::ToyLmConfig mc;
  if (!model_config.empty()) {
    std::ifstream in(model_config);
    if (!in) throw gcq::ConfigError("cannot open " + model_config);
    mc = gcq::ToyLmConfig::load(in);
  }
  mc.vocab_size = vocab->size();
  auto lm = std::make_shared<const gcq::ToyLM>(gcq::ToyLM::build(mc));
  auto moderation = std::make_shared<const gcq::ModerationModel>(
      gcq::make_calibrated_moderation(*vocab, categories, moderation_seed));
  gcq::NoiseConfig noise;
  noise.enabled = sigma > 0.0;
  noise.sigma = sigma;
  noise.seed = noise_seed;
  gcq::MockServer server(lm, gcq::parse_era(era), noise, vocab, moderation);
  gcq::SocketServer sock(server);
  const auto bound = sock.start(port);
  std::cout << "listening on 127.0.0.1:" << bound << std::endl;
  sock.wait();
  return 0;
}

int cmd_curves(const std::string& in, const std::string& out, std::size_t bucket) {
  const auto tables = gcq::emit_curves(gcq::read_traces(in), bucket);
  gcq::write_curves(tables, out);
  std::cout << "tables written to " << out << '\n';
  return 0;
}

int cmd_targets(const std::string& model_config, std::size_t singles, std::size_t pairs, std::uint64_t vocab_seed,
                const gcq::TargetGenSpec& spec, const std::string& out) {
  const auto vocab = gcq::make_vocabulary(singles, pairs, vocab_seed);
  gcq::ToyLmConfig mc;
  if (!model_config.empty()) {
    std::ifstream in(model_config);
    if (!in) throw gcq::ConfigError("cannot open " + model_config);
    mc = gcq::ToyLmConfig::load(in);
  }
  mc.vocab_size = vocab.size();
  const auto lm = gcq::ToyLM::build(mc);
  std::ofstream f(out);
  if (!f) throw gcq::ConfigError("cannot write " + out);
  for (const auto& t : gcq::generate_targets(vocab, lm, spec)) f << t << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Greedy coordinate query search against a toy completion API"};
  app.require_subcommand(1);

  auto* attack = app.add_subcommand("attack", "run an attack suite from a JSON config");
  std::string config_path, out_override;
  attack->add_option("--config", config_path, "experiment config")->required()->check(CLI::ExistingFile);
  attack->add_option("--out", out_override, "output directory (overrides the config)");

  std::size_t singles = 48, pairs = 16, categories = 5;
  std::uint64_t vocab_seed = 7, moderation_seed = 0;
  auto add_vocab_opts = [&](CLI::App* sub) {
    sub->add_option("--vocab-singles", singles, "single-character tokens")->capture_default_str();
    sub->add_option("--vocab-pairs", pairs, "two-character tokens")->capture_default_str();
    sub->add_option("--vocab-seed", vocab_seed, "vocabulary seed")->capture_default_str();
  };

  auto* serve = app.add_subcommand("serve-mock", "serve the mock completions API on a local socket");
  std::string era = "biased-topk", model_config;
  double sigma = 0.0;
  std::uint64_t noise_seed = 0;
  std::uint16_t port = 0;
  serve->add_option("--era", era, "prompt-logprobs | biased-topk | unbiased-topk")->capture_default_str();
  serve->add_option("--model-config", model_config, "toy model config file");
  serve->add_option("--noise-sigma", sigma, "logit noise standard deviation (0 disables)")->capture_default_str();
  serve->add_option("--seed", noise_seed, "noise seed")->capture_default_str();
  serve->add_option("--port", port, "port to bind (0 picks a free one)")->capture_default_str();
  serve->add_option("--moderation-categories", categories)->capture_default_str();
  serve->add_option("--moderation-seed", moderation_seed)->capture_default_str();
  add_vocab_opts(serve);

  auto* curves = app.add_subcommand("curves", "build ASR tables from a traces file");
  std::string traces_in, curves_out;
  std::size_t bucket = 1;
  curves->add_option("--in", traces_in, "traces.jsonl")->required()->check(CLI::ExistingFile);
  curves->add_option("--out", curves_out, "output directory")->required();
  curves->add_option("--bucket-width", bucket, "target length bucket width")->capture_default_str();

  auto* targets = app.add_subcommand("gen-targets", "write synthetic target strings, one per line");
  gcq::TargetGenSpec spec;
  std::string targets_out;
  targets->add_option("--model-config", model_config, "toy model config file");
  targets->add_option("--count", spec.count)->capture_default_str();
  targets->add_option("--min-length", spec.min_length)->capture_default_str();
  targets->add_option("--max-length", spec.max_length)->capture_default_str();
  targets->add_option("--seed", spec.seed)->capture_default_str();
  targets->add_option("--out", targets_out)->required();
  add_vocab_opts(targets);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*attack) return cmd_attack(config_path, out_override);
    if (*serve)
      return cmd_serve(era, model_config, sigma, noise_seed, port, singles, pairs, vocab_seed, categories,
                       moderation_seed);
    if (*curves) return cmd_curves(traces_in, curves_out, bucket);
    if (*targets) return cmd_targets(model_config, singles, pairs, vocab_seed, spec, targets_out);
  } catch (const gcq::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
