// distdnas: synthesize data, search, discretize, train and evaluate.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "distdnas/pipeline.hpp"

namespace {

using distdnas::Pipeline;
using distdnas::RunConfig;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kConfig = 2, kRuntime = 3, kIo = 4 };

struct Overrides {
  std::string config;
  std::optional<std::string> mode;
  std::optional<distdnas::Index> shards;
  std::optional<distdnas::Index> parallelism;
  std::optional<double> theta;
  std::optional<double> gamma;
  std::optional<distdnas::Index> M;
  std::optional<std::string> t_range;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> baseline;
  std::vector<std::string> metrics;

  RunConfig apply(RunConfig c) const {
    if (mode) {
      try {
        c.search.mode = distdnas::mode_from_name(*mode);
      } catch (const distdnas::Error& e) {
        throw distdnas::ConfigError(e.what());
      }
    }
    if (shards) c.shards = *shards;
    if (parallelism) c.parallelism = *parallelism;
    if (theta) c.theta = *theta;
    if (gamma) c.gamma = *gamma;
    if (M) c.M = *M;
    if (t_range) c.t_range = distdnas::parse_day_range(*t_range);
    if (out) c.out = *out;
    if (const char* env = std::getenv("DISTDNAS_OUT"); env != nullptr && *env != '\0') c.out = env;
    if (seed) c.seed = *seed;
    if (baseline) c.baseline = *baseline;
    if (!metrics.empty()) c.metrics.assign(metrics.begin(), metrics.end());
    c.validate();
    return c;
  }
};

json metrics_json(const distdnas::MetricsRow& r) {
  json j{{"run_id", r.run_id}, {"mode", r.mode},          {"M", r.M},
         {"flops", r.flops},   {"params", r.params},      {"logloss", r.metrics.logloss},
         {"auc", r.metrics.auc}, {"ne", r.metrics.ne},    {"examples", r.metrics.examples}};
  if (r.metrics.relative_ne) j["relative_ne"] = *r.metrics.relative_ne;
  return j;
}

json run(const std::string& command, Pipeline& p) {
  if (command == "synth") {
    p.synth();
    return {{"days", p.config().synth.days}, {"dir", p.config().data_path().string()}};
  }
  if (command == "importance") {
    const auto imp = p.importance();
    return {{"blocks", imp.blocks()}, {"samples", p.config().importance_samples}};
  }
  if (command == "search") return p.search().report();
  if (command == "discretize") return {{"arch", p.discretize().str()}, {"theta", p.config().theta}};
  if (command == "train") return metrics_json(p.train());
  if (command == "eval") return metrics_json(p.eval());
  if (command == "recurring") {
    json rows = json::array();
    for (const auto& r : p.recurring()) {
      json row{{"t", r.t}, {"auc", r.metrics.auc}, {"ne", r.metrics.ne}};
      if (r.metrics.relative_ne) row["relative_ne"] = *r.metrics.relative_ne;
      rows.push_back(row);
    }
    return rows;
  }
  if (command == "frontier") {
    p.frontier();
    return {{"file", (p.config().out / "frontier.csv").string()}};
  }
  throw distdnas::ConfigError("unknown subcommand '" + command + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributed differentiable architecture search for CTR models"};
  app.require_subcommand(1);
  app.fallthrough();

  Overrides o;
  app.add_option("--config", o.config, "Run config (or a manifest from an earlier run)")->required();
  app.add_option("--mode", o.mode, "supernet_only, oneshot, freshness, distributed or distdnas");
  app.add_option("--shards", o.shards, "Search on days 1..N");
  app.add_option("--parallelism", o.parallelism, "Concurrent search workers");
  app.add_option("--theta", o.theta, "Discretization threshold in (0, 1)");
  app.add_option("--gamma", o.gamma, "Cost regularization strength");
  app.add_option("--M", o.M, "Parallel copies of the interaction stack");
  app.add_option("--t-range", o.t_range, "Recurring training days a..b");
  app.add_option("--out", o.out, "Output directory (DISTDNAS_OUT takes precedence)");
  app.add_option("--seed", o.seed, "Root seed");
  app.add_option("--baseline", o.baseline, "Baseline checkpoint for relative NE");
  app.add_option("--metrics", o.metrics, "Metrics CSVs collated by frontier");

  const std::vector<std::pair<std::string, std::string>> commands{
      {"synth", "Write synthetic day shards"},
      {"importance", "Fit the FLOPs cost map and write op importance"},
      {"search", "Search architecture weights over day shards"},
      {"discretize", "Threshold aggregated weights into a binary architecture"},
      {"train", "Train the discretized model and write a checkpoint and metrics"},
      {"eval", "Evaluate a checkpoint on the evaluation day"},
      {"recurring", "Train on days 1..t and test on day t+1 for each t"},
      {"frontier", "Collate metrics CSVs into an AUC-vs-FLOPs table"}};
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    const RunConfig config = o.apply(distdnas::load_run_config(o.config));
    Pipeline pipeline(config);
    const json summary = run(command, pipeline);
    pipeline.write_manifest(command);
    std::cout << summary.dump(2) << "\n";
    return kOk;
  } catch (const distdnas::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const distdnas::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const distdnas::ParseError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
