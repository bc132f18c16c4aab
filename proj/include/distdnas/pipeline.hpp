#pragma once

// Run configuration and the artifact-producing stages used by the command
// line tool, the Python module, and the acceptance suite.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "distdnas/cost_model.hpp"
#include "distdnas/data.hpp"
#include "distdnas/model_train.hpp"
#include "distdnas/search.hpp"
#include "distdnas/supernet.hpp"

namespace distdnas {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct DayRange {
  int first = 1;
  int last = 3;
};

// Accepts "a..b" or a single day "a".
DayRange parse_day_range(std::string_view text);

struct RunConfig {
  SupernetConfig supernet;
  SearchConfig search;
  SynthConfig synth;
  TrainConfig train;
  double theta = 0.2;
  double gamma = 0.004;
  Index M = 1;
  std::uint64_t seed = 1;
  Index shards = 3;       // search on days 1..shards
  Index parallelism = 1;
  Index train_days = 3;   // train on days 1..train_days
  int eval_day = 4;
  Index importance_samples = 1000;
  DayRange t_range;
  std::string run_id = "run";
  std::filesystem::path out = "distdnas_out";
  std::filesystem::path data_dir;                // empty: <out>/data
  std::vector<std::filesystem::path> tsv;        // day k is tsv[k - 1]; empty: synthetic
  std::filesystem::path checkpoint;              // empty: <out>/model.ckpt
  std::filesystem::path baseline;                // optional checkpoint for relative NE
  std::vector<std::filesystem::path> metrics;    // frontier inputs; empty: <out>/metrics.csv

  // Throws ConfigError.
  void validate() const;

  // Sub-seeds derived from `seed`, gamma copied into the search settings
  // (zero for unregularized modes), table rows taken from the data source.
  RunConfig resolved() const;

  std::filesystem::path data_path() const { return data_dir.empty() ? out / "data" : data_dir; }
  std::filesystem::path checkpoint_path() const { return checkpoint.empty() ? out / "model.ckpt" : checkpoint; }
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

// Reads a config document or a manifest written by a previous run (its
// embedded config is used). IoError if unreadable, ConfigError if invalid.
RunConfig load_run_config(const std::filesystem::path& path);

std::uint64_t config_hash(const RunConfig& config);
std::string hex64(std::uint64_t v);
std::uint64_t file_checksum(const std::filesystem::path& path);

struct RecurringRow {
  int t = 0;
  Metrics metrics;
  std::optional<double> baseline_ne;
};

std::string recurring_csv_header();
std::string recurring_csv_line(const RecurringRow& row);

class Pipeline {
 public:
  explicit Pipeline(const RunConfig& config);

  const RunConfig& config() const { return config_; }

  DayShard load_day(int day) const;
  std::vector<DayShard> load_days(int first, int last) const;

  void synth();
  CostImportance importance();
  SearchOutcome search();
  BinaryArch discretize();
  MetricsRow train();
  MetricsRow eval();
  std::vector<RecurringRow> recurring();
  std::string frontier();

  // Writes manifest-<command>.json: config, config hash, seed and a
  // checksum for every artifact written since construction.
  void write_manifest(const std::string& command) const;

  const std::map<std::string, std::uint64_t>& artifacts() const { return artifacts_; }

 private:
  void write_text(const std::filesystem::path& rel, const std::string& text);
  void write_json(const std::filesystem::path& rel, const nlohmann::json& doc);
  void record(const std::filesystem::path& rel);
  nlohmann::json read_json(const std::filesystem::path& rel) const;
  ModelSpec discovered_spec(Index M) const;
  std::optional<double> stored_baseline_ne(const DayShard& test) const;
  // The baseline checkpoint's spec trained from scratch on `train_days`.
  std::optional<double> retrained_baseline_ne(std::span<const DayShard* const> train_days, const DayShard& test) const;

  RunConfig config_;
  std::map<std::string, std::uint64_t> artifacts_;
};

}  // namespace distdnas
