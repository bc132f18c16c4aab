#pragma once

// Standalone models built from a BinaryArch, single-pass training with Adam
// (dense) and sparse Adagrad (embeddings), evaluation metrics, checkpoints.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "distdnas/supernet.hpp"

namespace distdnas {

class DivergenceError : public Error {
 public:
  using Error::Error;
};

struct ModelSpec {
  BinaryArch arch;
  SupernetConfig config;
  Index M = 1;
  // Every op enabled and mixed with constant weight 1/5 (trains the supernet itself).
  bool supernet_uniform = false;
  std::uint64_t init_seed = 1;
};

void to_json(nlohmann::json& j, const ModelSpec& s);
ModelSpec model_spec_from_json(const nlohmann::json& j);

class Model {
 public:
  explicit Model(ModelSpec spec);

  ad::Var forward(ad::Tape& tape, const Batch& batch, bool train) const;
  std::vector<double> predict(const Batch& batch) const;
  std::vector<double> predict(const DayShard& shard, Index chunk = 4096) const;

  const ModelSpec& spec() const { return spec_; }
  ChoiceNetwork& network() { return net_; }
  const ChoiceNetwork& network() const { return net_; }
  ad::ParamSet& params() { return net_.params(); }
  const ad::ParamSet& params() const { return net_.params(); }
  Index param_count() const { return net_.params().scalar_count(); }
  std::uint64_t flops() const { return net_.flops(); }

 private:
  ModelSpec spec_;
  ChoiceNetwork net_;
};

std::unique_ptr<Model> build_model(const ModelSpec& spec);

// Linear ramp from lr/warmup to lr over `warmup_steps`, then constant.
double warmup_lr(double lr, Index step, Index warmup_steps);
Index warmup_steps_for(double fraction, Index total_steps);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}
  void step(std::span<ad::Param* const> params, double lr);
  Index steps() const { return t_; }

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };
  AdamConfig config_;
  Index t_ = 0;
  std::map<int, Moments> state_;
};

// Row-wise Adagrad: only rows with pending gradient are read or written.
class SparseAdagrad {
 public:
  explicit SparseAdagrad(double eps = 1e-8) : eps_(eps) {}
  void step(std::span<ad::Param* const> tables, double lr);

 private:
  double eps_;
  std::map<int, Tensor> accumulators_;
};

struct TrainConfig {
  Index batch_size = 256;
  double dense_lr = 1e-3;
  double sparse_lr = 0.04;
  double warmup_fraction = 0.05;
  AdamConfig adam;
  double adagrad_eps = 1e-8;
  bool shuffle = true;
  bool check_finite = false;
  std::uint64_t seed = 1;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainResult {
  std::vector<double> losses;  // one per step
  Index examples = 0;
};

// One pass over the shards in order, shuffling inside each shard.
TrainResult train_model(Model& model, std::span<const DayShard* const> shards, const TrainConfig& config);

struct Metrics {
  double logloss = 0.0;
  double auc = 0.0;
  double ne = 0.0;
  std::optional<double> relative_ne;
  Index examples = 0;
};

double log_loss(std::span<const double> p, std::span<const double> y);
double auc_score(std::span<const double> scores, std::span<const double> y);
double binary_entropy(double q);
Metrics compute_metrics(std::span<const double> p, std::span<const double> y,
                        std::optional<double> baseline_ne = std::nullopt);
Metrics evaluate_model(const Model& model, const DayShard& shard, std::optional<double> baseline_ne = std::nullopt);

struct MetricsRow {
  std::string run_id;
  std::string mode;
  Index M = 1;
  std::uint64_t flops = 0;
  Index params = 0;
  Metrics metrics;
};

std::string metrics_csv_header();
std::string metrics_csv_line(const MetricsRow& row);
std::string format_g6(double v);

void save_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& extra = {});
std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

}  // namespace distdnas
