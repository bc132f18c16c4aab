#pragma once

// Day-sharded CTR data: synthetic generator, Criteo TSV reader, binary shard
// cache, batch iteration, and embedding tables.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "distdnas/autodiff.hpp"
#include "distdnas/rng.hpp"

namespace distdnas {

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// A contiguous mini-batch: dense is (size x dense_features) row-major,
// ids is (size x sparse_features) row-major, labels are 0/1.
struct Batch {
  Index size = 0;
  Index dense_features = 0;
  Index sparse_features = 0;
  std::vector<double> dense;
  std::vector<std::int32_t> ids;
  std::vector<double> labels;

  Tensor dense_tensor() const;
  Tensor label_tensor() const;
};

struct DayShard {
  int day = 0;
  std::string source;  // "synthetic" or "tsv"
  Index dense_features = 0;
  Index sparse_features = 0;
  std::vector<double> dense;
  std::vector<std::int32_t> ids;
  std::vector<double> labels;

  Index size() const { return static_cast<Index>(labels.size()); }
  Batch gather(std::span<const Index> rows) const;
  Batch all() const;
  double positive_rate() const;
};

struct PlantedPair {
  int first = 0;
  int second = 0;
};

struct SynthConfig {
  Index dense_features = 13;
  Index sparse_features = 26;
  std::vector<Index> cardinalities;  // empty: `cardinality` for every feature
  Index cardinality = 1000;
  Index table_cap = 1024;
  double drift = 0.2;  // delta
  double zipf_exponent = 1.1;
  std::vector<PlantedPair> planted{{0, 1}, {2, 3}, {4, 5}, {6, 7}};
  Index latent_dim = 4;
  double interaction_scale = 1.0;
  double dense_scale = 0.3;
  double category_scale = 0.3;
  double bias = -1.5;
  double label_noise = 0.02;  // symmetric flip probability
  Index examples_per_day = 100000;
  int days = 4;
  std::uint64_t seed = 1;

  Index cardinality_of(Index feature) const;
  // Embedding rows per sparse feature: min(cardinality, cap).
  std::vector<Index> table_rows() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

// The generator's ground truth; shared by every day of one seed.
class SyntheticWorld {
 public:
  explicit SyntheticWorld(SynthConfig config);

  const SynthConfig& config() const { return config_; }
  DayShard generate_day(int day) const;
  // True logit (before label noise) for one example.
  double logit(std::span<const double> dense, std::span<const std::int32_t> ids) const;
  // P(y = 1 | x) including label flips.
  double bayes_probability(std::span<const double> dense, std::span<const std::int32_t> ids) const;

 private:
  SynthConfig config_;
  std::vector<double> dense_weights_;
  std::vector<std::vector<double>> category_effects_;  // [feature][category]
  std::vector<std::vector<double>> latents_;           // [feature][category * latent_dim]
};

DayShard generate_synthetic_day(const SynthConfig& config, int day);

// Criteo display-ads lines: label, 13 integers, 26 hex categoricals.
DayShard parse_criteo_tsv(const std::filesystem::path& path, Index table_rows, int day = 1);
DayShard parse_criteo_lines(std::istream& in, Index table_rows, int day = 1);
std::int32_t hash_categorical(std::string_view value, Index table_rows);
double normalize_integer(double x);

// Versioned binary cache: magic, JSON header length, JSON header, arrays.
void write_shard_cache(const std::filesystem::path& path, const DayShard& shard, const nlohmann::json& header_extra);
DayShard read_shard_cache(const std::filesystem::path& path);

// Deterministic within-shard permutation; ceil(n / batch) batches, the last
// one partial.
class BatchIterator {
 public:
  BatchIterator(const DayShard& shard, Index batch_size, std::uint64_t shuffle_seed, bool shuffle = true);

  bool next(Batch& out);
  Index batches() const;
  void reset();

 private:
  const DayShard* shard_;
  Index batch_size_;
  std::vector<Index> order_;
  Index cursor_ = 0;
};

// Capped per-feature embedding tables with row-sparse gradients.
class EmbeddingTables {
 public:
  EmbeddingTables() = default;
  EmbeddingTables(ad::ParamSet& params, std::span<const Index> rows, Index dim, Rng& rng,
                  const std::string& prefix = "embedding");

  // (B, F_sparse, dim) gather from the batch's ids.
  ad::Var lookup(ad::Tape& tape, const Batch& batch, bool trainable = true) const;
  std::span<ad::Param* const> tables() const { return tables_; }
  Index dim() const { return dim_; }

 private:
  std::vector<ad::Param*> tables_;
  Index dim_ = 0;
};

ad::Var embedding_lookup(ad::Tape& tape, std::span<ad::Param* const> tables, const Batch& batch,
                         bool trainable = true);

// Two-sample Kolmogorov-Smirnov statistic.
double ks_statistic(std::vector<double> a, std::vector<double> b);

}  // namespace distdnas
