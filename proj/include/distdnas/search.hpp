#pragma once

// Per-shard architecture search, the averaging aggregator, and the
// run-mode orchestrator with thread-level parallelism over day shards.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "distdnas/cost_model.hpp"
#include "distdnas/model_train.hpp"
#include "distdnas/supernet.hpp"

namespace distdnas {

enum class SearchMode { SupernetOnly, OneShot, Freshness, Distributed, DistDNAS };

std::string_view mode_name(SearchMode m);
SearchMode mode_from_name(std::string_view s);

struct SearchConfig {
  SearchMode mode = SearchMode::DistDNAS;
  std::optional<Index> max_steps;  // cap on steps per search_shard call
  Index batch_size = 256;
  double gamma = 0.004;
  double dense_lr = 1e-3;
  double sparse_lr = 0.04;
  double arch_lr = 0.03;
  double warmup_fraction = 0.05;
  std::uint64_t seed = 1;

  // distributed requires gamma == 0, distdnas requires gamma > 0.
  void validate() const;
  bool regularized() const { return mode == SearchMode::DistDNAS; }
};

void to_json(nlohmann::json& j, const SearchConfig& c);
void from_json(const nlohmann::json& j, SearchConfig& c);

struct ShardResult {
  int day = 0;
  SupernetConfig config;
  ArchWeights arch;
  std::vector<double> losses;  // one per executed step
  Index examples = 0;
  double seconds = 0.0;
};

// Searches one shard (or a day-ordered concatenation; the result's day is
// the first shard's). Batches never straddle days; odd steps update the
// logits, even steps the supernet weights.
ShardResult search_shard(std::span<const DayShard* const> data, const SupernetConfig& config,
                         const SearchConfig& search, const CostImportance* importance);

// Mean of the per-shard noise-free probabilities, independent of order.
ArchProbs aggregate(std::span<const ShardResult> results);

struct SearchOutcome {
  SearchMode mode = SearchMode::DistDNAS;
  ArchProbs probs;
  std::vector<ShardResult> shards;
  bool train_supernet = false;
  Index parallelism = 1;
  double total_seconds = 0.0;

  nlohmann::json report() const;
};

SearchOutcome run_search(std::span<const DayShard* const> shards, const SupernetConfig& config,
                         const SearchConfig& search, Index parallelism, const CostImportance* importance);

// Cost importance from 1000 sampled architectures (OLS + permutation).
CostImportance default_cost_importance(const SupernetConfig& config, std::uint64_t seed, Index samples = 1000);

}  // namespace distdnas
