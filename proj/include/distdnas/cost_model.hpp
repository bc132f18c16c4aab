#pragma once

// Analytic FLOPs accounting, random architecture sampling, the OLS cost
// map, permutation importance, and the differentiable cost regularizer.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "distdnas/supernet.hpp"

namespace distdnas {

// Column j < 5 is dense op j, column 5 + j is sparse op j.
inline constexpr std::size_t kCostColumns = 2 * kOps;

struct CostTable {
  std::vector<std::array<std::uint64_t, kCostColumns>> flops;  // [block][column]

  Index blocks() const { return static_cast<Index>(flops.size()); }
  double total() const;
};

CostTable build_cost_table(const SupernetConfig& config);

// Per-example FLOPs split into the always-on parts and the searchable ops.
struct FlopsBreakdown {
  std::uint64_t stem = 0;
  std::uint64_t merge = 0;
  std::uint64_t interactions = 0;
  std::uint64_t head = 0;
  std::uint64_t total() const { return stem + merge + interactions + head; }
};

FlopsBreakdown count_flops(const BinaryArch& arch, const SupernetConfig& config, Index stacks = 1);

struct CostSample {
  BinaryArch arch;
  std::uint64_t flops = 0;  // total per-example FLOPs
};

// Bits independently Bernoulli(0.5); an empty family gets one uniformly
// chosen op.
std::vector<CostSample> sample_cost_pairs(Index n, const SupernetConfig& config, std::uint64_t seed);

std::vector<double> arch_features(const BinaryArch& arch);  // length blocks * 10

class CostRegressor {
 public:
  double intercept = 0.0;
  std::vector<double> coefficients;     // one per feature column
  std::vector<bool> constant_columns;   // columns dropped from the fit
  double training_rmse = 0.0;

  double predict(const BinaryArch& arch) const;
  double predict(const std::vector<double>& features) const;
  bool has_constant_columns() const;
};

// Ordinary least squares from 0/1 op indicators to FLOPs. Constant columns
// are absorbed into the intercept and flagged; throws on rank deficiency.
CostRegressor fit_cost_map(const std::vector<CostSample>& samples);

struct CostImportance {
  double gamma = 0.0;
  Tensor s;        // (blocks, 10), sums to 1
  Tensor raw;      // MSE increases before normalization
  Index blocks() const { return s.shape()[0]; }
  Tensor dense_part() const;   // (blocks, 5)
  Tensor sparse_part() const;  // (blocks, 5)
};

CostImportance permutation_importance(const CostRegressor& regressor, const std::vector<CostSample>& samples,
                                      std::uint64_t seed, Index repeats = 10);

// Column labels "b<i>.<Op>" in (block, column) order.
std::vector<std::string> cost_labels(Index blocks);
nlohmann::json importance_document(const CostImportance& imp);
CostImportance importance_from_json(const nlohmann::json& doc);
std::string importance_csv(const CostImportance& imp);

struct RegularizerValue {
  double value = 0.0;
  Tensor dense_grad;   // dR / d dense logits
  Tensor sparse_grad;  // dR / d sparse logits
};

// R = gamma * sum_ij softmax(logits)_ij * s_ij, with its closed-form gradient.
RegularizerValue cost_regularizer(const ArchWeights& arch, const CostImportance& imp, double gamma);
// The same quantity recorded on a tape (logits are (blocks, 5) Vars).
ad::Var cost_regularizer(ad::Var dense_logits, ad::Var sparse_logits, const CostImportance& imp, double gamma);

}  // namespace distdnas
