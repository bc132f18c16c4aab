#pragma once

// Choice-block network shared by the supernet and discretized models, plus
// Gumbel-softmax mixing, normalized architecture weights, and threshold
// discretization.

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "distdnas/autodiff.hpp"
#include "distdnas/data.hpp"
#include "distdnas/interaction_ops.hpp"
#include "distdnas/rng.hpp"

namespace distdnas {

constexpr std::size_t kOps = ops::kOpsPerFamily;

struct SupernetConfig {
  Index blocks = 7;
  Index dim_d = 64;
  Index dim_s = 8;
  Index slots = 8;  // N_s
  Index heads = 2;
  double temperature = 1.0;
  Index dense_features = 13;
  Index sparse_features = 26;
  std::vector<Index> table_rows;  // empty: `default_table_rows` per feature
  Index default_table_rows = 1024;
  std::uint64_t seed = 1;

  static SupernetConfig paper_scale();
  std::vector<Index> rows() const;
  void validate() const;

  // Shapes seen by the ops of block `block` (0-based).
  ops::DenseShape dense_shape(Index block) const;
  ops::SparseShape sparse_shape(Index block) const;
  Index sparse_slots_in(Index block) const { return block == 0 ? sparse_features : slots; }

  friend bool operator==(const SupernetConfig&, const SupernetConfig&) = default;
};

void to_json(nlohmann::json& j, const SupernetConfig& c);
void from_json(const nlohmann::json& j, SupernetConfig& c);

// N x 5 logits per family. Probabilities are softmax(logits).
struct ArchWeights {
  Tensor dense;
  Tensor sparse;

  static ArchWeights zeros(Index blocks);
  Index blocks() const { return dense.shape()[0]; }
};

struct ArchProbs {
  Tensor dense;
  Tensor sparse;

  static ArchProbs uniform(Index blocks);
  Index blocks() const { return dense.shape()[0]; }
};

using OpBits = std::array<bool, kOps>;

struct BinaryArch {
  std::vector<OpBits> dense;
  std::vector<OpBits> sparse;

  Index blocks() const { return static_cast<Index>(dense.size()); }
  static BinaryArch all_enabled(Index blocks);
  static BinaryArch single(Index blocks, ops::DenseOpKind d, ops::SparseOpKind s);
  // Throws if a block/family has no op enabled or the block count differs.
  void validate(Index blocks) const;
  std::string str() const;

  friend bool operator==(const BinaryArch&, const BinaryArch&) = default;
};

// g = -log(-log u), u ~ Uniform(0, 1) open interval.
Tensor gumbel_sample(Shape shape, std::uint64_t seed);
Tensor gumbel_sample(Shape shape, Rng& rng);

// softmax over j of (logits_j + noise_j) / temperature.
std::vector<double> mixing_probabilities(std::span<const double> logits, double temperature,
                                         std::span<const double> noise = {});

// Sum_j p_j * candidates[j] with p from mixing_probabilities on the tape, so
// gradient reaches both the logits and the candidates. `logits` is any
// tensor holding the 5 values; `noise` may be empty (eval mode).
ad::Var gumbel_mix(ad::Var logits, std::span<const ad::Var> candidates, double temperature,
                   const Tensor* noise = nullptr);

ArchProbs normalized_arch(const ArchWeights& arch);

// Bit j is set iff p_j >= theta; an empty family falls back to its argmax.
BinaryArch discretize(const ArchProbs& probs, double theta);

// Structured document with the fixed field names dense_logits,
// sparse_logits, dense_probs, sparse_probs, dense_bits, sparse_bits.
nlohmann::json arch_document(const SupernetConfig& config, const ArchWeights* weights, const ArchProbs* probs,
                             const BinaryArch* bits);
ArchWeights arch_weights_from_json(const nlohmann::json& doc);
ArchProbs arch_probs_from_json(const nlohmann::json& doc);
BinaryArch binary_arch_from_json(const nlohmann::json& doc);

// Mixing weights for one block: valid Vars hold 5 probabilities per family;
// invalid Vars mean "sum the enabled ops with unit weight".
struct BlockMixing {
  ad::Var dense;
  ad::Var sparse;
};

struct ForwardOptions {
  bool train_weights = true;
  bool train_embeddings = true;
  std::span<const BlockMixing> mixing;  // empty, or one entry per block
};

// Stem, embeddings, M parallel stacks of choice blocks, and a linear head
// over the concatenated final dense outputs. Only enabled ops are built.
class ChoiceNetwork {
 public:
  ChoiceNetwork(const SupernetConfig& config, const BinaryArch& enabled, Index stacks, std::uint64_t init_seed);
  ChoiceNetwork(const ChoiceNetwork&) = delete;
  ChoiceNetwork& operator=(const ChoiceNetwork&) = delete;

  // (B, 1) logits.
  ad::Var forward(ad::Tape& tape, const Batch& batch, const ForwardOptions& options) const;

  const SupernetConfig& config() const { return config_; }
  const BinaryArch& enabled() const { return enabled_; }
  Index stacks() const { return stacks_; }
  ad::ParamSet& params() { return params_; }
  const ad::ParamSet& params() const { return params_; }
  const EmbeddingTables& embeddings() const { return embeddings_; }
  const ops::LinearMap& head() const { return head_; }

  // Analytic per-example FLOPs of everything this network computes.
  std::uint64_t flops() const;
  std::uint64_t interaction_flops() const;
  std::uint64_t stem_flops() const;
  std::uint64_t head_flops() const;
  std::uint64_t merge_flops() const;

 private:
  struct Block {
    std::unique_ptr<ops::DenseToSparseMerge> merge;
    std::array<std::unique_ptr<ops::DenseOp>, kOps> dense;
    std::array<std::unique_ptr<ops::SparseOp>, kOps> sparse;
  };

  ad::Var run_stack(ad::Tape& tape, std::span<const Block> blocks, ad::Var stem, ad::Var embedded,
                    const ForwardOptions& options) const;

  SupernetConfig config_;
  BinaryArch enabled_;
  Index stacks_;
  ad::ParamSet params_;
  EmbeddingTables embeddings_;
  ops::LinearMap stem_;
  ops::LinearMap head_;
  std::vector<std::vector<Block>> stacks_blocks_;
};

enum class ForwardMode { Search, Eval };

// The searchable supernet: every op of every block plus trainable logits.
class Supernet {
 public:
  explicit Supernet(const SupernetConfig& config);

  // Search mode samples fresh Gumbel noise from `noise_rng` for every block
  // and family; eval mode uses softmax(logits / temperature).
  ad::Var forward(ad::Tape& tape, const Batch& batch, ForwardMode mode, Rng* noise_rng, bool train_weights,
                  bool train_arch, std::vector<BlockMixing>* mixing_out = nullptr);
  // Probabilities (B,) in eval mode.
  std::vector<double> predict(const Batch& batch);

  ChoiceNetwork& network() { return network_; }
  const ChoiceNetwork& network() const { return network_; }
  ad::Param& dense_logits() { return *dense_logits_; }
  ad::Param& sparse_logits() { return *sparse_logits_; }
  ad::ParamSet& arch_params() { return arch_params_; }
  ArchWeights arch() const;
  void set_arch(const ArchWeights& arch);

 private:
  ChoiceNetwork network_;
  ad::ParamSet arch_params_;
  ad::Param* dense_logits_;
  ad::Param* sparse_logits_;
};

std::vector<double> sigmoid_values(const Tensor& logits);

}  // namespace distdnas
