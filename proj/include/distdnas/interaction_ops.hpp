#pragma once

// Dense and sparse feature-interaction modules.
//
// Dense ops map a block's dense inputs to (B, dim_d); sparse ops map the
// merged sparse input (dense slot prepended) to (B, N_s, dim_s). Every op
// owns the projection it needs when its input dims differ from the output
// contract, and reports its analytic per-example FLOPs (2 per multiply-add,
// biases / activations / softmax / elementwise products free).

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "distdnas/autodiff.hpp"
#include "distdnas/rng.hpp"

namespace distdnas::ops {

using ad::Var;

enum class DenseOpKind : std::uint8_t { Identity, Linear, DotProduct, CrossNet, PIN };
enum class SparseOpKind : std::uint8_t { Identity3D, Linear3D, EmbedFC, Transformer, PMA };

inline constexpr std::size_t kOpsPerFamily = 5;
inline constexpr std::array<DenseOpKind, kOpsPerFamily> kDenseRoster{
    DenseOpKind::Identity, DenseOpKind::Linear, DenseOpKind::DotProduct, DenseOpKind::CrossNet, DenseOpKind::PIN};
inline constexpr std::array<SparseOpKind, kOpsPerFamily> kSparseRoster{
    SparseOpKind::Identity3D, SparseOpKind::Linear3D, SparseOpKind::EmbedFC, SparseOpKind::Transformer,
    SparseOpKind::PMA};

std::string_view name(DenseOpKind k);
std::string_view name(SparseOpKind k);
DenseOpKind dense_kind_from_name(std::string_view s);
SparseOpKind sparse_kind_from_name(std::string_view s);

struct DenseShape {
  Index joined_width = 0;  // concatenated block dense input (Identity, Linear, DotProduct)
  Index source_width = 0;  // one predecessor output (CrossNet, PIN)
  Index sparse_slots = 0;  // sparse input slots seen by DotProduct
  Index dim_s = 0;
  Index dim_d = 0;
};

struct SparseShape {
  Index slots_in = 0;  // after the dense slot is prepended
  Index dim_s = 0;
  Index slots_out = 0;  // N_s
  Index heads = 1;      // Transformer only
};

std::uint64_t dense_op_flops(DenseOpKind kind, const DenseShape& s);
std::uint64_t sparse_op_flops(SparseOpKind kind, const SparseShape& s);
std::uint64_t merge_flops(Index joined_width, Index dim_s);

// Dense block inputs. `joined` is concat(state, base) inside a block; for a
// single-source call all three refer to the same tensor.
struct DenseInputs {
  Var joined;
  Var state;  // most recent predecessor output
  Var base;   // the predecessor before it
  Var sparse;

  static DenseInputs single(Var x, Var xs = {}) { return {x, x, x, xs}; }
};

// x W (+ b), weights drawn uniform(+-1/sqrt(fan_in)), bias zero.
struct LinearMap {
  ad::Param* weight = nullptr;
  ad::Param* bias = nullptr;

  static LinearMap create(ad::ParamSet& params, Rng& rng, const std::string& name, Index in, Index out,
                          bool with_bias);
  Var apply(Var x, bool trainable = true) const;
};

class DenseOp {
 public:
  DenseOp(DenseOpKind kind, DenseShape shape, ad::ParamSet& params, Rng& rng, const std::string& prefix);

  Var forward(const DenseInputs& in, bool trainable = true) const;
  DenseOpKind kind() const { return kind_; }
  const DenseShape& shape() const { return shape_; }
  std::uint64_t flops() const { return dense_op_flops(kind_, shape_); }
  Index param_count() const;

  // Exposed for tests that pin weights to closed-form values.
  std::optional<LinearMap> main, projection, sparse_projection;

 private:
  DenseOpKind kind_;
  DenseShape shape_;
};

class SparseOp {
 public:
  SparseOp(SparseOpKind kind, SparseShape shape, ad::ParamSet& params, Rng& rng, const std::string& prefix);

  // xs: (B, slots_in, dim_s), already merged.
  Var forward(Var xs, bool trainable = true) const;
  SparseOpKind kind() const { return kind_; }
  const SparseShape& shape() const { return shape_; }
  std::uint64_t flops() const { return sparse_op_flops(kind_, shape_); }
  Index param_count() const;

  ad::Param* feature_weight = nullptr;  // Linear3D
  ad::Param* feature_bias = nullptr;    // Linear3D
  ad::Param* slot_weight = nullptr;     // EmbedFC, or the mismatch projection
  ad::Param* slot_bias = nullptr;       // EmbedFC
  ad::Param* query = nullptr;           // Transformer
  ad::Param* key = nullptr;             // Transformer, PMA
  ad::Param* value = nullptr;           // Transformer, PMA
  ad::Param* output = nullptr;          // Transformer
  ad::Param* seeds = nullptr;           // PMA

 private:
  Var project_slots(Var x, bool trainable) const;

  SparseOpKind kind_;
  SparseShape shape_;
};

// Projects the dense input to dim_s and prepends it as slot 0 of xs.
class DenseToSparseMerge {
 public:
  DenseToSparseMerge(Index joined_width, Index dim_s, ad::ParamSet& params, Rng& rng, const std::string& prefix);

  Var forward(Var dense, Var xs, bool trainable = true) const;
  std::uint64_t flops() const { return merge_flops(map.weight->value.shape()[0], map.weight->value.shape()[1]); }

  LinearMap map;
};

}  // namespace distdnas::ops
