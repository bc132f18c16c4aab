#pragma once

// Tape-based reverse-mode differentiation over rank 1..3 double tensors.
//
// Operations are recorded eagerly: calling a primitive computes its value and
// appends a TapeNode. backward() walks the tape once in reverse order.
// Parameters accumulate gradients into Param::grad; embedding tables flagged
// row_sparse only ever receive gradient in the rows a Gather touched.

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "distdnas/tensor.hpp"

namespace distdnas::ad {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  int id = -1;
  bool row_sparse = false;
  // Rows with pending gradient (row_sparse only). Deduplicated via row_flag.
  std::vector<Index> touched_rows;
  std::vector<char> row_flag;

  void zero_grad();
  void touch_row(Index row);
};

class ParamSet {
 public:
  Param& create(std::string name, Tensor init, bool row_sparse = false);
  std::span<const std::unique_ptr<Param>> all() const { return params_; }
  Param* find(const std::string& name) const;
  std::size_t size() const { return params_.size(); }
  Index scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Param>> params_;
};

enum class OpKind : std::uint8_t {
  Input,
  Constant,
  Parameter,
  MatMul,
  BatchedMatMul,
  SlotMix,
  Add,
  AddBias,
  AddSlotBias,
  Mul,
  Scale,
  Concat,
  Slice,
  Reshape,
  Softmax,
  Sigmoid,
  Relu,
  Sum,
  Mean,
  BCE,
  BCEWithLogits,
  PairwiseDot,
  Gather,
  Broadcast,
  WeightedSum,
};

const char* op_name(OpKind kind);

struct TapeNode {
  OpKind kind = OpKind::Input;
  std::vector<int> inputs;
  Tensor value;
  Tensor grad;
  bool needs_grad = false;
  std::string name;

  Param* param = nullptr;
  std::vector<Param*> tables;
  std::vector<std::int32_t> ids;
  Tensor saved;
  int axis = 0;
  Index offset = 0;
  double scalar = 0.0;
  bool flag = false;
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr && id_ >= 0; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

using GradMap = std::map<int, Tensor>;

class Tape {
 public:
  explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(std::string name, Tensor value, bool requires_grad = false);
  Var constant(Tensor value);
  // A frozen parameter (requires_grad = false) behaves like a constant.
  Var param(Param& p, bool requires_grad = true);

  // Appends a computed node; validates finiteness when enabled.
  Var push(TapeNode node);

  // Seeds d(output) with `seed` and propagates to every differentiable node.
  void backward(Var output, const Tensor& seed);
  // Convenience for scalar (size-1) outputs: seed = 1.
  void backward(Var output);

  // Gradient of a node after backward (inputs created with requires_grad).
  const Tensor& grad(Var v) const;
  // Copies of the gradients of all parameters reached by this tape.
  GradMap param_gradients() const;

  const TapeNode& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }
  bool check_finite() const { return check_finite_; }
  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  Tensor& grad_slot(int id);
  void backward_node(int id);

  std::vector<TapeNode> nodes_;
  bool check_finite_;
  bool backward_done_ = false;
};

// Per-thread multiply-accumulate counter bumped by every product kernel.
// FLOPs = 2 * MACs.
std::uint64_t& mac_counter();

class FlopScope {
 public:
  FlopScope() : start_(mac_counter()) {}
  std::uint64_t flops() const { return 2 * (mac_counter() - start_); }

 private:
  std::uint64_t start_;
};

// (..., K) x (K, M) -> (..., M)
Var matmul(Var a, Var b);
// (B, N, K) x (B, K, M) -> (B, N, M); with transpose_b: (B, N, K) x (B, M, K)^T.
Var bmm(Var a, Var b, bool transpose_b = false);
// Linear map along the slot axis: (B, N, D) with W (N, M) -> (B, M, D).
Var slot_mix(Var x, Var w);
Var add(Var a, Var b);
// x (..., D) + b (D)
Var add_bias(Var x, Var b);
// x (B, N, D) + b (N), broadcast over features.
Var add_slot_bias(Var x, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var concat(std::span<const Var> xs, int axis);
Var slice(Var x, int axis, Index start, Index length);
Var reshape(Var x, Shape shape);
Var softmax(Var x, int axis);
Var sigmoid(Var x);
Var relu(Var x);
Var sum(Var x);
Var mean(Var x);
// Mean binary cross-entropy of probabilities p against 0/1 labels (same size).
Var bce(Var p, const Tensor& labels);
Var bce_with_logits(Var z, const Tensor& labels);
// (B, S, D) -> (B, S(S-1)/2): inner products of slot pairs i < j, row-major.
Var pairwise_dot(Var x);
// One row per (example, feature): ids is (batch x tables.size()) row-major.
Var gather(Tape& tape, std::span<Param* const> tables, std::span<const std::int32_t> ids, Index batch,
           bool requires_grad = true);
// (M, K) -> (batch, M, K)
Var broadcast_batch(Var x, Index batch);
// sum_j w[j] * xs[j]; w has xs.size() entries.
Var weighted_sum(std::span<const Var> xs, Var w);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace distdnas::ad
