#include "distdnas/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace distdnas::ad {

namespace {

struct AxisSplit {
  Index outer = 1;
  Index length = 1;
  Index inner = 1;
};

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ShapeError("axis " + std::to_string(axis) + " out of range");
  return a;
}

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit out;
  for (int i = 0; i < axis; ++i) out.outer *= s[i];
  out.length = s[axis];
  for (int i = axis + 1; i < s.rank; ++i) out.inner *= s[i];
  return out;
}

Tape& tape_of(std::initializer_list<Var> vars, const char* op) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw Error(std::string(op) + ": invalid operand");
    if (t != nullptr && v.tape() != t) throw Error(std::string(op) + ": operands on different tapes");
    t = v.tape();
  }
  return *t;
}

TapeNode make_node(OpKind kind, std::initializer_list<Var> in) {
  TapeNode n;
  n.kind = kind;
  for (const Var& v : in) {
    n.inputs.push_back(v.id());
    n.needs_grad = n.needs_grad || v.tape()->node(v.id()).needs_grad;
  }
  return n;
}

// The detail expression is only evaluated when the check fails.
#define DISTDNAS_REQUIRE(ok, op, detail)                                  \
  do {                                                                    \
    if (!(ok)) throw ShapeError(std::string(op) + ": " + (detail));      \
  } while (false)

// Raw kernels for the per-example products inside bmm and slot_mix. The
// matrices there are a few dozen rows wide, far below where GEMM blocking pays.

// C (n x m) += A (n x k) * B (k x m)
void gemm_nn(double* c, const double* a, const double* b, Index n, Index k, Index m) {
  for (Index i = 0; i < n; ++i) {
    double* ci = c + i * m;
    for (Index p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* bp = b + p * m;
      for (Index j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// C (k x m) += A (n x k)^T * B (n x m)
void gemm_tn(double* c, const double* a, const double* b, Index n, Index k, Index m) {
  for (Index i = 0; i < n; ++i) {
    const double* bi = b + i * m;
    for (Index p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* cp = c + p * m;
      for (Index j = 0; j < m; ++j) cp[j] += av * bi[j];
    }
  }
}

// C (n x m) += A (n x k) * B (m x k)^T, via a transposed copy of B.
void gemm_nt(double* c, const double* a, const double* b, Index n, Index k, Index m) {
  thread_local std::vector<double> bt;
  bt.resize(static_cast<std::size_t>(k * m));
  for (Index j = 0; j < m; ++j)
    for (Index p = 0; p < k; ++p) bt[static_cast<std::size_t>(p * m + j)] = b[j * k + p];
  gemm_nn(c, a, bt.data(), n, k, m);
}

inline double sigmoid_scalar(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

constexpr double kProbClamp = 1e-15;

}  // namespace

void Param::zero_grad() {
  if (row_sparse) {
    const Index width = grad.shape().last();
    for (Index r : touched_rows) {
      std::fill_n(grad.data() + r * width, width, 0.0);
      row_flag[static_cast<std::size_t>(r)] = 0;
    }
    touched_rows.clear();
  } else {
    grad.fill(0.0);
  }
}

void Param::touch_row(Index row) {
  if (!row_flag[static_cast<std::size_t>(row)]) {
    row_flag[static_cast<std::size_t>(row)] = 1;
    touched_rows.push_back(row);
  }
}

Param& ParamSet::create(std::string name, Tensor init, bool row_sparse) {
  auto p = std::make_unique<Param>();
  p->name = std::move(name);
  p->grad = Tensor(init.shape(), 0.0);
  p->value = std::move(init);
  p->id = static_cast<int>(params_.size());
  p->row_sparse = row_sparse;
  if (row_sparse) p->row_flag.assign(static_cast<std::size_t>(p->value.shape()[0]), 0);
  params_.push_back(std::move(p));
  return *params_.back();
}

Param* ParamSet::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

Index ParamSet::scalar_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Constant: return "constant";
    case OpKind::Parameter: return "parameter";
    case OpKind::MatMul: return "matmul";
    case OpKind::BatchedMatMul: return "bmm";
    case OpKind::SlotMix: return "slot_mix";
    case OpKind::Add: return "add";
    case OpKind::AddBias: return "add_bias";
    case OpKind::AddSlotBias: return "add_slot_bias";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Reshape: return "reshape";
    case OpKind::Softmax: return "softmax";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Relu: return "relu";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::BCE: return "bce";
    case OpKind::BCEWithLogits: return "bce_with_logits";
    case OpKind::PairwiseDot: return "pairwise_dot";
    case OpKind::Gather: return "gather";
    case OpKind::Broadcast: return "broadcast_batch";
    case OpKind::WeightedSum: return "weighted_sum";
  }
  return "unknown";
}

std::uint64_t& mac_counter() {
  thread_local std::uint64_t counter = 0;
  return counter;
}

const Tensor& Var::value() const { return tape_->node(id_).value; }

Var Tape::input(std::string name, Tensor value, bool requires_grad) {
  TapeNode n;
  n.kind = OpKind::Input;
  n.name = std::move(name);
  n.value = std::move(value);
  n.needs_grad = requires_grad;
  return push(std::move(n));
}

Var Tape::constant(Tensor value) {
  TapeNode n;
  n.kind = OpKind::Constant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::param(Param& p, bool requires_grad) {
  TapeNode n;
  n.kind = OpKind::Parameter;
  n.name = p.name;
  n.param = &p;
  n.value = p.value;
  n.needs_grad = requires_grad;
  return push(std::move(n));
}

Var Tape::push(TapeNode node) {
  if (check_finite_ && !node.value.all_finite()) {
    throw NonFiniteError(std::string(op_name(node.kind)) + " (node " + std::to_string(nodes_.size()) +
                         (node.name.empty() ? "" : ", " + node.name) + ") produced non-finite values");
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Tensor& Tape::grad_slot(int id) {
  TapeNode& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

const Tensor& Tape::grad(Var v) const {
  if (v.tape() != this) throw Error("grad: variable from another tape");
  const TapeNode& n = node(v.id());
  if (!backward_done_) throw Error("grad: backward has not run");
  if (!n.needs_grad) throw Error("grad: node does not require gradient");
  return n.grad;
}

GradMap Tape::param_gradients() const {
  GradMap out;
  for (const TapeNode& n : nodes_) {
    if (!n.needs_grad) continue;
    if (n.param != nullptr) out[n.param->id] = n.param->grad;
    for (Param* t : n.tables) out[t->id] = t->grad;
  }
  return out;
}

void Tape::backward(Var output) {
  if (!output.valid() || output.tape() != this || nodes_.empty())
    throw Error("backward called before forward");
  backward(output, Tensor(output.shape(), 1.0));
}

void Tape::backward(Var output, const Tensor& seed) {
  if (!output.valid() || output.tape() != this || nodes_.empty())
    throw Error("backward called before forward");
  if (backward_done_) throw Error("backward already ran on this tape");
  if (!(seed.shape() == output.shape()))
    throw ShapeError("backward: seed " + seed.shape().str() + " does not match output " +
                     output.shape().str());
  backward_done_ = true;
  grad_slot(output.id()) = seed;
  for (int id = output.id(); id >= 0; --id) {
    const TapeNode& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.grad.empty()) continue;
    backward_node(id);
  }
}

void Tape::backward_node(int id) {
  TapeNode& n = nodes_[static_cast<std::size_t>(id)];
  const Tensor& g = n.grad;
  auto wants = [&](std::size_t k) { return nodes_[static_cast<std::size_t>(n.inputs[k])].needs_grad; };
  auto in_value = [&](std::size_t k) -> const Tensor& {
    return nodes_[static_cast<std::size_t>(n.inputs[k])].value;
  };

  switch (n.kind) {
    case OpKind::Input:
    case OpKind::Constant:
      break;

    case OpKind::Parameter: {
      const Index sz = g.size();
      double* dst = n.param->grad.data();
      for (Index i = 0; i < sz; ++i) dst[i] += g[i];
      break;
    }

    case OpKind::MatMul: {
      const Tensor& a = in_value(0);
      const Tensor& b = in_value(1);
      if (wants(0)) grad_slot(n.inputs[0]).matrix().noalias() += g.matrix() * b.matrix().transpose();
      if (wants(1)) grad_slot(n.inputs[1]).matrix().noalias() += a.matrix().transpose() * g.matrix();
      break;
    }

    case OpKind::BatchedMatMul: {
      const Tensor& a = in_value(0);
      const Tensor& b = in_value(1);
      const Index batch = a.shape()[0];
      const Index an = a.shape()[1], ak = a.shape()[2];
      const Index bn = b.shape()[1], bk = b.shape()[2];
      const Index gn = g.shape()[1], gm = g.shape()[2];
      Tensor* da = wants(0) ? &grad_slot(n.inputs[0]) : nullptr;
      Tensor* db = wants(1) ? &grad_slot(n.inputs[1]) : nullptr;
      for (Index i = 0; i < batch; ++i) {
        const double* A = a.data() + i * an * ak;
        const double* B = b.data() + i * bn * bk;
        const double* G = g.data() + i * gn * gm;
        if (n.flag) {
          if (da) gemm_nn(da->data() + i * an * ak, G, B, gn, gm, bk);
          if (db) gemm_tn(db->data() + i * bn * bk, G, A, gn, gm, ak);
        } else {
          if (da) gemm_nt(da->data() + i * an * ak, G, B, gn, gm, bn);
          if (db) gemm_tn(db->data() + i * bn * bk, A, G, an, ak, gm);
        }
      }
      break;
    }

    case OpKind::SlotMix: {
      const Tensor& x = in_value(0);
      const Tensor& w = in_value(1);
      const Index batch = x.shape()[0], slots = x.shape()[1], width = x.shape()[2];
      const Index out_slots = w.shape()[1];
      Tensor* dx = wants(0) ? &grad_slot(n.inputs[0]) : nullptr;
      Tensor* dw = wants(1) ? &grad_slot(n.inputs[1]) : nullptr;
      for (Index i = 0; i < batch; ++i) {
        const double* X = x.data() + i * slots * width;
        const double* G = g.data() + i * out_slots * width;
        if (dx) gemm_nn(dx->data() + i * slots * width, w.data(), G, slots, out_slots, width);
        if (dw) gemm_nt(dw->data(), X, G, slots, width, out_slots);
      }
      break;
    }

    case OpKind::Add:
      for (std::size_t k = 0; k < 2; ++k)
        if (wants(k)) grad_slot(n.inputs[k]).matrix() += g.matrix();
      break;

    case OpKind::AddBias:
      if (wants(0)) grad_slot(n.inputs[0]).matrix() += g.matrix();
      if (wants(1)) {
        Tensor& db = grad_slot(n.inputs[1]);
        MatMap(db.data(), 1, db.size()).noalias() += g.matrix().colwise().sum();
      }
      break;

    case OpKind::AddSlotBias: {
      if (wants(0)) grad_slot(n.inputs[0]).matrix() += g.matrix();
      if (wants(1)) {
        Tensor& db = grad_slot(n.inputs[1]);
        const Index batch = g.shape()[0], slots = g.shape()[1], width = g.shape()[2];
        for (Index i = 0; i < batch; ++i)
          for (Index s = 0; s < slots; ++s) {
            double acc = 0.0;
            const double* row = g.data() + (i * slots + s) * width;
            for (Index d = 0; d < width; ++d) acc += row[d];
            db[s] += acc;
          }
      }
      break;
    }

    case OpKind::Mul: {
      const Tensor& a = in_value(0);
      const Tensor& b = in_value(1);
      if (wants(0)) grad_slot(n.inputs[0]).matrix().array() += g.matrix().array() * b.matrix().array();
      if (wants(1)) grad_slot(n.inputs[1]).matrix().array() += g.matrix().array() * a.matrix().array();
      break;
    }

    case OpKind::Scale:
      if (wants(0)) grad_slot(n.inputs[0]).matrix() += n.scalar * g.matrix();
      break;

    case OpKind::Concat: {
      const AxisSplit outs = split_at(n.value.shape(), n.axis);
      Index offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Index len = in_value(k).shape()[n.axis];
        if (wants(k)) {
          Tensor& dx = grad_slot(n.inputs[k]);
          const Index chunk = len * outs.inner;
          for (Index o = 0; o < outs.outer; ++o) {
            const double* src = g.data() + o * outs.length * outs.inner + offset * outs.inner;
            double* dst = dx.data() + o * chunk;
            for (Index i = 0; i < chunk; ++i) dst[i] += src[i];
          }
        }
        offset += len;
      }
      break;
    }

    case OpKind::Slice: {
      if (!wants(0)) break;
      const Tensor& x = in_value(0);
      const AxisSplit ins = split_at(x.shape(), n.axis);
      const Index len = n.value.shape()[n.axis];
      const Index chunk = len * ins.inner;
      Tensor& dx = grad_slot(n.inputs[0]);
      for (Index o = 0; o < ins.outer; ++o) {
        double* dst = dx.data() + o * ins.length * ins.inner + n.offset * ins.inner;
        const double* src = g.data() + o * chunk;
        for (Index i = 0; i < chunk; ++i) dst[i] += src[i];
      }
      break;
    }

    case OpKind::Reshape:
      if (wants(0)) {
        Tensor& dx = grad_slot(n.inputs[0]);
        for (Index i = 0; i < g.size(); ++i) dx[i] += g[i];
      }
      break;

    case OpKind::Softmax: {
      if (!wants(0)) break;
      const AxisSplit s = split_at(n.value.shape(), n.axis);
      Tensor& dx = grad_slot(n.inputs[0]);
      const Tensor& y = n.value;
      if (s.inner == 1) {
        ConstMatMap Y(y.data(), s.outer, s.length);
        ConstMatMap G(g.data(), s.outer, s.length);
        const Eigen::VectorXd dot = G.cwiseProduct(Y).rowwise().sum();
        MatMap(dx.data(), s.outer, s.length).array() += Y.array() * (G.colwise() - dot).array();
        break;
      }
      for (Index o = 0; o < s.outer; ++o)
        for (Index in = 0; in < s.inner; ++in) {
          const Index base = o * s.length * s.inner + in;
          double dot = 0.0;
          for (Index l = 0; l < s.length; ++l) dot += g[base + l * s.inner] * y[base + l * s.inner];
          for (Index l = 0; l < s.length; ++l) {
            const Index idx = base + l * s.inner;
            dx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      break;
    }

    case OpKind::Sigmoid:
      if (wants(0)) {
        Tensor& dx = grad_slot(n.inputs[0]);
        for (Index i = 0; i < g.size(); ++i) dx[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
      }
      break;

    case OpKind::Relu:
      if (wants(0)) {
        Tensor& dx = grad_slot(n.inputs[0]);
        const Tensor& x = in_value(0);
        for (Index i = 0; i < g.size(); ++i)
          if (x[i] > 0.0) dx[i] += g[i];
      }
      break;

    case OpKind::Sum:
    case OpKind::Mean:
      if (wants(0)) {
        Tensor& dx = grad_slot(n.inputs[0]);
        const double scale = n.kind == OpKind::Mean ? g[0] / static_cast<double>(dx.size()) : g[0];
        for (Index i = 0; i < dx.size(); ++i) dx[i] += scale;
      }
      break;

    case OpKind::BCE:
      if (wants(0)) {
        const Tensor& p = in_value(0);
        Tensor& dp = grad_slot(n.inputs[0]);
        const double inv = g[0] / static_cast<double>(p.size());
        for (Index i = 0; i < p.size(); ++i) {
          const double q = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
          const double y = n.saved[i];
          dp[i] += inv * (q - y) / (q * (1.0 - q));
        }
      }
      break;

    case OpKind::BCEWithLogits:
      if (wants(0)) {
        const Tensor& z = in_value(0);
        Tensor& dz = grad_slot(n.inputs[0]);
        const double inv = g[0] / static_cast<double>(z.size());
        for (Index i = 0; i < z.size(); ++i) dz[i] += inv * (sigmoid_scalar(z[i]) - n.saved[i]);
      }
      break;

    case OpKind::PairwiseDot: {
      if (!wants(0)) break;
      const Tensor& x = in_value(0);
      Tensor& dx = grad_slot(n.inputs[0]);
      const Index batch = x.shape()[0], slots = x.shape()[1], width = x.shape()[2];
      const Index pairs = n.value.shape()[1];
      for (Index b = 0; b < batch; ++b) {
        const double* xb = x.data() + b * slots * width;
        double* db = dx.data() + b * slots * width;
        const double* gb = g.data() + b * pairs;
        Index p = 0;
        for (Index i = 0; i < slots; ++i)
          for (Index j = i + 1; j < slots; ++j, ++p) {
            const double gp = gb[p];
            for (Index d = 0; d < width; ++d) {
              db[i * width + d] += gp * xb[j * width + d];
              db[j * width + d] += gp * xb[i * width + d];
            }
          }
      }
      break;
    }

    case OpKind::Gather: {
      const Index batch = g.shape()[0], fields = g.shape()[1], width = g.shape()[2];
      for (Index b = 0; b < batch; ++b)
        for (Index f = 0; f < fields; ++f) {
          Param& table = *n.tables[static_cast<std::size_t>(f)];
          const Index row = n.ids[static_cast<std::size_t>(b * fields + f)];
          table.touch_row(row);
          double* dst = table.grad.data() + row * width;
          const double* src = g.data() + (b * fields + f) * width;
          for (Index d = 0; d < width; ++d) dst[d] += src[d];
        }
      break;
    }

    case OpKind::Broadcast:
      if (wants(0)) {
        Tensor& dx = grad_slot(n.inputs[0]);
        const Index chunk = dx.size();
        const Index batch = g.shape()[0];
        for (Index b = 0; b < batch; ++b)
          for (Index i = 0; i < chunk; ++i) dx[i] += g[b * chunk + i];
      }
      break;

    case OpKind::WeightedSum: {
      const std::size_t k = n.inputs.size() - 1;
      const Tensor& w = in_value(k);
      for (std::size_t j = 0; j < k; ++j) {
        if (wants(j)) grad_slot(n.inputs[j]).matrix() += w[static_cast<Index>(j)] * g.matrix();
      }
      if (wants(k)) {
        Tensor& dw = grad_slot(n.inputs[k]);
        for (std::size_t j = 0; j < k; ++j) {
          const Tensor& x = in_value(j);
          double acc = 0.0;
          for (Index i = 0; i < x.size(); ++i) acc += x[i] * g[i];
          dw[static_cast<Index>(j)] += acc;
        }
      }
      break;
    }
  }
}

// ---- forward primitives ---------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& t = tape_of({a, b}, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  DISTDNAS_REQUIRE(sb.rank == 2 && sa.rank >= 2 && sa.last() == sb[0], "matmul",
          "lhs " + sa.str() + " incompatible with rhs " + sb.str());
  Shape out = sa;
  out.dims[static_cast<std::size_t>(sa.rank - 1)] = sb[1];
  TapeNode n = make_node(OpKind::MatMul, {a, b});
  n.value = Tensor(out);
  n.value.matrix().noalias() = a.value().matrix() * b.value().matrix();
  mac_counter() += static_cast<std::uint64_t>(sa.rows() * sa.last() * sb[1]);
  return t.push(std::move(n));
}

Var bmm(Var a, Var b, bool transpose_b) {
  Tape& t = tape_of({a, b}, "bmm");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  DISTDNAS_REQUIRE(sa.rank == 3 && sb.rank == 3 && sa[0] == sb[0], "bmm", "batch mismatch " + sa.str() + " vs " + sb.str());
  const Index k = sa[2];
  const Index m = transpose_b ? sb[1] : sb[2];
  DISTDNAS_REQUIRE((transpose_b ? sb[2] : sb[1]) == k, "bmm", "inner dim mismatch " + sa.str() + " vs " + sb.str());
  TapeNode n = make_node(OpKind::BatchedMatMul, {a, b});
  n.flag = transpose_b;
  n.value = Tensor(Shape{sa[0], sa[1], m});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (Index i = 0; i < sa[0]; ++i) {
    const double* A = av.data() + i * sa[1] * k;
    const double* B = bv.data() + i * sb[1] * sb[2];
    double* C = n.value.data() + i * sa[1] * m;
    if (transpose_b)
      gemm_nt(C, A, B, sa[1], k, m);
    else
      gemm_nn(C, A, B, sa[1], k, m);
  }
  mac_counter() += static_cast<std::uint64_t>(sa[0] * sa[1] * k * m);
  return t.push(std::move(n));
}

Var slot_mix(Var x, Var w) {
  Tape& t = tape_of({x, w}, "slot_mix");
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  DISTDNAS_REQUIRE(sx.rank == 3 && sw.rank == 2 && sw[0] == sx[1], "slot_mix",
          "input " + sx.str() + " incompatible with weight " + sw.str());
  TapeNode n = make_node(OpKind::SlotMix, {x, w});
  const Index batch = sx[0], slots = sx[1], width = sx[2], out_slots = sw[1];
  n.value = Tensor(Shape{batch, out_slots, width});
  for (Index i = 0; i < batch; ++i)
    gemm_tn(n.value.data() + i * out_slots * width, w.value().data(), x.value().data() + i * slots * width, slots,
            out_slots, width);
  mac_counter() += static_cast<std::uint64_t>(batch * out_slots * slots * width);
  return t.push(std::move(n));
}

Var add(Var a, Var b) {
  Tape& t = tape_of({a, b}, "add");
  DISTDNAS_REQUIRE(a.shape() == b.shape(), "add", a.shape().str() + " vs " + b.shape().str());
  TapeNode n = make_node(OpKind::Add, {a, b});
  n.value = Tensor(a.shape());
  n.value.matrix() = a.value().matrix() + b.value().matrix();
  return t.push(std::move(n));
}

Var add_bias(Var x, Var b) {
  Tape& t = tape_of({x, b}, "add_bias");
  DISTDNAS_REQUIRE(b.value().size() == x.shape().last(), "add_bias",
          "bias " + b.shape().str() + " vs input " + x.shape().str());
  TapeNode n = make_node(OpKind::AddBias, {x, b});
  n.value = x.value();
  n.value.matrix().rowwise() += ConstMatMap(b.value().data(), 1, b.value().size()).row(0);
  return t.push(std::move(n));
}

Var add_slot_bias(Var x, Var b) {
  Tape& t = tape_of({x, b}, "add_slot_bias");
  DISTDNAS_REQUIRE(x.shape().rank == 3 && b.value().size() == x.shape()[1], "add_slot_bias",
          "bias " + b.shape().str() + " vs input " + x.shape().str());
  TapeNode n = make_node(OpKind::AddSlotBias, {x, b});
  n.value = x.value();
  const Index batch = x.shape()[0], slots = x.shape()[1], width = x.shape()[2];
  for (Index i = 0; i < batch; ++i)
    for (Index s = 0; s < slots; ++s) {
      double* row = n.value.data() + (i * slots + s) * width;
      for (Index d = 0; d < width; ++d) row[d] += b.value()[s];
    }
  return t.push(std::move(n));
}

Var mul(Var a, Var b) {
  Tape& t = tape_of({a, b}, "mul");
  DISTDNAS_REQUIRE(a.shape() == b.shape(), "mul", a.shape().str() + " vs " + b.shape().str());
  TapeNode n = make_node(OpKind::Mul, {a, b});
  n.value = Tensor(a.shape());
  n.value.matrix().array() = a.value().matrix().array() * b.value().matrix().array();
  return t.push(std::move(n));
}

Var scale(Var a, double c) {
  Tape& t = tape_of({a}, "scale");
  TapeNode n = make_node(OpKind::Scale, {a});
  n.scalar = c;
  n.value = Tensor(a.shape());
  n.value.matrix() = c * a.value().matrix();
  return t.push(std::move(n));
}

Var concat(std::span<const Var> xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no operands");
  Tape& t = tape_of({xs[0]}, "concat");
  const Shape& s0 = xs[0].shape();
  const int ax = normalize_axis(axis, s0.rank);
  Shape out = s0;
  out.dims[static_cast<std::size_t>(ax)] = 0;
  TapeNode n;
  n.kind = OpKind::Concat;
  n.axis = ax;
  for (const Var& v : xs) {
    if (!v.valid() || v.tape() != &t) throw Error("concat: operands on different tapes");
    const Shape& s = v.shape();
    bool ok = s.rank == s0.rank;
    for (int i = 0; ok && i < s.rank; ++i) ok = (i == ax) || s[i] == s0[i];
    DISTDNAS_REQUIRE(ok, "concat", s.str() + " vs " + s0.str() + " along axis " + std::to_string(ax));
    out.dims[static_cast<std::size_t>(ax)] += s[ax];
    n.inputs.push_back(v.id());
    n.needs_grad = n.needs_grad || t.node(v.id()).needs_grad;
  }
  n.value = Tensor(out);
  const AxisSplit o = split_at(out, ax);
  Index offset = 0;
  for (const Var& v : xs) {
    const Index len = v.shape()[ax];
    const Index chunk = len * o.inner;
    for (Index r = 0; r < o.outer; ++r)
      std::copy_n(v.value().data() + r * chunk, chunk, n.value.data() + r * o.length * o.inner + offset * o.inner);
    offset += len;
  }
  return t.push(std::move(n));
}

Var slice(Var x, int axis, Index start, Index length) {
  Tape& t = tape_of({x}, "slice");
  const Shape& s = x.shape();
  const int ax = normalize_axis(axis, s.rank);
  DISTDNAS_REQUIRE(start >= 0 && length >= 1 && start + length <= s[ax], "slice",
          "range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") outside " + s.str());
  Shape out = s;
  out.dims[static_cast<std::size_t>(ax)] = length;
  TapeNode n = make_node(OpKind::Slice, {x});
  n.axis = ax;
  n.offset = start;
  n.value = Tensor(out);
  const AxisSplit in = split_at(s, ax);
  const Index chunk = length * in.inner;
  for (Index r = 0; r < in.outer; ++r)
    std::copy_n(x.value().data() + r * in.length * in.inner + start * in.inner, chunk, n.value.data() + r * chunk);
  return t.push(std::move(n));
}

Var reshape(Var x, Shape shape) {
  Tape& t = tape_of({x}, "reshape");
  TapeNode n = make_node(OpKind::Reshape, {x});
  n.value = x.value().reshaped(shape);
  return t.push(std::move(n));
}

Var softmax(Var x, int axis) {
  Tape& t = tape_of({x}, "softmax");
  const Shape& s = x.shape();
  const int ax = normalize_axis(axis, s.rank);
  TapeNode n = make_node(OpKind::Softmax, {x});
  n.axis = ax;
  n.value = Tensor(s);
  const AxisSplit sp = split_at(s, ax);
  const Tensor& xv = x.value();
  if (sp.inner == 1) {
    ConstMatMap X(xv.data(), sp.outer, sp.length);
    MatMap Y(n.value.data(), sp.outer, sp.length);
    const Eigen::VectorXd mx = X.rowwise().maxCoeff();
    Y = X.colwise() - mx;
    Eigen::Map<Eigen::ArrayXd> flat(n.value.data(), n.value.size());
    flat = flat.exp();
    const Eigen::VectorXd inv = Y.rowwise().sum().cwiseInverse();
    Y = inv.asDiagonal() * Y;
    return t.push(std::move(n));
  }
  for (Index o = 0; o < sp.outer; ++o)
    for (Index in = 0; in < sp.inner; ++in) {
      const Index base = o * sp.length * sp.inner + in;
      double mx = xv[base];
      for (Index l = 1; l < sp.length; ++l) mx = std::max(mx, xv[base + l * sp.inner]);
      double total = 0.0;
      for (Index l = 0; l < sp.length; ++l) {
        const double e = std::exp(xv[base + l * sp.inner] - mx);
        n.value[base + l * sp.inner] = e;
        total += e;
      }
      for (Index l = 0; l < sp.length; ++l) n.value[base + l * sp.inner] /= total;
    }
  return t.push(std::move(n));
}

Var sigmoid(Var x) {
  Tape& t = tape_of({x}, "sigmoid");
  TapeNode n = make_node(OpKind::Sigmoid, {x});
  n.value = Tensor(x.shape());
  for (Index i = 0; i < n.value.size(); ++i) n.value[i] = sigmoid_scalar(x.value()[i]);
  return t.push(std::move(n));
}

Var relu(Var x) {
  Tape& t = tape_of({x}, "relu");
  TapeNode n = make_node(OpKind::Relu, {x});
  n.value = Tensor(x.shape());
  for (Index i = 0; i < n.value.size(); ++i) {
    const double v = x.value()[i];
    n.value[i] = v > 0.0 || std::isnan(v) ? v : 0.0;
  }
  return t.push(std::move(n));
}

Var sum(Var x) {
  Tape& t = tape_of({x}, "sum");
  TapeNode n = make_node(OpKind::Sum, {x});
  n.value = Tensor(Shape{1}, x.value().matrix().sum());
  return t.push(std::move(n));
}

Var mean(Var x) {
  Tape& t = tape_of({x}, "mean");
  TapeNode n = make_node(OpKind::Mean, {x});
  n.value = Tensor(Shape{1}, x.value().matrix().sum() / static_cast<double>(x.value().size()));
  return t.push(std::move(n));
}

Var bce(Var p, const Tensor& labels) {
  Tape& t = tape_of({p}, "bce");
  DISTDNAS_REQUIRE(labels.size() == p.value().size(), "bce", "labels size mismatch");
  TapeNode n = make_node(OpKind::BCE, {p});
  n.saved = labels;
  double total = 0.0;
  for (Index i = 0; i < labels.size(); ++i) {
    const double q = std::clamp(p.value()[i], kProbClamp, 1.0 - kProbClamp);
    total -= labels[i] * std::log(q) + (1.0 - labels[i]) * std::log1p(-q);
  }
  n.value = Tensor(Shape{1}, total / static_cast<double>(labels.size()));
  return t.push(std::move(n));
}

Var bce_with_logits(Var z, const Tensor& labels) {
  Tape& t = tape_of({z}, "bce_with_logits");
  DISTDNAS_REQUIRE(labels.size() == z.value().size(), "bce_with_logits", "labels size mismatch");
  TapeNode n = make_node(OpKind::BCEWithLogits, {z});
  n.saved = labels;
  double total = 0.0;
  for (Index i = 0; i < labels.size(); ++i) {
    const double v = z.value()[i];
    total += std::max(v, 0.0) - v * labels[i] + std::log1p(std::exp(-std::abs(v)));
  }
  n.value = Tensor(Shape{1}, total / static_cast<double>(labels.size()));
  return t.push(std::move(n));
}

Var pairwise_dot(Var x) {
  Tape& t = tape_of({x}, "pairwise_dot");
  const Shape& s = x.shape();
  DISTDNAS_REQUIRE(s.rank == 3 && s[1] >= 2, "pairwise_dot", "needs (B, S>=2, D), got " + s.str());
  const Index batch = s[0], slots = s[1], width = s[2];
  const Index pairs = slots * (slots - 1) / 2;
  TapeNode n = make_node(OpKind::PairwiseDot, {x});
  n.value = Tensor(Shape{batch, pairs});
  for (Index b = 0; b < batch; ++b) {
    const double* xb = x.value().data() + b * slots * width;
    double* out = n.value.data() + b * pairs;
    Index p = 0;
    for (Index i = 0; i < slots; ++i)
      for (Index j = i + 1; j < slots; ++j, ++p) {
        double acc = 0.0;
        for (Index d = 0; d < width; ++d) acc += xb[i * width + d] * xb[j * width + d];
        out[p] = acc;
      }
  }
  mac_counter() += static_cast<std::uint64_t>(batch * pairs * width);
  return t.push(std::move(n));
}

Var gather(Tape& tape, std::span<Param* const> tables, std::span<const std::int32_t> ids, Index batch,
           bool requires_grad) {
  if (tables.empty()) throw ShapeError("gather: no tables");
  const Index fields = static_cast<Index>(tables.size());
  const Index width = tables[0]->value.shape().last();
  DISTDNAS_REQUIRE(static_cast<Index>(ids.size()) == batch * fields, "gather", "ids size mismatch");
  TapeNode n;
  n.kind = OpKind::Gather;
  n.needs_grad = requires_grad;
  n.tables.assign(tables.begin(), tables.end());
  n.ids.assign(ids.begin(), ids.end());
  n.value = Tensor(Shape{batch, fields, width});
  for (Index b = 0; b < batch; ++b)
    for (Index f = 0; f < fields; ++f) {
      const Param& table = *tables[static_cast<std::size_t>(f)];
      DISTDNAS_REQUIRE(table.value.shape().last() == width, "gather", "tables differ in width");
      const std::int32_t row = ids[static_cast<std::size_t>(b * fields + f)];
      if (row < 0 || row >= table.value.shape()[0])
        throw Error("gather: id " + std::to_string(row) + " out of range for table " + table.name + " with " +
                    std::to_string(table.value.shape()[0]) + " rows");
      std::copy_n(table.value.data() + row * width, width, n.value.data() + (b * fields + f) * width);
    }
  return tape.push(std::move(n));
}

Var broadcast_batch(Var x, Index batch) {
  Tape& t = tape_of({x}, "broadcast_batch");
  DISTDNAS_REQUIRE(x.shape().rank == 2 && batch >= 1, "broadcast_batch", "needs rank-2 input, got " + x.shape().str());
  TapeNode n = make_node(OpKind::Broadcast, {x});
  n.value = Tensor(Shape{batch, x.shape()[0], x.shape()[1]});
  const Index chunk = x.value().size();
  for (Index b = 0; b < batch; ++b) std::copy_n(x.value().data(), chunk, n.value.data() + b * chunk);
  return t.push(std::move(n));
}

Var weighted_sum(std::span<const Var> xs, Var w) {
  if (xs.empty()) throw ShapeError("weighted_sum: no operands");
  Tape& t = tape_of({w}, "weighted_sum");
  DISTDNAS_REQUIRE(w.value().size() == static_cast<Index>(xs.size()), "weighted_sum",
          "weights " + w.shape().str() + " for " + std::to_string(xs.size()) + " operands");
  TapeNode n;
  n.kind = OpKind::WeightedSum;
  const Shape& s0 = xs[0].shape();
  n.value = Tensor(s0, 0.0);
  for (std::size_t j = 0; j < xs.size(); ++j) {
    const Var& v = xs[j];
    if (!v.valid() || v.tape() != &t) throw Error("weighted_sum: operands on different tapes");
    DISTDNAS_REQUIRE(v.shape() == s0, "weighted_sum", v.shape().str() + " vs " + s0.str());
    n.inputs.push_back(v.id());
    n.needs_grad = n.needs_grad || t.node(v.id()).needs_grad;
    n.value.matrix() += w.value()[static_cast<Index>(j)] * v.value().matrix();
  }
  n.inputs.push_back(w.id());
  n.needs_grad = n.needs_grad || t.node(w.id()).needs_grad;
  return t.push(std::move(n));
}

}  // namespace distdnas::ad
