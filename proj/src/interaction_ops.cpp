#include "distdnas/interaction_ops.hpp"

#include <cmath>

namespace distdnas::ops {

namespace {

using U = std::uint64_t;

U u(Index v) { return static_cast<U>(v); }

Tensor uniform_init(Rng& rng, Shape shape, Index fan_in) {
  Tensor t(shape);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

void expect_width(const char* op, Var v, Index width) {
  if (!v.valid()) throw ShapeError(std::string(op) + ": missing input");
  if (v.shape().rank != 2 || v.shape()[1] != width)
    throw ShapeError(std::string(op) + ": expected dense input (B, " + std::to_string(width) + "), got " +
                     v.shape().str());
}

void expect_sparse(const char* op, Var v, Index slots, Index width) {
  if (!v.valid()) throw ShapeError(std::string(op) + ": missing sparse input");
  const Shape& s = v.shape();
  if (s.rank != 3 || s[1] != slots || s[2] != width)
    throw ShapeError(std::string(op) + ": expected sparse input (B, " + std::to_string(slots) + ", " +
                     std::to_string(width) + "), got " + s.str());
}

Index pair_count(Index slots) { return slots * (slots - 1) / 2; }

}  // namespace

std::string_view name(DenseOpKind k) {
  switch (k) {
    case DenseOpKind::Identity: return "Identity";
    case DenseOpKind::Linear: return "Linear";
    case DenseOpKind::DotProduct: return "DotProduct";
    case DenseOpKind::CrossNet: return "CrossNet";
    case DenseOpKind::PIN: return "PIN";
  }
  throw Error("unknown dense op kind");
}

std::string_view name(SparseOpKind k) {
  switch (k) {
    case SparseOpKind::Identity3D: return "Identity3D";
    case SparseOpKind::Linear3D: return "Linear3D";
    case SparseOpKind::EmbedFC: return "EmbedFC";
    case SparseOpKind::Transformer: return "Transformer";
    case SparseOpKind::PMA: return "PMA";
  }
  throw Error("unknown sparse op kind");
}

DenseOpKind dense_kind_from_name(std::string_view s) {
  for (DenseOpKind k : kDenseRoster)
    if (name(k) == s) return k;
  throw Error("unknown dense op '" + std::string(s) + "'");
}

SparseOpKind sparse_kind_from_name(std::string_view s) {
  for (SparseOpKind k : kSparseRoster)
    if (name(k) == s) return k;
  throw Error("unknown sparse op '" + std::string(s) + "'");
}

std::uint64_t dense_op_flops(DenseOpKind kind, const DenseShape& s) {
  const U dd = u(s.dim_d);
  switch (kind) {
    case DenseOpKind::Identity:
      return s.joined_width == s.dim_d ? 0 : 2 * u(s.joined_width) * dd;
    case DenseOpKind::Linear:
      return 2 * u(s.joined_width) * dd;
    case DenseOpKind::DotProduct: {
      const U pairs = u(pair_count(s.sparse_slots + 1));
      return 2 * u(s.joined_width) * u(s.dim_s) + 2 * pairs * u(s.dim_s) + 2 * (u(s.joined_width) + pairs) * dd;
    }
    case DenseOpKind::CrossNet:
    case DenseOpKind::PIN: {
      const U w = u(s.source_width);
      return 2 * w * w + (s.source_width == s.dim_d ? 0 : 2 * w * dd);
    }
  }
  throw Error("unknown dense op kind");
}

std::uint64_t sparse_op_flops(SparseOpKind kind, const SparseShape& s) {
  const U n_in = u(s.slots_in), n_out = u(s.slots_out), ds = u(s.dim_s);
  const U project = s.slots_in == s.slots_out ? 0 : 2 * n_in * n_out * ds;
  switch (kind) {
    case SparseOpKind::Identity3D:
      return project;
    case SparseOpKind::Linear3D:
      return 2 * n_in * ds * ds + project;
    case SparseOpKind::EmbedFC:
      return 2 * n_in * n_out * ds;
    case SparseOpKind::Transformer:
      return 4 * 2 * n_in * ds * ds + 2 * 2 * n_in * n_in * ds + project;
    case SparseOpKind::PMA:
      return 2 * 2 * n_in * ds * ds + 2 * 2 * n_out * n_in * ds;
  }
  throw Error("unknown sparse op kind");
}

std::uint64_t merge_flops(Index joined_width, Index dim_s) { return 2 * u(joined_width) * u(dim_s); }

LinearMap LinearMap::create(ad::ParamSet& params, Rng& rng, const std::string& name, Index in, Index out,
                            bool with_bias) {
  LinearMap m;
  m.weight = &params.create(name + ".w", uniform_init(rng, Shape{in, out}, in));
  if (with_bias) m.bias = &params.create(name + ".b", Tensor(Shape{out}, 0.0));
  return m;
}

Var LinearMap::apply(Var x, bool trainable) const {
  ad::Tape& tape = *x.tape();
  Var y = ad::matmul(x, tape.param(*weight, trainable));
  if (bias != nullptr) y = ad::add_bias(y, tape.param(*bias, trainable));
  return y;
}

DenseOp::DenseOp(DenseOpKind kind, DenseShape shape, ad::ParamSet& params, Rng& rng, const std::string& prefix)
    : kind_(kind), shape_(shape) {
  const std::string p = prefix + "." + std::string(name(kind));
  switch (kind) {
    case DenseOpKind::Identity:
      if (shape.joined_width != shape.dim_d)
        projection = LinearMap::create(params, rng, p + ".proj", shape.joined_width, shape.dim_d, false);
      break;
    case DenseOpKind::Linear:
      main = LinearMap::create(params, rng, p, shape.joined_width, shape.dim_d, true);
      break;
    case DenseOpKind::DotProduct: {
      sparse_projection = LinearMap::create(params, rng, p + ".to_sparse", shape.joined_width, shape.dim_s, true);
      const Index pairs = pair_count(shape.sparse_slots + 1);
      main = LinearMap::create(params, rng, p + ".out", shape.joined_width + pairs, shape.dim_d, true);
      break;
    }
    case DenseOpKind::CrossNet:
    case DenseOpKind::PIN:
      main = LinearMap::create(params, rng, p, shape.source_width, shape.source_width, kind == DenseOpKind::CrossNet);
      if (shape.source_width != shape.dim_d)
        projection = LinearMap::create(params, rng, p + ".proj", shape.source_width, shape.dim_d, false);
      break;
  }
}

Var DenseOp::forward(const DenseInputs& in, bool trainable) const {
  const char* nm = name(kind_).data();
  switch (kind_) {
    case DenseOpKind::Identity:
      expect_width(nm, in.joined, shape_.joined_width);
      return projection ? projection->apply(in.joined, trainable) : in.joined;
    case DenseOpKind::Linear:
      expect_width(nm, in.joined, shape_.joined_width);
      return main->apply(in.joined, trainable);
    case DenseOpKind::DotProduct: {
      expect_width(nm, in.joined, shape_.joined_width);
      expect_sparse(nm, in.sparse, shape_.sparse_slots, shape_.dim_s);
      const Index batch = in.joined.shape()[0];
      Var slot = ad::reshape(sparse_projection->apply(in.joined, trainable), Shape{batch, 1, shape_.dim_s});
      const std::array<Var, 2> slots{slot, in.sparse};
      Var pairs = ad::pairwise_dot(ad::concat(slots, 1));
      const std::array<Var, 2> features{in.joined, pairs};
      return main->apply(ad::concat(features, 1), trainable);
    }
    case DenseOpKind::CrossNet: {
      expect_width(nm, in.state, shape_.source_width);
      expect_width(nm, in.base, shape_.source_width);
      Var out = ad::add(ad::mul(in.base, main->apply(in.state, trainable)), in.state);
      return projection ? projection->apply(out, trainable) : out;
    }
    case DenseOpKind::PIN: {
      expect_width(nm, in.state, shape_.source_width);
      expect_width(nm, in.base, shape_.source_width);
      Var out = ad::mul(in.state, main->apply(in.base, trainable));
      return projection ? projection->apply(out, trainable) : out;
    }
  }
  throw Error("unknown dense op kind");
}

Index DenseOp::param_count() const {
  Index n = 0;
  for (const auto* m : {&main, &projection, &sparse_projection}) {
    if (!*m) continue;
    n += (*m)->weight->value.size();
    if ((*m)->bias) n += (*m)->bias->value.size();
  }
  return n;
}

SparseOp::SparseOp(SparseOpKind kind, SparseShape shape, ad::ParamSet& params, Rng& rng, const std::string& prefix)
    : kind_(kind), shape_(shape) {
  const std::string p = prefix + "." + std::string(name(kind));
  const Index ds = shape.dim_s;
  const bool mismatch = shape.slots_in != shape.slots_out;
  auto square = [&](const std::string& n) { return &params.create(p + n, uniform_init(rng, Shape{ds, ds}, ds)); };
  auto slot_projection = [&] {
    slot_weight = &params.create(p + ".slot_proj",
                                 uniform_init(rng, Shape{shape.slots_in, shape.slots_out}, shape.slots_in));
  };
  switch (kind) {
    case SparseOpKind::Identity3D:
      if (mismatch) slot_projection();
      break;
    case SparseOpKind::Linear3D:
      feature_weight = square(".w");
      feature_bias = &params.create(p + ".b", Tensor(Shape{ds}, 0.0));
      if (mismatch) slot_projection();
      break;
    case SparseOpKind::EmbedFC:
      slot_weight = &params.create(p + ".w", uniform_init(rng, Shape{shape.slots_in, shape.slots_out}, shape.slots_in));
      slot_bias = &params.create(p + ".b", Tensor(Shape{shape.slots_out}, 0.0));
      break;
    case SparseOpKind::Transformer:
      if (shape.heads < 1 || ds % shape.heads != 0)
        throw ShapeError("Transformer: dim_s " + std::to_string(ds) + " not divisible by " +
                         std::to_string(shape.heads) + " heads");
      query = square(".q");
      key = square(".k");
      value = square(".v");
      output = square(".o");
      if (mismatch) slot_projection();
      break;
    case SparseOpKind::PMA: {
      Tensor init(Shape{shape.slots_out, ds});
      for (Index i = 0; i < init.size(); ++i) init[i] = 0.1 * rng.normal();
      seeds = &params.create(p + ".seeds", std::move(init));
      key = square(".k");
      value = square(".v");
      break;
    }
  }
}

Var SparseOp::project_slots(Var x, bool trainable) const {
  if (shape_.slots_in == shape_.slots_out) return x;
  return ad::slot_mix(x, x.tape()->param(*slot_weight, trainable));
}

Var SparseOp::forward(Var xs, bool trainable) const {
  expect_sparse(name(kind_).data(), xs, shape_.slots_in, shape_.dim_s);
  ad::Tape& tape = *xs.tape();
  auto param = [&](ad::Param* p) { return tape.param(*p, trainable); };
  const Index ds = shape_.dim_s;
  switch (kind_) {
    case SparseOpKind::Identity3D:
      return project_slots(xs, trainable);
    case SparseOpKind::Linear3D:
      return project_slots(ad::add_bias(ad::matmul(xs, param(feature_weight)), param(feature_bias)), trainable);
    case SparseOpKind::EmbedFC:
      return ad::add_slot_bias(ad::slot_mix(xs, param(slot_weight)), param(slot_bias));
    case SparseOpKind::Transformer: {
      Var q = ad::matmul(xs, param(query));
      Var k = ad::matmul(xs, param(key));
      Var v = ad::matmul(xs, param(value));
      const Index head_width = ds / shape_.heads;
      const double temperature = 1.0 / std::sqrt(static_cast<double>(head_width));
      std::vector<Var> heads;
      for (Index h = 0; h < shape_.heads; ++h) {
        Var qh = ad::slice(q, 2, h * head_width, head_width);
        Var kh = ad::slice(k, 2, h * head_width, head_width);
        Var vh = ad::slice(v, 2, h * head_width, head_width);
        Var attn = ad::softmax(ad::scale(ad::bmm(qh, kh, true), temperature), 2);
        heads.push_back(ad::bmm(attn, vh));
      }
      Var mixed = heads.size() == 1 ? heads[0] : ad::concat(heads, 2);
      Var out = ad::add(ad::matmul(mixed, param(output)), xs);
      return project_slots(out, trainable);
    }
    case SparseOpKind::PMA: {
      Var k = ad::matmul(xs, param(key));
      Var v = ad::matmul(xs, param(value));
      Var q = ad::broadcast_batch(param(seeds), xs.shape()[0]);
      const double temperature = 1.0 / std::sqrt(static_cast<double>(ds));
      Var attn = ad::softmax(ad::scale(ad::bmm(q, k, true), temperature), 2);
      return ad::bmm(attn, v);
    }
  }
  throw Error("unknown sparse op kind");
}

Index SparseOp::param_count() const {
  Index n = 0;
  for (ad::Param* p : {feature_weight, feature_bias, slot_weight, slot_bias, query, key, value, output, seeds})
    if (p) n += p->value.size();
  return n;
}

DenseToSparseMerge::DenseToSparseMerge(Index joined_width, Index dim_s, ad::ParamSet& params, Rng& rng,
                                       const std::string& prefix)
    : map(LinearMap::create(params, rng, prefix + ".merge", joined_width, dim_s, true)) {}

Var DenseToSparseMerge::forward(Var dense, Var xs, bool trainable) const {
  const Index width = map.weight->value.shape()[0];
  const Index ds = map.weight->value.shape()[1];
  expect_width("merge_dense_to_sparse", dense, width);
  if (!xs.valid() || xs.shape().rank != 3 || xs.shape()[2] != ds || xs.shape()[0] != dense.shape()[0])
    throw ShapeError("merge_dense_to_sparse: sparse input " + (xs.valid() ? xs.shape().str() : "missing") +
                     " incompatible with dim_s " + std::to_string(ds));
  Var slot = ad::reshape(map.apply(dense, trainable), Shape{dense.shape()[0], 1, ds});
  const std::array<Var, 2> parts{slot, xs};
  return ad::concat(parts, 1);
}

}  // namespace distdnas::ops
