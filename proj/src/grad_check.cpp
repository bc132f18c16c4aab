#include "distdnas/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>

#include "distdnas/autodiff.hpp"
#include "distdnas/interaction_ops.hpp"
#include "distdnas/rng.hpp"

namespace distdnas {

namespace {

using ad::Var;

constexpr double kStep = 1e-5;
constexpr double kFloor = 1e-3;

struct Problem {
  ad::ParamSet params;
  std::function<Var(ad::Tape&)> build;
  std::shared_ptr<void> keep_alive;
  Tensor weights;  // R in L = sum(R * out)
};

Tensor random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Keeps values away from relu's kink so central differences stay one-sided-free.
Tensor away_from_zero(Rng& rng, Shape s) {
  Tensor t(s);
  for (Index i = 0; i < t.size(); ++i) {
    const double v = rng.uniform(0.1, 1.0);
    t[i] = rng.bernoulli(0.5) ? v : -v;
  }
  return t;
}

Tensor random_labels(Rng& rng, Shape s) {
  Tensor t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  return t;
}

void randomize_params(ad::ParamSet& params, Rng& rng) {
  for (const auto& p : params.all())
    for (Index i = 0; i < p->value.size(); ++i) p->value[i] = rng.uniform(-1.0, 1.0);
}

std::unique_ptr<Problem> make_primitive(std::string_view kind, const GradCheckDims& d, Rng& rng) {
  auto pr = std::make_unique<Problem>();
  auto& ps = pr->params;
  const Index B = d.batch, S = d.slots, W = d.width, O = d.out;
  auto P = [&](const char* name, Tensor t) { return &ps.create(name, std::move(t)); };
  auto R = [&](Shape s) { return P("x", random_tensor(rng, s)); };

  if (kind == "matmul") {
    auto* a = P("a", random_tensor(rng, Shape{B, S, W}));
    auto* b = P("b", random_tensor(rng, Shape{W, O}));
    pr->build = [=](ad::Tape& t) { return ad::matmul(t.param(*a), t.param(*b)); };
  } else if (kind == "bmm") {
    auto* a = P("a", random_tensor(rng, Shape{B, S, W}));
    auto* b = P("b", random_tensor(rng, Shape{B, W, O}));
    pr->build = [=](ad::Tape& t) { return ad::bmm(t.param(*a), t.param(*b)); };
  } else if (kind == "bmm_transposed") {
    auto* a = P("a", random_tensor(rng, Shape{B, S, W}));
    auto* b = P("b", random_tensor(rng, Shape{B, O, W}));
    pr->build = [=](ad::Tape& t) { return ad::bmm(t.param(*a), t.param(*b), true); };
  } else if (kind == "slot_mix") {
    auto* x = P("x", random_tensor(rng, Shape{B, S, W}));
    auto* w = P("w", random_tensor(rng, Shape{S, O}));
    pr->build = [=](ad::Tape& t) { return ad::slot_mix(t.param(*x), t.param(*w)); };
  } else if (kind == "add" || kind == "mul") {
    auto* a = P("a", random_tensor(rng, Shape{B, S, W}));
    auto* b = P("b", random_tensor(rng, Shape{B, S, W}));
    const bool is_add = kind == "add";
    pr->build = [=](ad::Tape& t) {
      return is_add ? ad::add(t.param(*a), t.param(*b)) : ad::mul(t.param(*a), t.param(*b));
    };
  } else if (kind == "add_bias") {
    auto* x = P("x", random_tensor(rng, Shape{B, S, W}));
    auto* b = P("b", random_tensor(rng, Shape{W}));
    pr->build = [=](ad::Tape& t) { return ad::add_bias(t.param(*x), t.param(*b)); };
  } else if (kind == "add_slot_bias") {
    auto* x = P("x", random_tensor(rng, Shape{B, S, W}));
    auto* b = P("b", random_tensor(rng, Shape{S}));
    pr->build = [=](ad::Tape& t) { return ad::add_slot_bias(t.param(*x), t.param(*b)); };
  } else if (kind == "scale") {
    auto* x = R(Shape{B, W});
    const double c = rng.uniform(-2.0, 2.0);
    pr->build = [=](ad::Tape& t) { return ad::scale(t.param(*x), c); };
  } else if (kind == "concat_features") {
    auto* a = P("a", random_tensor(rng, Shape{B, W}));
    auto* b = P("b", random_tensor(rng, Shape{B, O}));
    pr->build = [=](ad::Tape& t) {
      const std::array<Var, 2> xs{t.param(*a), t.param(*b)};
      return ad::concat(xs, 1);
    };
  } else if (kind == "concat_slots" || kind == "concat_slot_features") {
    const bool slots = kind == "concat_slots";
    auto* a = P("a", random_tensor(rng, Shape{B, S, W}));
    auto* b = P("b", random_tensor(rng, slots ? Shape{B, O, W} : Shape{B, S, O}));
    pr->build = [=](ad::Tape& t) {
      const std::array<Var, 2> xs{t.param(*a), t.param(*b)};
      return ad::concat(xs, slots ? 1 : 2);
    };
  } else if (kind == "slice") {
    auto* x = R(Shape{B, S, W});
    const Index len = std::max<Index>(1, W - 1);
    const Index start = W - len;
    pr->build = [=](ad::Tape& t) { return ad::slice(t.param(*x), 2, start, len); };
  } else if (kind == "reshape") {
    auto* x = R(Shape{B, S, W});
    pr->build = [=](ad::Tape& t) { return ad::reshape(t.param(*x), Shape{B, S * W}); };
  } else if (kind == "softmax") {
    auto* x = R(Shape{B, S, W});
    const int axis = static_cast<int>(rng.below(3));
    pr->build = [=](ad::Tape& t) { return ad::softmax(t.param(*x), axis); };
  } else if (kind == "sigmoid") {
    auto* x = P("x", random_tensor(rng, Shape{B, W}, -3.0, 3.0));
    pr->build = [=](ad::Tape& t) { return ad::sigmoid(t.param(*x)); };
  } else if (kind == "relu") {
    auto* x = P("x", away_from_zero(rng, Shape{B, S, W}));
    pr->build = [=](ad::Tape& t) { return ad::relu(t.param(*x)); };
  } else if (kind == "sum" || kind == "mean") {
    auto* x = R(Shape{B, S, W});
    const bool is_sum = kind == "sum";
    pr->build = [=](ad::Tape& t) { return is_sum ? ad::sum(t.param(*x)) : ad::mean(t.param(*x)); };
  } else if (kind == "bce") {
    auto* p = P("p", random_tensor(rng, Shape{B, W}, 0.05, 0.95));
    const Tensor labels = random_labels(rng, Shape{B, W});
    pr->build = [=](ad::Tape& t) { return ad::bce(t.param(*p), labels); };
  } else if (kind == "bce_with_logits") {
    auto* z = P("z", random_tensor(rng, Shape{B, W}, -3.0, 3.0));
    const Tensor labels = random_labels(rng, Shape{B, W});
    pr->build = [=](ad::Tape& t) { return ad::bce_with_logits(t.param(*z), labels); };
  } else if (kind == "pairwise_dot") {
    auto* x = R(Shape{B, std::max<Index>(S, 2), W});
    pr->build = [=](ad::Tape& t) { return ad::pairwise_dot(t.param(*x)); };
  } else if (kind == "gather") {
    std::vector<ad::Param*> tables;
    const Index rows = 5;
    for (Index f = 0; f < S; ++f)
      tables.push_back(&ps.create("table" + std::to_string(f), random_tensor(rng, Shape{rows, W}), true));
    std::vector<std::int32_t> ids(static_cast<std::size_t>(B * S));
    for (auto& id : ids) id = static_cast<std::int32_t>(rng.below(rows));
    pr->build = [=](ad::Tape& t) { return ad::gather(t, tables, ids, B); };
  } else if (kind == "broadcast") {
    auto* x = R(Shape{S, W});
    pr->build = [=](ad::Tape& t) { return ad::broadcast_batch(t.param(*x), B); };
  } else if (kind == "weighted_sum") {
    std::vector<ad::Param*> xs;
    for (int j = 0; j < 3; ++j) xs.push_back(&ps.create("x" + std::to_string(j), random_tensor(rng, Shape{B, S, W})));
    auto* w = P("w", random_tensor(rng, Shape{3}));
    pr->build = [=](ad::Tape& t) {
      std::vector<Var> vs;
      for (auto* x : xs) vs.push_back(t.param(*x));
      return ad::weighted_sum(vs, t.param(*w));
    };
  } else {
    return nullptr;
  }
  return pr;
}

std::unique_ptr<Problem> make_interaction(std::string_view kind, const GradCheckDims& d, Rng& rng) {
  auto pr = std::make_unique<Problem>();
  auto& ps = pr->params;
  const Index B = d.batch, S = d.slots, W = d.width, O = d.out;

  if (kind == "merge") {
    auto* dense = &ps.create("dense", random_tensor(rng, Shape{B, W}));
    auto* xs = &ps.create("xs", random_tensor(rng, Shape{B, S, O}));
    auto op = std::make_shared<ops::DenseToSparseMerge>(W, O, ps, rng, "gc");
    pr->keep_alive = op;
    pr->build = [=](ad::Tape& t) { return op->forward(t.param(*dense), t.param(*xs)); };
    return pr;
  }

  for (ops::DenseOpKind k : ops::kDenseRoster) {
    if (ops::name(k) != kind) continue;
    auto* state = &ps.create("state", random_tensor(rng, Shape{B, W}));
    auto* base = &ps.create("base", random_tensor(rng, Shape{B, W}));
    auto* xs = &ps.create("xs", random_tensor(rng, Shape{B, S, W}));
    const ops::DenseShape shape{2 * W, W, S, W, O};
    auto op = std::make_shared<ops::DenseOp>(k, shape, ps, rng, "gc");
    pr->keep_alive = op;
    pr->build = [=](ad::Tape& t) {
      ops::DenseInputs in;
      in.state = t.param(*state);
      in.base = t.param(*base);
      const std::array<Var, 2> parts{in.state, in.base};
      in.joined = ad::concat(parts, 1);
      in.sparse = t.param(*xs);
      return op->forward(in);
    };
    return pr;
  }

  for (ops::SparseOpKind k : ops::kSparseRoster) {
    if (ops::name(k) != kind) continue;
    auto* xs = &ps.create("xs", random_tensor(rng, Shape{B, S, W}));
    const ops::SparseShape shape{S, W, O, d.heads};
    auto op = std::make_shared<ops::SparseOp>(k, shape, ps, rng, "gc");
    pr->keep_alive = op;
    pr->build = [=](ad::Tape& t) { return op->forward(t.param(*xs)); };
    return pr;
  }
  return nullptr;
}

double loss_value(Problem& pr) {
  ad::Tape tape;
  Var out = pr.build(tape);
  double acc = 0.0;
  for (Index i = 0; i < out.value().size(); ++i) acc += pr.weights[i] * out.value()[i];
  return acc;
}

}  // namespace

std::vector<std::string> grad_check_primitives() {
  return {"matmul",          "bmm",          "bmm_transposed", "slot_mix",       "add",
          "mul",             "add_bias",     "add_slot_bias",  "scale",          "concat_features",
          "concat_slots",    "concat_slot_features", "slice",  "reshape",        "softmax",
          "sigmoid",         "relu",         "sum",            "mean",           "bce",
          "bce_with_logits", "pairwise_dot", "gather",         "broadcast",      "weighted_sum"};
}

std::vector<std::string> grad_check_interaction_ops() {
  std::vector<std::string> out;
  for (auto k : ops::kDenseRoster) out.emplace_back(ops::name(k));
  for (auto k : ops::kSparseRoster) out.emplace_back(ops::name(k));
  out.emplace_back("merge");
  return out;
}

GradCheckDims random_grad_check_dims(std::string_view kind, std::uint64_t seed) {
  Rng rng(derive_seed(seed, kind));
  GradCheckDims d;
  d.batch = 1 + static_cast<Index>(rng.below(4));
  d.slots = 2 + static_cast<Index>(rng.below(5));
  d.width = 2 + static_cast<Index>(rng.below(7));
  d.out = 1 + static_cast<Index>(rng.below(8));
  d.heads = (kind == "Transformer" && d.width % 2 == 0) ? 2 : 1;
  return d;
}

GradCheckResult grad_check(std::string_view kind, const GradCheckDims& dims, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "grad_check"));
  std::unique_ptr<Problem> pr = make_primitive(kind, dims, rng);
  if (!pr) {
    pr = make_interaction(kind, dims, rng);
    if (!pr) throw Error("grad_check: unknown kind '" + std::string(kind) + "'");
    randomize_params(pr->params, rng);
  }

  ad::Tape tape;
  Var out = pr->build(tape);
  pr->weights = random_tensor(rng, out.shape());
  pr->params.zero_grad();
  tape.backward(out, pr->weights);

  GradCheckResult res;
  for (const auto& p : pr->params.all()) {
    const Tensor analytic = p->grad;
    for (Index i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + kStep;
      const double up = loss_value(*pr);
      p->value[i] = orig - kStep;
      const double down = loss_value(*pr);
      p->value[i] = orig;
      const double numeric = (up - down) / (2.0 * kStep);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kFloor});
      res.max_rel_error = std::max(res.max_rel_error, err);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace distdnas
