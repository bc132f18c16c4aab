#include <cmath>

#include "distdnas/autodiff.hpp"
#include "distdnas/grad_check.hpp"
#include "distdnas/rng.hpp"
#include "doctest.h"

using namespace distdnas;
using namespace distdnas::ad;

namespace {

Tensor iota(Shape s, double start = 1.0) {
  Tensor t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = start + static_cast<double>(i);
  return t;
}

}  // namespace

TEST_CASE("identity graph and identity matrix leave the input unchanged") {
  Tape tape;
  Var x = tape.input("x", iota(Shape{3, 4}));
  CHECK(max_abs_diff(x.value(), iota(Shape{3, 4})) == 0.0);

  Tensor eye(Shape{4, 4}, 0.0);
  for (Index i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  Var y = matmul(x, tape.constant(eye));
  CHECK(max_abs_diff(y.value(), x.value()) == 0.0);
}

TEST_CASE("softmax of equal logits is uniform and rows sum to one") {
  Tape tape;
  Var p = softmax(tape.input("z", Tensor(Shape{5}, 3.0)), 0);
  for (Index i = 0; i < 5; ++i) CHECK(p.value()[i] == doctest::Approx(0.2).epsilon(1e-15));

  Rng rng(7);
  Tensor z(Shape{2, 3, 4});
  for (Index i = 0; i < z.size(); ++i) z[i] = 10.0 * rng.normal();
  for (int axis = 0; axis < 3; ++axis) {
    Var s = softmax(tape.input("z", z), axis);
    const Shape& sh = s.shape();
    const Index len = sh[axis];
    Index inner = 1;
    for (int a = axis + 1; a < 3; ++a) inner *= sh[a];
    const Index outer = sh.size() / (len * inner);
    for (Index o = 0; o < outer; ++o)
      for (Index in = 0; in < inner; ++in) {
        double total = 0.0;
        for (Index k = 0; k < len; ++k) {
          const double v = s.value()[(o * len + k) * inner + in];
          CHECK(v > 0.0);
          total += v;
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
      }
  }
}

TEST_CASE("scalar product rule, sum gradient, and BCE through sigmoid") {
  {
    ParamSet ps;
    Param& w = ps.create("w", Tensor(Shape{1, 1}, 2.0));
    Tape tape;
    Var y = matmul(tape.input("x", Tensor(Shape{1, 1}, 3.0)), tape.param(w));
    tape.backward(y, Tensor(Shape{1, 1}, 1.0));
    CHECK(w.grad[0] == doctest::Approx(3.0));
    GradMap g = tape.param_gradients();
    CHECK(g.size() == 1);
    CHECK(g.count(w.id) == 1);
  }
  {
    Tape tape;
    Var x = tape.input("x", iota(Shape{2, 3, 2}), true);
    tape.backward(sum(x));
    for (Index i = 0; i < 12; ++i) CHECK(tape.grad(x)[i] == 1.0);
  }
  {
    Tape tape;
    Var z = tape.input("z", Tensor(Shape{1}, 0.0), true);
    tape.backward(bce(sigmoid(z), Tensor(Shape{1}, 1.0)));
    CHECK(tape.grad(z)[0] == doctest::Approx(-0.5).epsilon(1e-12));
  }
}

TEST_CASE("backward error contract") {
  Tape empty;
  CHECK_THROWS_WITH_AS(empty.backward(Var{}), "backward called before forward", Error);

  Tape tape;
  Var x = tape.input("x", Tensor(Shape{2, 2}, 1.0), true);
  Var y = scale(x, 2.0);
  CHECK_THROWS_AS(tape.backward(y, Tensor(Shape{4}, 1.0)), ShapeError);
  tape.backward(y, Tensor(Shape{2, 2}, 1.0));
  CHECK_THROWS_AS(tape.backward(y, Tensor(Shape{2, 2}, 1.0)), Error);
}

TEST_CASE("inputs not marked as parameters receive no gradient entry") {
  ParamSet ps;
  Param& w = ps.create("w", Tensor(Shape{2, 2}, 0.5));
  Param& frozen = ps.create("frozen", Tensor(Shape{2}, 0.1));
  Tape tape;
  Var y = add_bias(matmul(tape.input("x", Tensor(Shape{3, 2}, 1.0)), tape.param(w)), tape.param(frozen, false));
  tape.backward(sum(y));
  GradMap g = tape.param_gradients();
  CHECK(g.size() == 1);
  CHECK(g.count(w.id) == 1);
  CHECK(frozen.grad[0] == 0.0);
}

TEST_CASE("shape mismatch names the operation") {
  Tape tape;
  Var a = tape.input("a", Tensor(Shape{2, 3}));
  Var b = tape.input("b", Tensor(Shape{4, 2}));
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  try {
    matmul(a, b);
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
  }
}

TEST_CASE("non-finite values are reported unless checking is disabled") {
  Tape tape;
  Var x = tape.input("x", Tensor(Shape{2}, 1e200));
  CHECK_THROWS_AS(mul(x, x), NonFiniteError);
  Tape bench(false);
  Var y = bench.input("x", Tensor(Shape{2}, 1e200));
  CHECK_NOTHROW(mul(y, y));
}

TEST_CASE("concat then slice is the identity along either axis") {
  Rng rng(3);
  for (int axis : {1, 2}) {
    Tape tape;
    Tensor a(Shape{2, 3, 4}), b(Shape{2, axis == 1 ? 5 : 3, axis == 2 ? 5 : 4});
    for (Index i = 0; i < a.size(); ++i) a[i] = rng.normal();
    for (Index i = 0; i < b.size(); ++i) b[i] = rng.normal();
    const std::array<Var, 2> parts{tape.input("a", a), tape.input("b", b)};
    Var c = concat(parts, axis);
    CHECK(max_abs_diff(slice(c, axis, 0, a.shape()[axis]).value(), a) == 0.0);
    CHECK(max_abs_diff(slice(c, axis, a.shape()[axis], 5).value(), b) == 0.0);
  }
  Tape tape;
  Tensor a = iota(Shape{3, 2}), b = iota(Shape{3, 4}, 100.0);
  const std::array<Var, 2> parts{tape.input("a", a), tape.input("b", b)};
  Var c = concat(parts, 1);
  CHECK(max_abs_diff(slice(c, 1, 0, 2).value(), a) == 0.0);
  CHECK(max_abs_diff(slice(c, 1, 2, 4).value(), b) == 0.0);
}

TEST_CASE("evaluation is deterministic") {
  Rng rng(11);
  Tensor x(Shape{4, 3, 6});
  for (Index i = 0; i < x.size(); ++i) x[i] = rng.normal();
  auto run = [&] {
    Tape tape;
    Var v = tape.input("x", x);
    return softmax(bmm(v, v, true), 2).value();
  };
  CHECK(run().storage() == run().storage());
}

TEST_CASE("gather accumulates sparse gradients only in looked-up rows") {
  ParamSet ps;
  Tensor init(Shape{6, 2});
  for (Index r = 0; r < 6; ++r) {
    init.at(r, 0) = 10.0 * static_cast<double>(r);
    init.at(r, 1) = -static_cast<double>(r);
  }
  Param& t0 = ps.create("t0", init, true);
  Param& t1 = ps.create("t1", init, true);
  std::vector<Param*> tables{&t0, &t1};
  const std::vector<std::int32_t> ids{2, 5, 2, 1};  // two examples sharing row 2 of table 0
  Tape tape;
  Var e = gather(tape, tables, ids, 2);
  CHECK(e.value().at(0, 0, 0) == 20.0);
  CHECK(e.value().at(0, 1, 1) == -5.0);
  CHECK(e.value().at(1, 1, 0) == 10.0);
  tape.backward(sum(e));
  CHECK(t0.grad.at(2, 0) == 2.0);
  CHECK(t0.touched_rows.size() == 1);
  CHECK(t1.touched_rows.size() == 2);
  for (Index r : {0, 1, 3, 4, 5}) CHECK(t0.grad.at(r, 0) == 0.0);

  const std::vector<std::int32_t> bad{6, 0};
  Tape t2;
  CHECK_THROWS_AS(gather(t2, tables, bad, 1), Error);
}

TEST_CASE("FLOP scope counts two per multiply-accumulate") {
  Tape tape;
  FlopScope scope;
  matmul(tape.input("a", Tensor(Shape{3, 64})), tape.input("w", Tensor(Shape{64, 64})));
  CHECK(scope.flops() == 3u * 8192u);
}

TEST_CASE("every primitive passes the gradient check on 20 random configs") {
  for (const std::string& kind : grad_check_primitives()) {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
      const GradCheckResult r = grad_check(kind, random_grad_check_dims(kind, s), s);
      worst = std::max(worst, r.max_rel_error);
      CHECK(r.checked > 0);
    }
    INFO(kind);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("spec grad-check examples") {
  CHECK(grad_check("Linear", GradCheckDims{2, 3, 4, 3, 1}, 1).max_rel_error < 1e-4);
  CHECK(grad_check("Transformer", GradCheckDims{2, 3, 4, 4, 2}, 1).max_rel_error < 1e-4);
  CHECK(grad_check("CrossNet", GradCheckDims{2, 3, 4, 4, 1}, 1).max_rel_error < 1e-4);
}
