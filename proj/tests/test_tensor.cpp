#include <cmath>

#include "doctest.h"
#include "rconet/rng.hpp"
#include "rconet/tensor.hpp"

using namespace rconet;

namespace {
Tensor random_tensor(Rng& rng, Shape shape, bool param = false) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(-2.0, 2.0);
  return param ? Tensor::param(std::move(shape), std::move(v))
               : Tensor::from(std::move(shape), std::move(v));
}
}  // namespace

TEST_CASE("elementwise arithmetic") {
  auto a = Tensor::from({2}, {1, 2});
  auto b = Tensor::from({2}, {3, 4});
  auto c = add(a, b);
  CHECK(c.values() == std::vector<double>{4, 6});

  auto x = Tensor::from({3}, {1.5, -2.0, 0.25});
  auto one = Tensor::scalar(1.0);
  CHECK(mul(x, one).values() == x.values());

  auto l = log(exp(Tensor::from({1}, {0.7})));
  CHECK(l.item() == doctest::Approx(0.7).epsilon(1e-12));

  CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
  CHECK_THROWS_AS(log(Tensor::from({1}, {-1.0})), DomainError);
  CHECK_THROWS_AS(elementwise(EwKind::Add, a), ContractError);
}

TEST_CASE("matmul values and errors") {
  auto eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(7);
  auto a = random_tensor(rng, {3, 3});
  auto prod = matmul(eye, a);
  CHECK(prod.values() == a.values());

  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto v = Tensor::from({2, 1}, {1, 1});
  auto mv = matmul(m, v);
  CHECK(mv.values() == std::vector<double>{3, 7});

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("matmul gradient of sum(A*B) w.r.t. A equals row-broadcast column sums of B") {
  // d/dA[i,p] sum(A.B) = sum_j B[p,j], independent of i.
  Rng rng(11);
  auto b_vals = random_tensor(rng, {4, 5});
  std::vector<double> colsum(4, 0.0);
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t j = 0; j < 5; ++j) colsum[p] += b_vals.values()[p * 5 + j];

  auto f = [&](const Tensor& a) { return sum(matmul(a, b_vals)); };
  auto a0 = random_tensor(rng, {3, 4});
  CHECK(grad_check(f, a0, 1e-5) < 1e-6);

  Tensor a = a0.detach();
  a.set_requires_grad(true);
  Tape tape;
  Tape::Scope scope(tape);
  tape.backward(sum(matmul(a, b_vals)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < 4; ++p)
      CHECK(a.grad()[i * 4 + p] == doctest::Approx(colsum[p]).epsilon(1e-12));
}

TEST_CASE("softplus values and derivative") {
  auto y = softplus(Tensor::from({1}, {0.0}));
  CHECK(y.item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  auto sat = softplus(Tensor::from({1}, {40.0}));
  CHECK(sat.item() == doctest::Approx(40.0).epsilon(1e-13));

  Tensor x = Tensor::param({1}, {0.0});
  Tape tape;
  Tape::Scope scope(tape);
  tape.backward(sum(softplus(x)));
  CHECK(x.grad()[0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("logsumexp stability and cases") {
  CHECK(logsumexp(Tensor::from({2}, {0, 0})).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(logsumexp(Tensor::from({1}, {3.25})).item() == doctest::Approx(3.25));
  CHECK(logsumexp(Tensor::from({2}, {1000, 1000})).item() ==
        doctest::Approx(1000.0 + std::log(2.0)).epsilon(1e-15));
  CHECK_THROWS_AS(logsumexp(Tensor::from({0, 2}, {}), 0), DomainError);

  auto m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto rows = logsumexp(m, 1);
  CHECK(rows.extent(0) == 2);
  CHECK(rows.values()[0] ==
        doctest::Approx(std::log(std::exp(1.) + std::exp(2.) + std::exp(3.))));
  auto cols = logsumexp(m, 0);
  CHECK(cols.extent(0) == 3);
}

TEST_CASE("backward covers fan-out and powers") {
  {
    Tensor x = Tensor::param({1}, {3.0});
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(mul(x, x));
    CHECK(x.grad()[0] == 6.0);
  }
  {
    Tensor x = Tensor::param({1}, {5.0});
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(add(x, x));
    CHECK(x.grad()[0] == 2.0);
  }
  {
    // sum(softplus(W.v)) against finite differences
    Rng rng(3);
    auto v = random_tensor(rng, {4, 1});
    auto f = [&](const Tensor& w) { return sum(softplus(matmul(w, v))); };
    auto w = random_tensor(rng, {3, 4});
    CHECK(grad_check(f, w, 1e-5) < 1e-6);
  }
}

TEST_CASE("backward requires a scalar attached root") {
  Tensor x = Tensor::param({2}, {1, 2});
  Tape tape;
  Tape::Scope scope(tape);
  auto y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("backward is deterministic across repeated passes") {
  Rng rng(21);
  Tensor w = random_tensor(rng, {6, 6}, true);
  Tensor v = random_tensor(rng, {6, 2});
  Tape tape;
  Tape::Scope scope(tape);
  auto loss = sum(softplus(matmul(w, v)));
  tape.backward(loss);
  const auto g1 = w.grad();
  tape.backward(loss);
  CHECK(w.grad() == g1);
}

TEST_CASE("detach is a hard gradient barrier") {
  Tensor x = Tensor::param({1}, {2.0});
  Tape tape;
  Tape::Scope scope(tape);
  auto mid = mul(x, x);
  auto cut = mid.detach();
  auto y = mul(cut, cut);
  CHECK_FALSE(cut.attached());
  CHECK_THROWS_AS(tape.backward(y), ContractError);  // nothing tracked past the cut

  // And through a mixed graph the detached branch contributes no gradient.
  auto z = add(mul(x, x), mul(cut, Tensor::scalar(10.0)));
  tape.backward(z);
  CHECK(x.grad()[0] == doctest::Approx(4.0));
  CHECK_FALSE(cut.has_grad());
}

TEST_CASE("grad_check: linear, cubic, and reductions") {
  auto lin = [](const Tensor& x) { return sum(x); };
  Rng rng(5);
  auto x = random_tensor(rng, {7});
  CHECK(grad_check(lin, x, 1e-5) < 1e-10);

  // f = sum(x^3): analytic 3x^2 -> [3, 12] at x = [1, 2]
  auto cube = [](const Tensor& t) { return sum(mul(mul(t, t), t)); };
  auto x2 = Tensor::from({2}, {1, 2});
  {
    Tensor probe = x2.detach();
    probe.set_requires_grad(true);
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(cube(probe));
    CHECK(probe.grad()[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(probe.grad()[1] == doctest::Approx(12.0).epsilon(1e-12));
  }
  CHECK(grad_check(cube, x2, 1e-5) < 1e-8);

  auto lse = [](const Tensor& t) { return sum(logsumexp(t, 0)); };
  auto x3 = random_tensor(rng, {9});
  CHECK(grad_check(lse, x3, 1e-5) < 1e-8);

  auto lsm = [](const Tensor& t) {
    auto m = reshape(t, {3, 4});
    return sum(mul(log_softmax(m), log_softmax(m)));
  };
  auto x4 = random_tensor(rng, {12});
  CHECK(grad_check(lsm, x4, 1e-5) < 1e-7);
}

TEST_CASE("structure ops: reshape / concat / gather_rows") {
  Rng rng(13);
  auto x = random_tensor(rng, {2, 6});
  auto r = reshape(x, {3, 4});
  CHECK(r.values() == x.values());
  CHECK_THROWS_AS(reshape(x, {5, 5}), ShapeError);

  auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::from({2, 2}, {5, 6, 7, 8});
  auto cat0 = concat({a, b}, 0);
  CHECK(cat0.shape() == Shape{4, 2});
  CHECK(cat0.values() == std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  auto cat1 = concat({a, b}, 1);
  CHECK(cat1.shape() == Shape{2, 4});
  CHECK(cat1.values() == std::vector<double>{1, 2, 5, 6, 3, 4, 7, 8});

  auto g = gather_rows(cat0, {3, 0});
  CHECK(g.values() == std::vector<double>{7, 8, 1, 2});

  auto f_cat = [&](const Tensor& t) { return sum(mul(concat({t, b}, 1), concat({t, b}, 1))); };
  CHECK(grad_check(f_cat, a, 1e-5) < 1e-8);

  auto f_gather = [&](const Tensor& t) {
    auto picked = gather_rows(t, {1, 1, 0});
    return sum(mul(picked, picked));
  };
  CHECK(grad_check(f_gather, a, 1e-5) < 1e-8);
}

TEST_CASE("grad_check over random inputs for every differentiable op") {
  Rng rng(2024);
  for (int trial = 0; trial < 3; ++trial) {
    auto x = random_tensor(rng, {8});
    CHECK(grad_check([](const Tensor& t) { return sum(mul(t, t)); }, x) < 1e-4);
    CHECK(grad_check([](const Tensor& t) { return sum(softplus(t)); }, x) < 1e-4);
    CHECK(grad_check([](const Tensor& t) { return sum(exp(t)); }, x) < 1e-4);
    CHECK(grad_check([](const Tensor& t) { return mean(relu(t)); }, x) < 1e-4);
    CHECK(grad_check([](const Tensor& t) { return sum(neg(t)); }, x) < 1e-4);
    auto pos = Tensor::from({6}, {0.5, 1.5, 2.0, 0.1, 3.0, 0.7});
    CHECK(grad_check([](const Tensor& t) { return sum(log(t)); }, pos) < 1e-4);
  }
}
