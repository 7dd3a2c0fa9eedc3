#include "doctest.h"
#include "gradcheck_cases.hpp"
#include "sparseq/autodiff.hpp"

using namespace sparseq;

TEST_SUITE("autodiff") {
  TEST_CASE("every op matches double-precision finite differences") {
    for (const auto& r : gradcheck::run_all()) {
      INFO(r.name << " worst " << r.check.worst_param);
      CHECK(r.check.checked > 0);
      CHECK(r.check.worst_rel <= 1e-4);
    }
  }

  TEST_CASE("single matmul node equals dense_gemm") {
    Rng rng(1);
    const Matrix a = random_matrix(rng, 3, 5, Normal{0.0, 1.0});
    const Matrix b = random_matrix(rng, 5, 4, Normal{0.0, 1.0});
    Graph g;
    const Var y = g.matmul(g.constant(a), g.constant(b));
    g.forward();
    CHECK(g.value(y) == dense_gemm(a, b));
  }

  TEST_CASE("softmax rows sum to one and gelu(0) is 0") {
    Rng rng(2);
    Graph g;
    const Var x = g.constant(random_matrix(rng, 4, 7, Normal{0.0, 3.0}));
    const Var s = g.softmax(x, 1);
    const Var z = g.gelu(g.constant(Matrix(1, 1)));
    g.forward();
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (float v : g.value(s).row(r)) sum += v;
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK(g.value(z)(0, 0) == 0.0f);
  }

  TEST_CASE("mse gradient vanishes at the target") {
    Param p("x", Matrix::from_rows({{1.0f, -2.0f}, {0.5f, 3.0f}}));
    Graph g;
    Matrix gate(1, 1);
    gate(0, 0) = 1.0f;
    const Var loss = g.mse(g.parameter(p), g.constant(p.value), g.constant(gate));
    g.forward();
    g.backward(loss);
    CHECK(g.value(loss)(0, 0) == 0.0f);
    for (float v : p.grad.data()) CHECK(v == 0.0f);
  }

  TEST_CASE("gradients at pruned positions are zero") {
    Rng rng(3);
    Param w("w", random_matrix(rng, 4, 8, Normal{0.0, 1.0}));
    const auto mask = select_mask_2of4(w.value);
    w.mask = mask;
    Graph g;
    const Var y = g.linear(g.constant(random_matrix(rng, 5, 8, Normal{0.0, 1.0})), g.mask_mul(g.parameter(w), mask));
    const Var loss = g.mean(g.mul(y, y));
    g.forward();
    g.backward(loss);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 8; ++c) {
        if (!mask.keep(r, c)) CHECK(w.grad(r, c) == 0.0f);
      }
  }

  TEST_CASE("label gate marks agreement of argmax") {
    Graph g;
    const Var s = g.constant(Matrix::from_rows({{1, 2, 0}, {3, 0, 0}}));
    const Var t = g.constant(Matrix::from_rows({{0, 5, 1}, {0, 0, 2}}));
    const Var gate = g.label_gate(s, t);
    g.forward();
    CHECK(g.value(gate) == Matrix::from_rows({{1}, {0}}));
  }

  TEST_CASE("sgd: one momentum step and lr = 0") {
    Param p("p", Matrix::from_rows({{1.0f}}));
    p.grad = Matrix::from_rows({{1.0f}});
    Param* ps[] = {&p};
    sgd_step(ps, 0.1f, 0.9f);
    CHECK(p.value(0, 0) == doctest::Approx(0.9));

    Param q("q", Matrix::from_rows({{0.25f, -3.0f}}));
    q.grad = Matrix::from_rows({{5.0f, 1.0f}});
    const Matrix before = q.value;
    Param* qs[] = {&q};
    sgd_step(qs, 0.0f, 0.9f);
    CHECK(q.value == before);

    Param nan("n", Matrix::from_rows({{1.0f}}));
    nan.grad = Matrix::from_rows({{NAN}});
    Param* ns[] = {&nan};
    CHECK_THROWS_AS(sgd_step(ns, 0.1f, 0.9f), Error);
  }

  TEST_CASE("sgd keeps masked weights at zero") {
    Rng rng(4);
    Param w("w", random_matrix(rng, 2, 8, Normal{0.0, 1.0}));
    w.mask = select_mask_2of4(w.value);
    w.value = apply_mask(w.value, *w.mask);
    w.grad = random_matrix(rng, 2, 8, Normal{0.0, 1.0});
    Param* ps[] = {&w};
    sgd_step(ps, 0.5f, 0.9f);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 8; ++c) {
        if (!w.mask->keep(r, c)) CHECK(w.value(r, c) == 0.0f);
      }
  }

  TEST_CASE("loss decreases on a separable toy problem") {
    Rng rng(5);
    Matrix x(32, 4), t(32, 2);
    for (std::size_t i = 0; i < 32; ++i) {
      const std::size_t cls = i % 2;
      for (std::size_t j = 0; j < 4; ++j) x(i, j) = static_cast<float>(rng.normal(0.0, 0.3)) + (cls ? 1.0f : -1.0f);
      t(i, cls) = 1.0f;
    }
    Param w1("w1", random_matrix(rng, 8, 4, Normal{0.0, 0.5}));
    Param b1("b1", Matrix(1, 8));
    Param w2("w2", random_matrix(rng, 2, 8, Normal{0.0, 0.5}));
    Graph g;
    const Var in = g.placeholder("x");
    const Var h = g.gelu(g.add_bias(g.linear(in, g.parameter(w1)), g.parameter(b1)));
    const Var loss = g.cross_entropy(g.linear(h, g.parameter(w2)), g.constant(t));
    Param* ps[] = {&w1, &b1, &w2};
    std::vector<float> losses;
    for (int step = 0; step < 50; ++step) {
      for (auto* p : ps) p->zero_grad();
      g.bind(in, x);
      g.forward();
      g.backward(loss);
      losses.push_back(g.value(loss)(0, 0));
      sgd_step(ps, 0.1f, 0.9f);
    }
    CHECK(losses.back() < losses.front());
  }

  TEST_CASE("graph errors") {
    Graph g;
    const Var p = g.placeholder("x");
    const Var s = g.mean(p);
    try {
      g.forward();
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Graph);
    }
    g.bind(p, Matrix(2, 2));
    g.forward();
    CHECK_NOTHROW(g.backward(s));
    try {
      g.backward(p);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Graph);
    }
  }

  TEST_CASE("forward and backward are deterministic") {
    const auto a = gradcheck::run_all(99);
    const auto b = gradcheck::run_all(99);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].check.worst_rel == b[i].check.worst_rel);
  }
}
