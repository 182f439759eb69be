#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "emrf/tensor.hpp"

using namespace emrf;

TEST_CASE("elementwise basics") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = Tensor::from({2}, {3, 4});
  Tensor m = mul(a, b);
  CHECK(m.at(0) == 3);
  CHECK(m.at(1) == 8);

  Tensor z = add(a, Tensor::zeros({2}));
  CHECK(z.at(0) == a.at(0));
  CHECK(z.at(1) == a.at(1));

  Tensor c = clamp(Tensor::from({2}, {-0.5, 1.5}), 0, 1);
  CHECK(c.at(0) == 0);
  CHECK(c.at(1) == 1);

  Tensor s = sub(b, a);
  CHECK(s.at(0) == 2);
  Tensor d = div(b, a);
  CHECK(d.at(1) == 2);
  Tensor sc = scale(a, -2.0);
  CHECK(sc.at(0) == -2);
}

TEST_CASE("elementwise errors") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor bad = Tensor::from({3}, {1, 2, 3});
  CHECK_THROWS_WITH_AS(add(a, bad), doctest::Contains("shape mismatch"), Error);
  Tensor zeros = Tensor::from({2}, {1, 0});
  CHECK_THROWS_WITH_AS(div(a, zeros), doctest::Contains("zero"), Error);
}

TEST_CASE("matmul identity, oracle, annihilator") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Rng rng(3);
  Tensor b = Tensor::uniform({2, 5}, rng, -1, 1);
  Tensor ib = matmul(eye, b);
  for (int64_t i = 0; i < b.numel(); ++i) CHECK(ib.at(i) == b.at(i));

  Tensor p = matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 1}, {5, 6}));
  CHECK(p.at(0) == 17);
  CHECK(p.at(1) == 39);

  Tensor z = matmul(Tensor::zeros({3, 4}), Tensor::uniform({4, 2}, rng, -1, 1));
  for (int64_t i = 0; i < z.numel(); ++i) CHECK(z.at(i) == 0);

  CHECK_THROWS_WITH_AS(matmul(eye, Tensor::zeros({3, 2})), doctest::Contains("inner"), Error);
}

TEST_CASE("reduce sum/mean/max") {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor s = sum(x, {0});
  CHECK(s.at(0) == 4);
  CHECK(s.at(1) == 6);

  Tensor c = mean_all(Tensor::full({3, 5}, 2.5));
  CHECK(c.at(0) == doctest::Approx(2.5).epsilon(1e-15));

  Tensor mx = reduce_max(Tensor::from({3}, {1, 5, 3}), {0});
  CHECK(mx.at(0) == 5);

  CHECK_THROWS_WITH_AS(sum(x, {2}), doctest::Contains("axis"), Error);
}

TEST_CASE("backward on sum of squares") {
  Tensor x = Tensor::from({3}, {1, 2, 3}, /*requires_grad=*/true);
  Tensor loss = sum_all(mul(x, x));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2).epsilon(1e-12));
  CHECK(x.grad()[1] == doctest::Approx(4).epsilon(1e-12));
  CHECK(x.grad()[2] == doctest::Approx(6).epsilon(1e-12));
}

TEST_CASE("backward of a constant leaves zero gradients") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  // x participates but with zero coefficient
  Tensor loss = add(scale(sum_all(x), 0.0), Tensor::scalar(5.0));
  backward(loss);
  CHECK(x.grad()[0] == 0);
  CHECK(x.grad()[1] == 0);
}

TEST_CASE("backward rejects non-scalar and detached losses") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y = mul(x, x);
  CHECK_THROWS_WITH_AS(backward(y), doctest::Contains("scalar"), Error);
  Tensor off_tape = Tensor::from({1}, {3});
  CHECK_THROWS_WITH_AS(backward(off_tape), doctest::Contains("tape"), Error);
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(17);
  Tensor x0 = Tensor::uniform({4}, rng, -1, 1);
  const double a = 1.7, b = -0.4;

  auto grad_of = [&](double ca, double cb) {
    Tensor x = x0.detach();
    x.set_requires_grad(true);
    Tensor l1 = sum_all(mul(x, x));
    Tensor l2 = sum_all(exp(x));
    backward(add(scale(l1, ca), scale(l2, cb)));
    return x.grad();
  };

  auto g1 = grad_of(1, 0);
  auto g2 = grad_of(0, 1);
  auto gc = grad_of(a, b);
  for (size_t i = 0; i < gc.size(); ++i)
    CHECK(gc[i] == doctest::Approx(a * g1[i] + b * g2[i]).epsilon(0).scale(1).epsilon(1e-10));
}

TEST_CASE("tape-free forward is bit-identical across replays") {
  Rng rng(5);
  Tensor x = Tensor::uniform({3, 3}, rng, -1, 1);
  NoGradGuard ng;
  auto run = [&] { return matmul(exp(x), transpose2d(sqrt(add_scalar(mul(x, x), 1.0)))); };
  Tensor y1 = run(), y2 = run();
  for (int64_t i = 0; i < y1.numel(); ++i) CHECK(y1.at(i) == y2.at(i));
}

TEST_CASE("grad_check passes on sum of squares") {
  Tensor x = Tensor::from({2}, {1, 2});
  auto report = grad_check([](const Tensor& t) { return sum_all(mul(t, t)); }, x);
  CHECK(report.pass);
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("grad_check fails when the analytic gradient is scaled by 1.01") {
  // same value as sum(x*x) but with a deliberately wrong pullback
  auto faulty_square_sum = [](const Tensor& t) {
    double acc = 0;
    for (int64_t i = 0; i < t.numel(); ++i) acc += t.at(i) * t.at(i);
    return detail::make_result({1}, {acc}, {&t}, [](Node& n) {
      Node& p = *n.parents[0];
      p.ensure_grad();
      for (size_t i = 0; i < p.values.size(); ++i)
        p.grad[i] += 1.01 * 2.0 * p.values[i] * n.grad[0];
    });
  };
  auto report = grad_check(faulty_square_sum, Tensor::from({3}, {1.0, -2.0, 0.5}));
  CHECK_FALSE(report.pass);
}

TEST_CASE("grad_check reports non-finite evaluations") {
  // exp overflows to inf here without throwing, so the checker must flag it
  Tensor x = Tensor::from({1}, {710.0});
  CHECK_THROWS_WITH_AS(
      grad_check([](const Tensor& t) { return sum_all(exp(t)); }, x),
      doctest::Contains("non-finite"), Error);
}

TEST_CASE("reshape, transpose, slice, concat round-trips") {
  Rng rng(11);
  Tensor x = Tensor::uniform({2, 6}, rng, -1, 1);
  Tensor r = reshape(x, {3, 4});
  CHECK(r.numel() == x.numel());
  CHECK_THROWS_WITH_AS(reshape(x, {5, 2}), doctest::Contains("element"), Error);

  Tensor tt = transpose2d(transpose2d(x));
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(tt.at(i) == x.at(i));

  Tensor left = slice(x, 1, 0, 3), right = slice(x, 1, 3, 3);
  Tensor glued = concat({left, right}, 1);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(glued.at(i) == x.at(i));
}

TEST_CASE("per-op gradients across 10 random seeds") {
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    Tensor a = Tensor::uniform({2, 3}, rng, 0.2, 1.5);
    Tensor b = Tensor::uniform({2, 3}, rng, 0.2, 1.5);
    Tensor w = Tensor::uniform({2, 3}, rng, 0.25, 1.0);
    auto proj = [&](const Tensor& y) { return sum_all(mul(y, w)); };
    CHECK(grad_check([&](const Tensor& x) { return proj(mul(x, b)); }, a).pass);
    CHECK(grad_check([&](const Tensor& x) { return proj(div(b, x)); }, a).pass);
    CHECK(grad_check([&](const Tensor& x) { return proj(exp(x)); }, a).pass);
    CHECK(grad_check([&](const Tensor& x) { return proj(log(x)); }, a).pass);
    Tensor m2 = Tensor::uniform({3, 2}, rng, -1, 1);
    CHECK(grad_check([&](const Tensor& x) { return sum_all(matmul(x, m2)); }, a).pass);
  }
}
