#include <cmath>

#include "doctest.h"
#include "ketlab/numerics.hpp"
#include "ketlab/rng.hpp"

using namespace ketlab::numerics;

namespace {

Matrix random_matrix(Rng& rng, int r, int c, double scale = 1.0) {
  Matrix m(r, c);
  for (float& x : m.data) x = static_cast<float>(rng.normal(0.0, scale));
  return m;
}

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < b.cols; ++j) {
      float s = 0.0f;
      for (int k = 0; k < a.cols; ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  return c;
}

double rel_fro_diff(const Matrix& a, const Matrix& b) {
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    num += d * d;
    den += static_cast<double>(b.data[i]) * b.data[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-30);
}

Matrix random_spd(Rng& rng, int n) {
  Matrix a = random_matrix(rng, n, n);
  Matrix c = matmul_tn(a, a);
  for (int i = 0; i < n; ++i) c.at(i, i) += static_cast<float>(0.5 * n);
  return c;
}

}  // namespace

TEST_CASE("matmul identity and annihilator") {
  Rng rng(7);
  Matrix a = random_matrix(rng, 3, 5);
  Matrix i3 = Matrix::identity(3);
  Matrix prod = matmul(i3, a);
  for (size_t k = 0; k < a.data.size(); ++k) CHECK(prod.data[k] == a.data[k]);

  Matrix z(5, 4);
  Matrix az = matmul(a, z);
  for (float v : az.data) CHECK(v == 0.0f);
}

TEST_CASE("matmul matches the naive triple-loop oracle") {
  Rng rng(11);
  Matrix a = random_matrix(rng, 5, 4);
  Matrix b = random_matrix(rng, 4, 3);
  CHECK(rel_fro_diff(matmul(a, b), naive_matmul(a, b)) < 1e-6);
}

TEST_CASE("matmul oracle property over 100 seeds") {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    Matrix a = random_matrix(rng, 10, 10);
    Matrix b = random_matrix(rng, 10, 10);
    CHECK(rel_fro_diff(matmul(a, b), naive_matmul(a, b)) < 1e-6);
  }
}

TEST_CASE("matmul dimension mismatch throws") {
  Matrix a(2, 3), b(4, 2);
  CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("solve_spd diagonal and identity systems") {
  Matrix c(2, 2);
  c.at(0, 0) = 2.0f;
  c.at(1, 1) = 4.0f;
  Matrix b(2, 1);
  b.at(0, 0) = 2.0f;
  b.at(1, 0) = 8.0f;
  Matrix x = solve_spd(c, b);
  CHECK(x.at(0, 0) == doctest::Approx(1.0));
  CHECK(x.at(1, 0) == doctest::Approx(2.0));

  Rng rng(3);
  Matrix any = random_matrix(rng, 6, 1);
  Matrix xi = solve_spd(Matrix::identity(6), any);
  for (int i = 0; i < 6; ++i) CHECK(xi.at(i, 0) == doctest::Approx(any.at(i, 0)).epsilon(1e-6));
}

TEST_CASE("solve_spd residual bound on random systems up to 64x64") {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(63));
    Matrix c = random_spd(rng, n);
    Matrix b = random_matrix(rng, n, 1);
    Matrix x = solve_spd(c, b);
    Matrix cx = matmul(c, x);
    double num = 0.0, den = 0.0;
    for (int i = 0; i < n; ++i) {
      const double d = static_cast<double>(cx.at(i, 0)) - b.at(i, 0);
      num += d * d;
      den += static_cast<double>(b.at(i, 0)) * b.at(i, 0);
    }
    CHECK(std::sqrt(num) / std::sqrt(den) <= 1e-5);
  }
}

TEST_CASE("solve_spd rejects asymmetric and indefinite matrices") {
  Matrix c(2, 2);
  c.at(0, 0) = 1.0f;
  c.at(0, 1) = 5.0f;
  c.at(1, 0) = -5.0f;
  c.at(1, 1) = 1.0f;
  Matrix b(2, 1);
  b.at(0, 0) = 1.0f;
  CHECK_THROWS_AS(solve_spd(c, b), std::invalid_argument);

  Matrix ind(2, 2);
  ind.at(0, 0) = 1.0f;
  ind.at(1, 1) = -1.0f;
  CHECK_THROWS_AS(solve_spd(ind, b), SingularSystemError);
}

TEST_CASE("softmax_xent uniform and hand-evaluated cases") {
  {
    std::vector<float> logits = {0.0f, 0.0f};
    auto sx = softmax_xent(logits, 0);
    CHECK(sx.probs[0] == doctest::Approx(0.5));
    CHECK(sx.probs[1] == doctest::Approx(0.5));
    CHECK(sx.loss == doctest::Approx(std::log(2.0)));
    CHECK(sx.dlogits[0] == doctest::Approx(-0.5));
    CHECK(sx.dlogits[1] == doctest::Approx(0.5));
  }
  {
    std::vector<float> logits = {static_cast<float>(std::log(2.0)), 0.0f};
    auto sx = softmax_xent(logits, 0);
    CHECK(sx.probs[0] == doctest::Approx(2.0 / 3.0));
    CHECK(sx.probs[1] == doctest::Approx(1.0 / 3.0));
  }
}

TEST_CASE("softmax shift invariance") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> logits(8), shifted(8);
    const float c = static_cast<float>(rng.normal(0.0, 5.0));
    for (int i = 0; i < 8; ++i) {
      logits[i] = static_cast<float>(rng.normal(0.0, 2.0));
      shifted[i] = logits[i] + c;
    }
    auto p = softmax(logits);
    auto q = softmax(shifted);
    double sum = 0.0;
    for (int i = 0; i < 8; ++i) {
      CHECK(p[i] == doctest::Approx(q[i]).epsilon(1e-6));
      sum += p[i];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("adamw fixed point and hand-stepped scalars") {
  Matrix theta(1, 1);
  theta.at(0, 0) = 1.0f;
  Matrix zero_grad(1, 1);
  AdamState st(theta);
  adamw_step(theta, zero_grad, st, 1, 0.1, 0.9, 0.999, 1e-8, 0.0);
  CHECK(theta.at(0, 0) == 1.0f);

  theta.at(0, 0) = 1.0f;
  st = AdamState(theta);
  Matrix grad(1, 1);
  grad.at(0, 0) = 1.0f;
  adamw_step(theta, grad, st, 1, 0.1, 0.9, 0.999, 1e-8, 0.0);
  CHECK(theta.at(0, 0) == doctest::Approx(0.9).epsilon(1e-6));

  theta.at(0, 0) = 1.0f;
  st = AdamState(theta);
  adamw_step(theta, grad, st, 1, 0.1, 0.9, 0.999, 1e-8, 0.01);
  CHECK(theta.at(0, 0) == doctest::Approx(0.899).epsilon(1e-6));
}

TEST_CASE("adamw is bit-identical across repeated runs") {
  auto run = [] {
    Rng rng(99);
    Matrix theta = random_matrix(rng, 4, 4);
    AdamState st(theta);
    for (long s = 1; s <= 10; ++s) {
      Matrix g = random_matrix(rng, 4, 4);
      adamw_step(theta, g, st, s, 3e-3, 0.9, 0.999, 1e-8, 0.01);
    }
    return theta;
  };
  Matrix a = run(), b = run();
  for (size_t i = 0; i < a.data.size(); ++i) CHECK(a.data[i] == b.data[i]);
}

TEST_CASE("finite_diff_grad on simple functions") {
  auto square = [](std::span<const double> t) { return t[0] * t[0]; };
  std::vector<double> theta = {3.0};
  auto g = finite_diff_grad(square, theta, 1e-4);
  CHECK(g[0] == doctest::Approx(6.0).epsilon(1e-6));

  auto constant = [](std::span<const double>) { return 4.2; };
  std::vector<double> t2 = {1.0, -2.0, 0.5};
  auto g2 = finite_diff_grad(constant, t2, 1e-4);
  for (double v : g2) CHECK(v == 0.0);

  CHECK_THROWS_AS(finite_diff_grad(square, theta, 0.0), std::invalid_argument);
}

TEST_CASE("rng determinism and substreams") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng base(42);
  Rng s1 = base.substream("world");
  Rng s2 = base.substream("pretrain");
  CHECK(s1.next_u64() != s2.next_u64());
  // substreams derive from the origin seed, not the parent draw position
  Rng c(42);
  c.next_u64();
  Rng s1_again = c.substream("world");
  Rng s1_ref = Rng(42).substream("world");
  CHECK(s1_again.next_u64() == s1_ref.next_u64());

  Rng u(7);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
  }
}
