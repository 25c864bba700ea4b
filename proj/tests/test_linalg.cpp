#include <cstdlib>

#include "doctest.h"
#include "mumoe/linalg.hpp"
#include "test_util.hpp"

using namespace mumoe;
using mumoe::testing::naive_matmul;
using mumoe::testing::random_matrix;
using mumoe::testing::random_spd;

TEST_CASE("matmul: identity and hand-forced sums") {
  const Matrix b = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
  CHECK(matmul(Matrix::identity(2), b) == b);

  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix ones = Matrix::from_rows({{1}, {1}});
  CHECK(matmul(a, ones) == Matrix::from_rows({{3}, {7}}));
}

TEST_CASE("matmul: random 8x8 pair matches triple-loop oracle") {
  std::mt19937_64 rng(1);
  const Matrix a = random_matrix(8, 8, rng);
  const Matrix b = random_matrix(8, 8, rng);
  const Matrix c = matmul(a, b);
  const auto ref = naive_matmul(a, b);
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(std::fabs(c.data()[i] - ref[i]) <= 1e-6 * std::max(1.0, std::fabs(ref[i])));
  }
}

TEST_CASE("matmul: dimension mismatch is a shape error") {
  CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
}

TEST_CASE("matmul: bitwise identical across thread counts") {
  std::mt19937_64 rng(2);
  const Matrix a = random_matrix(96, 80, rng);
  const Matrix b = random_matrix(80, 70, rng);
  setenv("MUMOE_THREADS", "1", 1);
  const Matrix one = matmul(a, b);
  setenv("MUMOE_THREADS", "4", 1);
  const Matrix four = matmul(a, b);
  unsetenv("MUMOE_THREADS");
  CHECK(one == four);
  CHECK(matmul(a, b) == one);
}

TEST_CASE("row_l2_norms") {
  CHECK(row_l2_norms(Matrix::identity(3)) == std::vector<float>{1, 1, 1});
  CHECK(row_l2_norms(Matrix::from_rows({{3, 4}})) == std::vector<float>{5});

  std::mt19937_64 rng(3);
  const Matrix x = random_matrix(16, 32, rng);
  const auto norms = row_l2_norms(x);
  double frob_sq = 0.0;
  double norms_sq = 0.0;
  for (std::size_t j = 0; j < 16; ++j) {
    double s = 0.0;
    for (std::size_t t = 0; t < 32; ++t) s += static_cast<double>(x(j, t)) * x(j, t);
    CHECK(std::fabs(norms[j] - std::sqrt(s)) <= 1e-6 * std::sqrt(s));
    frob_sq += s;
    norms_sq += static_cast<double>(norms[j]) * norms[j];
  }
  CHECK(mumoe::testing::rel_diff(norms_sq, frob_sq) < 1e-6);
}

TEST_CASE("gram") {
  CHECK(gram(Matrix::identity(2), 0.0) == Matrix::identity(2));
  CHECK(gram(Matrix::from_rows({{1, 1}, {0, 0}}), 0.5) == Matrix::from_rows({{2.5f, 0}, {0, 0.5f}}));

  std::mt19937_64 rng(4);
  const Matrix x = random_matrix(8, 64, rng);
  const Matrix g = gram(x, 0.01);
  CHECK(g == g.transposed());
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      double s = i == j ? 0.01 : 0.0;
      for (std::size_t t = 0; t < 64; ++t) s += static_cast<double>(x(i, t)) * x(j, t);
      CHECK(std::fabs(g(i, j) - s) <= 1e-6 * std::max(1.0, std::fabs(s)));
    }
  CHECK_THROWS(gram(x, -1.0));
}

TEST_CASE("cholesky: hand cases") {
  CHECK(cholesky(Matrix::identity(4)).to_dense() == Matrix::identity(4));
  const auto l = cholesky(Matrix::from_rows({{4, 2}, {2, 5}}));
  CHECK(l.to_dense() == Matrix::from_rows({{2, 0}, {1, 2}}));
  CHECK(l(0, 1) == 0.0f);
}

TEST_CASE("cholesky: reconstruction of random SPD matrices") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(trial % 12);
    const Matrix a = random_spd(n, rng);
    const auto l = cholesky(a);
    for (std::size_t i = 0; i < n; ++i) CHECK(l.diag(i) > 0.0f);
    const Matrix ld = l.to_dense();
    const auto llt = naive_matmul(ld, ld.transposed());
    double err = 0.0;
    for (std::size_t i = 0; i < n * n; ++i) err += (llt[i] - a.data()[i]) * (llt[i] - a.data()[i]);
    CHECK(std::sqrt(err) / frobenius_norm(a) < 1e-5);
  }
}

TEST_CASE("cholesky: non-positive pivot reports its index") {
  const Matrix a = Matrix::from_rows({{1, 2}, {2, 1}});
  try {
    (void)cholesky(a);
    FAIL("expected NotPositiveDefinite");
  } catch (const NotPositiveDefinite& e) {
    CHECK(e.pivot() == 1);
    CHECK(e.value() <= 0.0);
  }
  CHECK_THROWS_AS(cholesky(Matrix(2, 3)), ShapeError);
  CHECK_THROWS_AS(spd_inverse(Matrix::from_rows({{-1}})), NotPositiveDefinite);
}

TEST_CASE("spd_inverse") {
  CHECK(spd_inverse(Matrix::identity(3)) == Matrix::identity(3));
  CHECK(spd_inverse(Matrix::from_rows({{2, 0}, {0, 4}})) == Matrix::from_rows({{0.5f, 0}, {0, 0.25f}}));

  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_spd(8, rng);
    const Matrix inv = spd_inverse(a);
    CHECK(inv == inv.transposed());
    const auto prod = naive_matmul(a, inv);
    double err = 0.0;
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) {
        const double e = prod[i * 8 + j] - (i == j ? 1.0 : 0.0);
        err += e * e;
      }
    CHECK(std::sqrt(err) < 1e-4);
  }
}
