#pragma once

// Generators and brute-force oracles shared by the test suites. Nothing here
// calls into the library kernels it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "mumoe/linalg.hpp"

namespace mumoe::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, float stddev = 1.0f) {
  std::normal_distribution<float> dist(0.0f, stddev);
  Matrix m(rows, cols);
  for (float& v : m.data()) v = dist(rng);
  return m;
}

inline Matrix random_uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng, float lo = 0.0f,
                             float hi = 1.0f) {
  std::uniform_real_distribution<float> dist(lo, hi);
  Matrix m(rows, cols);
  for (float& v : m.data()) v = dist(rng);
  return m;
}

/// Plain i-j-k product in double, returned unrounded.
inline std::vector<double> naive_matmul(const Matrix& a, const Matrix& b) {
  std::vector<double> out(a.rows() * b.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<double>(a(i, k)) * b(k, j);
      out[i * b.cols() + j] = s;
    }
  return out;
}

/// Random SPD matrix M Mᵀ + shift·I in float.
inline Matrix random_spd(std::size_t n, std::mt19937_64& rng, double shift = 1.0) {
  const Matrix m = random_matrix(n, n, rng);
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = i == j ? shift : 0.0;
      for (std::size_t k = 0; k < n; ++k) s += static_cast<double>(m(i, k)) * m(j, k);
      a(i, j) = static_cast<float>(s);
    }
  return a;
}

/// Gauss-Jordan inverse with partial pivoting, double precision.
inline std::vector<double> gauss_jordan_inverse(const Matrix& a) {
  const std::size_t n = a.rows();
  std::vector<double> m(n * 2 * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) m[i * 2 * n + j] = a(i, j);
    m[i * 2 * n + n + i] = 1.0;
  }
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::fabs(m[r * 2 * n + c]) > std::fabs(m[piv * 2 * n + c])) piv = r;
    for (std::size_t j = 0; j < 2 * n; ++j) std::swap(m[c * 2 * n + j], m[piv * 2 * n + j]);
    const double p = m[c * 2 * n + c];
    for (std::size_t j = 0; j < 2 * n; ++j) m[c * 2 * n + j] /= p;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = m[r * 2 * n + c];
      for (std::size_t j = 0; j < 2 * n; ++j) m[r * 2 * n + j] -= f * m[c * 2 * n + j];
    }
  }
  std::vector<double> inv(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) inv[i * n + j] = m[i * 2 * n + n + j];
  return inv;
}

/// Determinant of the leading k x k block of a row-major n x n matrix (LU with pivoting).
inline double leading_minor(const std::vector<double>& a, std::size_t n, std::size_t k) {
  if (k == 0) return 1.0;
  std::vector<double> m(k * k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) m[i * k + j] = a[i * n + j];
  double det = 1.0;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < k; ++r)
      if (std::fabs(m[r * k + c]) > std::fabs(m[piv * k + c])) piv = r;
    if (piv != c) {
      for (std::size_t j = 0; j < k; ++j) std::swap(m[c * k + j], m[piv * k + j]);
      det = -det;
    }
    det *= m[c * k + c];
    for (std::size_t r = c + 1; r < k; ++r) {
      const double f = m[r * k + c] / m[c * k + c];
      for (std::size_t j = c; j < k; ++j) m[r * k + j] -= f * m[c * k + j];
    }
  }
  return det;
}

inline double rel_diff(double a, double b) {
  const double scale = std::max(std::fabs(a), std::fabs(b));
  return scale == 0.0 ? 0.0 : std::fabs(a - b) / scale;
}

}  // namespace mumoe::testing
