#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mumoe {

/// Raised when operand shapes do not agree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by cholesky() when a pivot is not strictly positive.
class NotPositiveDefinite : public std::runtime_error {
 public:
  NotPositiveDefinite(std::size_t pivot, double value);

  std::size_t pivot() const noexcept { return pivot_; }
  double value() const noexcept { return value_; }

 private:
  std::size_t pivot_;
  double value_;
};

/// Dense row-major float32 matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  Matrix transposed() const;
  bool all_finite() const noexcept;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// Packed lower-triangular factor. Entry (i, j) with j <= i lives at i*(i+1)/2 + j.
class LowerTriangular {
 public:
  LowerTriangular() = default;
  explicit LowerTriangular(std::size_t dim);

  std::size_t dim() const noexcept { return dim_; }
  float operator()(std::size_t i, std::size_t j) const {
    return j > i ? 0.0f : data_[i * (i + 1) / 2 + j];
  }
  float& at(std::size_t i, std::size_t j) { return data_[i * (i + 1) / 2 + j]; }
  float diag(std::size_t i) const { return data_[i * (i + 1) / 2 + i]; }
  std::span<const float> packed() const noexcept { return data_; }

  Matrix to_dense() const;

 private:
  std::size_t dim_ = 0;
  std::vector<float> data_;
};

// All kernels accumulate in double and round to float on store. Reductions run
// in ascending index order, so results do not depend on the thread count.

Matrix matmul(const Matrix& a, const Matrix& b);

/// Euclidean norm of every row of x.
std::vector<float> row_l2_norms(const Matrix& x);

/// x xᵀ + lambda I, computed on the upper half and mirrored.
Matrix gram(const Matrix& x, double lambda);

LowerTriangular cholesky(const Matrix& a);

/// Inverse of a symmetric positive definite matrix via Cholesky and triangular solves.
Matrix spd_inverse(const Matrix& a);

double frobenius_norm(const Matrix& a);

std::string shape_string(const Matrix& a);

}  // namespace mumoe
