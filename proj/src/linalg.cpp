#include "mumoe/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mumoe/parallel.hpp"

namespace mumoe {

namespace {

std::string pivot_message(std::size_t pivot, double value) {
  std::ostringstream os;
  os << "matrix is not positive definite: pivot " << pivot << " = " << value;
  return os.str();
}

// Row-major packed lower factor in double precision.
std::vector<double> cholesky_packed(const Matrix& a) {
  if (a.rows() != a.cols()) throw ShapeError("cholesky: matrix is not square " + shape_string(a));
  const std::size_t n = a.rows();
  std::vector<double> l(n * (n + 1) / 2, 0.0);
  auto at = [&l](std::size_t i, std::size_t j) -> double& { return l[i * (i + 1) / 2 + j]; };
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t m = 0; m < j; ++m) d -= at(j, m) * at(j, m);
    if (!(d > 0.0)) throw NotPositiveDefinite(j, d);
    const double ljj = std::sqrt(d);
    at(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t m = 0; m < j; ++m) s -= at(i, m) * at(j, m);
      at(i, j) = s / ljj;
    }
  }
  return l;
}

}  // namespace

NotPositiveDefinite::NotPositiveDefinite(std::size_t pivot, double value)
    : std::runtime_error(pivot_message(pivot, value)), pivot_(pivot), value_(value) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<float> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("from_rows: ragged initializer");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

bool Matrix::all_finite() const noexcept {
  for (float v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

LowerTriangular::LowerTriangular(std::size_t dim) : dim_(dim), data_(dim * (dim + 1) / 2, 0.0f) {}

Matrix LowerTriangular::to_dense() const {
  Matrix m(dim_, dim_);
  for (std::size_t i = 0; i < dim_; ++i)
    for (std::size_t j = 0; j <= i; ++j) m(i, j) = (*this)(i, j);
  return m;
}

std::string shape_string(const Matrix& a) {
  return "[" + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + "]";
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_string(a) + " x " + shape_string(b));
  }
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = b.cols();
  Matrix out(m, n);
  // Each output row accumulates over k in ascending order; rows are independent.
  parallel_for(
      m,
      [&](std::size_t begin, std::size_t end) {
        std::vector<double> acc(n);
        for (std::size_t i = begin; i < end; ++i) {
          std::fill(acc.begin(), acc.end(), 0.0);
          const auto arow = a.row(i);
          for (std::size_t j = 0; j < k; ++j) {
            const double aij = arow[j];
            const auto brow = b.row(j);
            for (std::size_t t = 0; t < n; ++t) acc[t] += aij * static_cast<double>(brow[t]);
          }
          auto orow = out.row(i);
          for (std::size_t t = 0; t < n; ++t) orow[t] = static_cast<float>(acc[t]);
        }
      },
      std::max<std::size_t>(1, 16384 / std::max<std::size_t>(1, k * n)));
  return out;
}

std::vector<float> row_l2_norms(const Matrix& x) {
  std::vector<float> norms(x.rows());
  for (std::size_t j = 0; j < x.rows(); ++j) {
    double s = 0.0;
    for (float v : x.row(j)) s += static_cast<double>(v) * v;
    norms[j] = static_cast<float>(std::sqrt(s));
  }
  return norms;
}

Matrix gram(const Matrix& x, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("gram: lambda must be non-negative");
  const std::size_t d = x.rows();
  Matrix g(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    const auto xi = x.row(i);
    for (std::size_t j = i; j < d; ++j) {
      const auto xj = x.row(j);
      double s = 0.0;
      for (std::size_t t = 0; t < x.cols(); ++t) s += static_cast<double>(xi[t]) * xj[t];
      if (i == j) s += lambda;
      g(i, j) = static_cast<float>(s);
      g(j, i) = g(i, j);
    }
  }
  return g;
}

LowerTriangular cholesky(const Matrix& a) {
  const auto packed = cholesky_packed(a);
  LowerTriangular l(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j <= i; ++j) l.at(i, j) = static_cast<float>(packed[i * (i + 1) / 2 + j]);
  return l;
}

Matrix spd_inverse(const Matrix& a) {
  const auto l = cholesky_packed(a);
  const std::size_t n = a.rows();
  auto lat = [&l](std::size_t i, std::size_t j) { return l[i * (i + 1) / 2 + j]; };

  // Forward substitution for L⁻¹, column by column; L⁻¹ is lower triangular.
  std::vector<double> inv(n * n, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t i = c; i < n; ++i) {
      double s = (i == c) ? 1.0 : 0.0;
      for (std::size_t m = c; m < i; ++m) s -= lat(i, m) * inv[m * n + c];
      inv[i * n + c] = s / lat(i, i);
    }
  }

  // A⁻¹ = L⁻ᵀ L⁻¹; fill the upper half and mirror.
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t m = j; m < n; ++m) s += inv[m * n + i] * inv[m * n + j];
      out(i, j) = static_cast<float>(s);
      out(j, i) = out(i, j);
    }
  }
  return out;
}

double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (float v : a.data()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

}  // namespace mumoe
