#include "mumoe/sparse.hpp"

#include <algorithm>
#include <bit>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "mumoe/parallel.hpp"

namespace mumoe {

namespace {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::istream& is, const char* what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) {
    throw std::runtime_error(std::string("row-sparse dump truncated while reading ") + what);
  }
  return v;
}

}  // namespace

RowSparseMatrix compress(const Matrix& w, const SparsityMask& mask) {
  if (w.rows() != mask.rows() || w.cols() != mask.cols()) {
    throw ShapeError("compress: weight " + shape_string(w) + " with mask [" + std::to_string(mask.rows()) +
                     "x" + std::to_string(mask.cols()) + "]");
  }
  RowSparseMatrix out;
  out.rows_ = w.rows();
  out.cols_ = w.cols();
  out.offsets_.assign(1, 0);
  out.offsets_.reserve(w.rows() + 1);
  std::size_t max_count = 0;
  std::size_t min_count = w.cols();
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto wr = w.row(r);
    for (std::size_t c = 0; c < w.cols(); ++c) {
      if (mask.active(r, c)) {
        out.col_idx_.push_back(static_cast<std::uint32_t>(c));
        out.values_.push_back(wr[c]);
      }
    }
    out.offsets_.push_back(out.col_idx_.size());
    const std::size_t n = out.offsets_[r + 1] - out.offsets_[r];
    max_count = std::max(max_count, n);
    min_count = std::min(min_count, n);
  }
  out.k_ = w.rows() == 0 ? mask.k_active_per_row() : max_count;
  out.ragged_ = w.rows() > 0 && min_count != max_count;
  return out;
}

void RowSparseMatrix::validate() const {
  if (offsets_.size() != rows_ + 1 || offsets_.back() != col_idx_.size() || col_idx_.size() != values_.size()) {
    throw std::runtime_error("row-sparse matrix: inconsistent offsets");
  }
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t m = offsets_[r]; m < offsets_[r + 1]; ++m) {
      if (col_idx_[m] >= cols_) throw std::runtime_error("row-sparse matrix: column index out of range");
      if (m > offsets_[r] && col_idx_[m] <= col_idx_[m - 1]) {
        throw std::runtime_error("row-sparse matrix: column indices not strictly ascending");
      }
    }
  }
}

Matrix RowSparseMatrix::to_dense() const {
  Matrix m(rows_, cols_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t i = offsets_[r]; i < offsets_[r + 1]; ++i) m(r, col_idx_[i]) = values_[i];
  return m;
}

void RowSparseMatrix::dump(std::ostream& os) const {
  put_u32(os, static_cast<std::uint32_t>(rows_));
  put_u32(os, static_cast<std::uint32_t>(cols_));
  put_u32(os, ragged_ ? kRaggedMarker : static_cast<std::uint32_t>(k_));
  if (ragged_) {
    for (std::size_t r = 0; r < rows_; ++r) put_u32(os, static_cast<std::uint32_t>(row_count(r)));
  }
  os.write(reinterpret_cast<const char*>(col_idx_.data()),
           static_cast<std::streamsize>(col_idx_.size() * sizeof(std::uint32_t)));
  os.write(reinterpret_cast<const char*>(values_.data()),
           static_cast<std::streamsize>(values_.size() * sizeof(float)));
}

RowSparseMatrix RowSparseMatrix::load(std::istream& is) {
  RowSparseMatrix m;
  m.rows_ = get_u32(is, "rows");
  m.cols_ = get_u32(is, "cols");
  const std::uint32_t k = get_u32(is, "k");
  m.offsets_.assign(1, 0);
  if (k == kRaggedMarker) {
    m.ragged_ = true;
    for (std::size_t r = 0; r < m.rows_; ++r) {
      const std::size_t n = get_u32(is, "row counts");
      m.k_ = std::max(m.k_, n);
      m.offsets_.push_back(m.offsets_.back() + n);
    }
  } else {
    if (k > m.cols_) throw std::runtime_error("row-sparse dump: k exceeds column count");
    m.k_ = k;
    for (std::size_t r = 0; r < m.rows_; ++r) m.offsets_.push_back(m.offsets_.back() + k);
  }
  const std::size_t nnz = m.offsets_.back();
  m.col_idx_.resize(nnz);
  m.values_.resize(nnz);
  if (!is.read(reinterpret_cast<char*>(m.col_idx_.data()), static_cast<std::streamsize>(nnz * 4))) {
    throw std::runtime_error("row-sparse dump truncated while reading col_idx");
  }
  if (!is.read(reinterpret_cast<char*>(m.values_.data()), static_cast<std::streamsize>(nnz * 4))) {
    throw std::runtime_error("row-sparse dump truncated while reading values");
  }
  m.validate();
  return m;
}

Matrix sparse_matmul(const RowSparseMatrix& ws, const Matrix& x) {
  if (ws.cols() != x.rows()) {
    throw ShapeError("sparse_matmul: [" + std::to_string(ws.rows()) + "x" + std::to_string(ws.cols()) +
                     "] x " + shape_string(x));
  }
  const std::size_t n = x.cols();
  Matrix out(ws.rows(), n);
  const auto& cols = ws.col_idx();
  const auto& vals = ws.values();
  parallel_for(
      ws.rows(),
      [&](std::size_t begin, std::size_t end) {
        std::vector<double> acc(n);
        for (std::size_t r = begin; r < end; ++r) {
          std::fill(acc.begin(), acc.end(), 0.0);
          for (std::size_t m = ws.row_begin(r); m < ws.row_end(r); ++m) {
            const double v = vals[m];
            const auto xrow = x.row(cols[m]);
            for (std::size_t t = 0; t < n; ++t) acc[t] += v * static_cast<double>(xrow[t]);
          }
          auto orow = out.row(r);
          for (std::size_t t = 0; t < n; ++t) orow[t] = static_cast<float>(acc[t]);
        }
      },
      std::max<std::size_t>(1, 16384 / std::max<std::size_t>(1, ws.k() * n)));
  return out;
}

double approx_loss(const Matrix& w, const RowSparseMatrix& ws, const Matrix& x) {
  if (w.rows() != ws.rows() || w.cols() != ws.cols() || w.cols() != x.rows()) {
    throw ShapeError("approx_loss: weight " + shape_string(w) + ", input " + shape_string(x));
  }
  const std::size_t d = w.cols();
  const std::size_t n = x.cols();
  std::vector<double> diff(d);
  std::vector<double> acc(n);
  double loss = 0.0;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto wr = w.row(r);
    for (std::size_t j = 0; j < d; ++j) diff[j] = wr[j];
    for (std::size_t m = ws.row_begin(r); m < ws.row_end(r); ++m) {
      diff[ws.col_idx()[m]] -= static_cast<double>(ws.values()[m]);
    }
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t j = 0; j < d; ++j) {
      if (diff[j] == 0.0) continue;
      const auto xr = x.row(j);
      for (std::size_t t = 0; t < n; ++t) acc[t] += diff[j] * static_cast<double>(xr[t]);
    }
    for (double a : acc) loss += a * a;
  }
  return loss;
}

}  // namespace mumoe
