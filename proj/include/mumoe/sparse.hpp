#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mumoe/linalg.hpp"
#include "mumoe/selection.hpp"

namespace mumoe {

/// ELL-style compressed weights: a fixed number k of (column, value) pairs per
/// row with ascending columns. Masks in parity mode may leave rows short; such
/// matrices are ragged and keep per-row offsets.
class RowSparseMatrix {
 public:
  RowSparseMatrix() = default;

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  /// Active count per row for uniform matrices; the maximum row count for ragged ones.
  std::size_t k() const noexcept { return k_; }
  bool ragged() const noexcept { return ragged_; }
  std::size_t nnz() const noexcept { return values_.size(); }

  std::size_t row_begin(std::size_t r) const { return offsets_[r]; }
  std::size_t row_end(std::size_t r) const { return offsets_[r + 1]; }
  std::size_t row_count(std::size_t r) const { return offsets_[r + 1] - offsets_[r]; }

  const std::vector<std::uint32_t>& col_idx() const noexcept { return col_idx_; }
  const std::vector<float>& values() const noexcept { return values_; }

  /// Scatter back to dense with zeros in pruned positions. Test and inspection use only.
  Matrix to_dense() const;

  /// Binary layout, all little-endian: u32 rows, u32 cols, u32 k, then col_idx as
  /// u32, then values as f32. Ragged matrices write k = 0xFFFFFFFF followed by
  /// one u32 count per row before col_idx.
  void dump(std::ostream& os) const;
  static RowSparseMatrix load(std::istream& is);

  bool operator==(const RowSparseMatrix&) const = default;

  friend RowSparseMatrix compress(const Matrix& w, const SparsityMask& mask);

 private:
  void validate() const;

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t k_ = 0;
  bool ragged_ = false;
  std::vector<std::size_t> offsets_{0};
  std::vector<std::uint32_t> col_idx_;
  std::vector<float> values_;
};

inline constexpr std::uint32_t kRaggedMarker = 0xFFFFFFFFu;

RowSparseMatrix compress(const Matrix& w, const SparsityMask& mask);

/// ws · x with exactly row_count(r) multiply-adds per output entry. Accumulation
/// order matches matmul(), so a full-density ws reproduces it bitwise.
Matrix sparse_matmul(const RowSparseMatrix& ws, const Matrix& x);

/// ‖(W − Ŵ) X‖²_F accumulated in double.
double approx_loss(const Matrix& w, const RowSparseMatrix& ws, const Matrix& x);

}  // namespace mumoe
