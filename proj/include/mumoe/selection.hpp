#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mumoe/scoring.hpp"

namespace mumoe {

enum class Strategy { sort, heap_topk, kth_threshold };

/// canonical: exactly k survivors per row, ties resolved toward the lower column.
/// parity: survivors are the entries strictly above the k_c-th smallest score,
/// which can leave fewer than k under ties.
enum class TieMode { canonical, parity };

std::string_view to_string(Strategy s);
std::string_view to_string(TieMode m);
Strategy parse_strategy(std::string_view name);
TieMode parse_tie_mode(std::string_view name);

/// Active-count arithmetic for one row length d.
struct SelectionParams {
  double rho = 1.0;
  std::size_t d = 0;
  std::size_t k = 0;    ///< active per row, floor(rho * d) clamped to [1, d]
  std::size_t k_c = 0;  ///< pruned per row, d - k
  Strategy strategy = Strategy::kth_threshold;
  TieMode tie_mode = TieMode::canonical;

  static SelectionParams make(double rho, std::size_t d, Strategy strategy = Strategy::kth_threshold,
                              TieMode tie_mode = TieMode::canonical);
};

/// Per-row bitset of active weights.
class SparsityMask {
 public:
  SparsityMask() = default;
  SparsityMask(std::size_t rows, std::size_t cols, std::size_t k_active_per_row, TieMode mode);

  static SparsityMask full(std::size_t rows, std::size_t cols);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t k_active_per_row() const noexcept { return k_; }
  TieMode tie_mode() const noexcept { return mode_; }

  bool active(std::size_t r, std::size_t c) const {
    return (bits_[r * words_ + c / 64] >> (c % 64)) & 1u;
  }
  void set(std::size_t r, std::size_t c) { bits_[r * words_ + c / 64] |= std::uint64_t{1} << (c % 64); }
  void clear_row(std::size_t r);

  std::size_t row_count(std::size_t r) const;
  std::vector<std::uint32_t> active_columns(std::size_t r) const;

  /// Checks the cardinality invariant of the mask's tie mode.
  bool valid() const;
  /// FNV-1a over the shape and bit pattern.
  std::uint64_t hash() const;

  bool operator==(const SparsityMask&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t words_ = 0;
  std::size_t k_ = 0;
  TieMode mode_ = TieMode::canonical;
  std::vector<std::uint64_t> bits_;
};

/// k_c-th smallest value (1-based) of `values`, reordering the buffer in place.
/// Three-way quickselect with a median-of-three pivot; falls back to a bounded
/// heap scan when the recursion depth exceeds 2·log2(n).
float kth_smallest(std::span<float> values, std::size_t k_c);

SparsityMask select_sort(const ScoreMatrix& scores, const SelectionParams& p);
SparsityMask select_heap_topk(const ScoreMatrix& scores, const SelectionParams& p);
SparsityMask select_kth_threshold(const ScoreMatrix& scores, const SelectionParams& p);

/// Dispatches on p.strategy. Rows are split across MUMOE_THREADS workers when `parallel` is set.
SparsityMask select_mask(const ScoreMatrix& scores, const SelectionParams& p, bool parallel = false);

}  // namespace mumoe
