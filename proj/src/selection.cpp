#include "mumoe/selection.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mumoe/parallel.hpp"

namespace mumoe {

namespace {

// Canonical order: higher score first, lower column first among equal scores.
struct Better {
  std::span<const float> s;
  bool operator()(std::uint32_t a, std::uint32_t b) const {
    return s[a] > s[b] || (s[a] == s[b] && a < b);
  }
};

using RowSelector = void (*)(std::span<const float> row, const SelectionParams& p, SparsityMask& mask,
                             std::size_t r, std::vector<std::uint32_t>& idx, std::vector<float>& buf);

void sort_row(std::span<const float> row, const SelectionParams& p, SparsityMask& mask, std::size_t r,
              std::vector<std::uint32_t>& idx, std::vector<float>&) {
  idx.resize(row.size());
  std::iota(idx.begin(), idx.end(), 0u);
  std::sort(idx.begin(), idx.end(), Better{row});
  for (std::size_t m = 0; m < p.k; ++m) mask.set(r, idx[m]);
}

void heap_row(std::span<const float> row, const SelectionParams& p, SparsityMask& mask, std::size_t r,
              std::vector<std::uint32_t>& heap, std::vector<float>&) {
  // Heap ordered so that the front is the worst survivor under the canonical order.
  const Better better{row};
  heap.clear();
  for (std::uint32_t c = 0; c < p.k; ++c) heap.push_back(c);
  std::make_heap(heap.begin(), heap.end(), better);
  for (std::uint32_t c = static_cast<std::uint32_t>(p.k); c < row.size(); ++c) {
    if (better(c, heap.front())) {
      std::pop_heap(heap.begin(), heap.end(), better);
      heap.back() = c;
      std::push_heap(heap.begin(), heap.end(), better);
    }
  }
  for (auto c : heap) mask.set(r, c);
}

void kth_row(std::span<const float> row, const SelectionParams& p, SparsityMask& mask, std::size_t r,
             std::vector<std::uint32_t>&, std::vector<float>& buf) {
  const std::size_t d = row.size();
  if (p.k_c == 0) {
    for (std::size_t c = 0; c < d; ++c) mask.set(r, c);
    return;
  }
  buf.assign(row.begin(), row.end());
  const float threshold = kth_smallest(buf, p.k_c);
  std::size_t kept = 0;
  for (std::size_t c = 0; c < d; ++c) {
    if (row[c] > threshold) {
      mask.set(r, c);
      ++kept;
    }
  }
  if (p.tie_mode == TieMode::parity) return;
  for (std::size_t c = 0; c < d && kept < p.k; ++c) {
    if (row[c] == threshold) {
      mask.set(r, c);
      ++kept;
    }
  }
}

RowSelector selector_for(Strategy s) {
  switch (s) {
    case Strategy::sort:
      return sort_row;
    case Strategy::heap_topk:
      return heap_row;
    case Strategy::kth_threshold:
      return kth_row;
  }
  throw std::invalid_argument("unknown selection strategy");
}

SparsityMask run_selection(const ScoreMatrix& scores, const SelectionParams& p, bool parallel) {
  if (scores.cols() != p.d) {
    throw ShapeError("selection: params for d=" + std::to_string(p.d) + " applied to " +
                     std::to_string(scores.cols()) + " columns");
  }
  if (p.k < 1 || p.k > p.d) throw std::invalid_argument("selection: k out of range");
  SparsityMask mask(scores.rows(), scores.cols(), p.k, p.tie_mode);
  const RowSelector select_row = selector_for(p.strategy);
  auto body = [&](std::size_t begin, std::size_t end) {
    std::vector<std::uint32_t> idx;
    std::vector<float> buf;
    for (std::size_t r = begin; r < end; ++r) select_row(scores.row(r), p, mask, r, idx, buf);
  };
  // Rows own whole 64-bit words, so concurrent writers never touch the same word.
  if (parallel) {
    parallel_for(scores.rows(), body, 1);
  } else {
    body(0, scores.rows());
  }
  return mask;
}

}  // namespace

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::sort:
      return "sort";
    case Strategy::heap_topk:
      return "heap";
    case Strategy::kth_threshold:
      return "kth";
  }
  return "?";
}

std::string_view to_string(TieMode m) { return m == TieMode::canonical ? "canonical" : "parity"; }

Strategy parse_strategy(std::string_view name) {
  if (name == "sort") return Strategy::sort;
  if (name == "heap" || name == "heap_topk" || name == "topk") return Strategy::heap_topk;
  if (name == "kth" || name == "kth_threshold" || name == "kthvalue") return Strategy::kth_threshold;
  throw std::invalid_argument("unknown selection strategy '" + std::string(name) + "'");
}

TieMode parse_tie_mode(std::string_view name) {
  if (name == "canonical") return TieMode::canonical;
  if (name == "parity") return TieMode::parity;
  throw std::invalid_argument("unknown tie mode '" + std::string(name) + "'");
}

SelectionParams SelectionParams::make(double rho, std::size_t d, Strategy strategy, TieMode tie_mode) {
  if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in (0, 1]");
  if (d == 0) throw std::invalid_argument("row length must be positive");
  SelectionParams p;
  p.rho = rho;
  p.d = d;
  // The epsilon absorbs representation error such as 0.29 * 100 = 28.999999999999996.
  const auto raw = static_cast<std::size_t>(std::floor(rho * static_cast<double>(d) + 1e-9));
  p.k = std::clamp<std::size_t>(raw, 1, d);
  p.k_c = d - p.k;
  p.strategy = strategy;
  p.tie_mode = tie_mode;
  return p;
}

SparsityMask::SparsityMask(std::size_t rows, std::size_t cols, std::size_t k_active_per_row, TieMode mode)
    : rows_(rows),
      cols_(cols),
      words_((cols + 63) / 64),
      k_(k_active_per_row),
      mode_(mode),
      bits_(rows * ((cols + 63) / 64), 0) {}

SparsityMask SparsityMask::full(std::size_t rows, std::size_t cols) {
  SparsityMask m(rows, cols, cols, TieMode::canonical);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m.set(r, c);
  return m;
}

void SparsityMask::clear_row(std::size_t r) {
  std::fill_n(bits_.begin() + static_cast<std::ptrdiff_t>(r * words_), words_, 0);
}

std::size_t SparsityMask::row_count(std::size_t r) const {
  std::size_t n = 0;
  for (std::size_t w = 0; w < words_; ++w) n += static_cast<std::size_t>(std::popcount(bits_[r * words_ + w]));
  return n;
}

std::vector<std::uint32_t> SparsityMask::active_columns(std::size_t r) const {
  std::vector<std::uint32_t> cols;
  for (std::size_t c = 0; c < cols_; ++c)
    if (active(r, c)) cols.push_back(static_cast<std::uint32_t>(c));
  return cols;
}

bool SparsityMask::valid() const {
  for (std::size_t r = 0; r < rows_; ++r) {
    const std::size_t n = row_count(r);
    if (mode_ == TieMode::canonical ? n != k_ : n > k_) return false;
  }
  return true;
}

std::uint64_t SparsityMask::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xffu;
      h *= 0x100000001b3ull;
    }
  };
  mix(rows_);
  mix(cols_);
  mix(k_);
  for (auto w : bits_) mix(w);
  return h;
}

float kth_smallest(std::span<float> values, std::size_t k_c) {
  if (k_c < 1 || k_c > values.size()) throw std::invalid_argument("kth_smallest: rank out of range");
  std::size_t lo = 0;
  std::size_t hi = values.size();  // half-open window containing the target
  std::size_t target = k_c - 1;
  int depth_budget = 2 * static_cast<int>(std::bit_width(values.size()));
  while (hi - lo > 1) {
    if (depth_budget-- <= 0) {
      // Bounded max-heap of the (target+1) smallest seen in the window.
      const std::size_t keep = target - lo + 1;
      std::vector<float> heap(values.begin() + static_cast<std::ptrdiff_t>(lo),
                              values.begin() + static_cast<std::ptrdiff_t>(lo + keep));
      std::make_heap(heap.begin(), heap.end());
      for (std::size_t i = lo + keep; i < hi; ++i) {
        if (values[i] < heap.front()) {
          std::pop_heap(heap.begin(), heap.end());
          heap.back() = values[i];
          std::push_heap(heap.begin(), heap.end());
        }
      }
      return heap.front();
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    float a = values[lo], b = values[mid], c = values[hi - 1];
    if (a > b) std::swap(a, b);
    if (b > c) std::swap(b, c);
    if (a > b) std::swap(a, b);
    const float pivot = b;
    // Dutch-flag partition: [lo, lt) < pivot, [lt, gt) == pivot, [gt, hi) > pivot.
    std::size_t lt = lo, i = lo, gt = hi;
    while (i < gt) {
      if (values[i] < pivot) {
        std::swap(values[lt++], values[i++]);
      } else if (values[i] > pivot) {
        std::swap(values[i], values[--gt]);
      } else {
        ++i;
      }
    }
    if (target < lt) {
      hi = lt;
    } else if (target >= gt) {
      lo = gt;
    } else {
      return pivot;
    }
  }
  return values[lo];
}

SparsityMask select_sort(const ScoreMatrix& scores, const SelectionParams& p) {
  SelectionParams q = p;
  q.strategy = Strategy::sort;
  return run_selection(scores, q, false);
}

SparsityMask select_heap_topk(const ScoreMatrix& scores, const SelectionParams& p) {
  SelectionParams q = p;
  q.strategy = Strategy::heap_topk;
  return run_selection(scores, q, false);
}

SparsityMask select_kth_threshold(const ScoreMatrix& scores, const SelectionParams& p) {
  SelectionParams q = p;
  q.strategy = Strategy::kth_threshold;
  return run_selection(scores, q, false);
}

SparsityMask select_mask(const ScoreMatrix& scores, const SelectionParams& p, bool parallel) {
  return run_selection(scores, p, parallel);
}

}  // namespace mumoe
