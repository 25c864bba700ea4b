#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mumoe/selection.hpp"

namespace mumoe {

/// A strategy under test; `parallel` times row-parallel selection as its own variant.
struct BenchStrategy {
  Strategy strategy = Strategy::kth_threshold;
  bool parallel = false;

  std::string name() const;
  static BenchStrategy parse(std::string_view name);  ///< "sort", "heap", "kth", optionally suffixed "_par"
  bool operator==(const BenchStrategy&) const = default;
};

struct BenchSpec {
  std::vector<std::size_t> d_values{256, 1024, 4096};
  std::vector<std::size_t> d_prime_values{256};
  std::vector<double> rhos{0.25, 0.5, 0.75};
  std::vector<BenchStrategy> strategies{{Strategy::sort, false}, {Strategy::heap_topk, false},
                                        {Strategy::kth_threshold, false}};
  std::size_t repetitions = 5;
  std::size_t warmup = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct BenchRow {
  std::string strategy;
  std::size_t d = 0;
  std::size_t d_prime = 0;
  double rho = 0.0;
  double mean_ns = 0.0;
  double std_ns = 0.0;
  std::size_t reps = 0;
};

/// Raised when strategies disagree on a cell's mask; no timing is reported for it.
class BenchGateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministic score matrix for one cell.
ScoreMatrix bench_scores(std::size_t d_prime, std::size_t d, double rho, std::uint64_t seed);

/// Times mask construction only. Every cell first checks that all strategies
/// produce the same canonical mask on the shared input.
std::vector<BenchRow> run_bench(const BenchSpec& spec);

void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows);

/// (max − min) / min of kth-threshold mean time across ρ, per (d, d′). Informational.
std::map<std::pair<std::size_t, std::size_t>, double> kth_rho_spread(const std::vector<BenchRow>& rows);

}  // namespace mumoe
