#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "mumoe/model.hpp"
#include "mumoe/pruner.hpp"

namespace mumoe {

/// Online pruning cost relative to a dense linear layer:
/// (3·d·d′ + d·T + ρ·d·d′·T) / (d·d′·T) = ρ + 3/T + 1/d′.
double complexity_ratio(double rho, std::uint64_t tokens, std::uint64_t d_prime);

enum class CostMode { dense, mu_moe };

std::string_view to_string(CostMode m);
CostMode parse_cost_mode(std::string_view name);

/// Operation counts by category. A multiply-add is 1 MAC and 2 FLOPs; a bare
/// multiply is 1 MAC and 1 FLOP; a comparison is 1 FLOP and no MAC.
struct CostBreakdown {
  std::uint64_t dense_linear = 0;
  std::uint64_t sparse_linear = 0;
  std::uint64_t prune_norm = 0;
  std::uint64_t prune_score = 0;
  std::uint64_t prune_select = 0;
  std::uint64_t prune_compare = 0;
  std::uint64_t attention = 0;
  std::uint64_t other = 0;

  std::uint64_t prune_overhead() const { return prune_norm + prune_score + prune_select + prune_compare; }
  std::uint64_t total() const {
    return dense_linear + sparse_linear + prune_overhead() + attention + other;
  }
  CostBreakdown& operator+=(const CostBreakdown& o);
  bool operator==(const CostBreakdown&) const = default;
};

struct LayerCost {
  std::string name;        ///< "0.q", "0.attention", "0.other", "head", "embedding", "final_norm"
  bool prunable = false;   ///< one of the six block linears selected by the filter
  CostBreakdown flops;
  CostBreakdown macs;
};

struct FlopReport {
  CostMode mode = CostMode::dense;
  double rho = 1.0;
  std::uint64_t tokens = 0;
  std::vector<LayerCost> layers;
  CostBreakdown flops;  ///< sum over layers
  CostBreakdown macs;

  std::uint64_t total_flops() const { return flops.total(); }
  std::uint64_t total_macs() const { return macs.total(); }
  /// MACs of the prunable linears, including pruning overhead.
  std::uint64_t prunable_macs() const;

  std::string to_json() const;
  /// Columns: scope, metric, dense_linear, sparse_linear, prune_norm,
  /// prune_score, prune_select, prune_compare, attention, other, total.
  void write_csv(std::ostream& os) const;
};

/// Analytical cost of one forward pass over `tokens` tokens. Attention and the
/// remaining non-linear work are charged identically in both modes; μ-MoE mode
/// replaces each filtered linear's d·d′·T MACs by k·d′·T (k = floor(ρ·d) per
/// row) plus norm, score, selection and compare overhead.
FlopReport count_costs(const ModelConfig& config, double rho, std::uint64_t tokens, CostMode mode,
                       const LayerFilter& filter = {});

}  // namespace mumoe
