#include "mumoe/metrics.hpp"

#include <ostream>
#include <stdexcept>

#include "json.hpp"
#include "mumoe/selection.hpp"

namespace mumoe {

namespace {

// Per-element FLOP charges for the non-linear parts of a block.
constexpr std::uint64_t kLayerNormFlops = 8;  // mean, centre, square-accumulate, scale, gain, bias
constexpr std::uint64_t kSoftmaxFlops = 4;    // scale, exp, sum, divide per attention score

nlohmann::json breakdown_json(const CostBreakdown& c) {
  return {{"dense_linear", c.dense_linear},   {"sparse_linear", c.sparse_linear},
          {"prune_norm", c.prune_norm},       {"prune_score", c.prune_score},
          {"prune_select", c.prune_select},   {"prune_compare", c.prune_compare},
          {"attention", c.attention},         {"other", c.other},
          {"prune_overhead", c.prune_overhead()}, {"total", c.total()}};
}

void csv_row(std::ostream& os, const std::string& scope, const char* metric, const CostBreakdown& c) {
  os << scope << ',' << metric << ',' << c.dense_linear << ',' << c.sparse_linear << ',' << c.prune_norm << ','
     << c.prune_score << ',' << c.prune_select << ',' << c.prune_compare << ',' << c.attention << ',' << c.other
     << ',' << c.total() << '\n';
}

LayerCost linear_cost(LayerId id, std::uint64_t d_in, std::uint64_t d_out, std::uint64_t tokens, double rho,
                      bool pruned) {
  LayerCost lc;
  lc.name = id.name();
  lc.prunable = pruned;
  if (!pruned) {
    lc.macs.dense_linear = d_in * d_out * tokens;
    lc.flops.dense_linear = 2 * lc.macs.dense_linear;
    return lc;
  }
  const std::uint64_t k = SelectionParams::make(rho, d_in).k;
  lc.macs.sparse_linear = k * d_out * tokens;
  lc.flops.sparse_linear = 2 * lc.macs.sparse_linear;
  lc.macs.prune_norm = d_in * tokens;
  lc.flops.prune_norm = 2 * d_in * tokens;
  lc.macs.prune_score = d_in * d_out;
  lc.flops.prune_score = d_in * d_out;
  lc.flops.prune_select = d_in * d_out;
  lc.flops.prune_compare = d_in * d_out;
  return lc;
}

}  // namespace

double complexity_ratio(double rho, std::uint64_t tokens, std::uint64_t d_prime) {
  if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("complexity_ratio: rho must lie in (0, 1]");
  if (tokens == 0 || d_prime == 0) throw std::invalid_argument("complexity_ratio: T and d' must be positive");
  return rho + 3.0 / static_cast<double>(tokens) + 1.0 / static_cast<double>(d_prime);
}

std::string_view to_string(CostMode m) { return m == CostMode::dense ? "dense" : "mu_moe"; }

CostMode parse_cost_mode(std::string_view name) {
  if (name == "dense") return CostMode::dense;
  if (name == "mu_moe" || name == "mumoe" || name == "online") return CostMode::mu_moe;
  throw std::invalid_argument("unknown cost mode '" + std::string(name) + "'");
}

CostBreakdown& CostBreakdown::operator+=(const CostBreakdown& o) {
  dense_linear += o.dense_linear;
  sparse_linear += o.sparse_linear;
  prune_norm += o.prune_norm;
  prune_score += o.prune_score;
  prune_select += o.prune_select;
  prune_compare += o.prune_compare;
  attention += o.attention;
  other += o.other;
  return *this;
}

std::uint64_t FlopReport::prunable_macs() const {
  std::uint64_t total = 0;
  for (const auto& l : layers)
    if (l.prunable) total += l.macs.total();
  return total;
}

FlopReport count_costs(const ModelConfig& config, double rho, std::uint64_t tokens, CostMode mode,
                       const LayerFilter& filter) {
  config.validate();
  if (tokens == 0) throw std::invalid_argument("count_costs: token count must be positive");
  if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("count_costs: rho must lie in (0, 1]");
  const std::uint64_t T = tokens;
  const std::uint64_t d = config.hidden;
  const std::uint64_t di = config.ffn_dim;
  const std::uint64_t h = config.n_heads;

  FlopReport r;
  r.mode = mode;
  r.rho = rho;
  r.tokens = tokens;

  LayerCost embed;
  embed.name = "embedding";
  embed.flops.other = d * T;
  r.layers.push_back(embed);

  for (std::uint32_t b = 0; b < config.n_layers; ++b) {
    auto add_linear = [&](LinearKind kind, std::uint64_t d_in, std::uint64_t d_out) {
      const LayerId id{b, kind};
      const bool pruned = mode == CostMode::mu_moe && filter.contains(id);
      r.layers.push_back(linear_cost(id, d_in, d_out, T, rho, pruned));
    };
    add_linear(LinearKind::q, d, d);
    add_linear(LinearKind::k, d, d);
    add_linear(LinearKind::v, d, d);

    LayerCost att;
    att.name = std::to_string(b) + ".attention";
    att.macs.attention = 2 * T * T * d;  // QKᵀ and PV over all heads, full T x T
    att.flops.attention = 2 * att.macs.attention;
    r.layers.push_back(att);

    add_linear(LinearKind::o, d, d);
    add_linear(LinearKind::up, d, di);
    add_linear(LinearKind::down, di, d);

    LayerCost other;
    other.name = std::to_string(b) + ".other";
    other.flops.other = 2 * kLayerNormFlops * d * T  // two layer norms
                        + kSoftmaxFlops * h * T * T  // softmax
                        + 2 * d * T                  // residual adds
                        + di * T;                    // ReLU
    r.layers.push_back(other);
  }

  LayerCost final_norm;
  final_norm.name = "final_norm";
  final_norm.flops.other = kLayerNormFlops * d * T;
  r.layers.push_back(final_norm);

  LayerCost head;
  head.name = "head";
  head.macs.dense_linear = static_cast<std::uint64_t>(config.vocab) * d * T;
  head.flops.dense_linear = 2 * head.macs.dense_linear;
  r.layers.push_back(head);

  for (const auto& l : r.layers) {
    r.flops += l.flops;
    r.macs += l.macs;
  }
  return r;
}

std::string FlopReport::to_json() const {
  nlohmann::json layers_json = nlohmann::json::array();
  for (const auto& l : layers) {
    layers_json.push_back(
        {{"name", l.name}, {"prunable", l.prunable}, {"flops", breakdown_json(l.flops)}, {"macs", breakdown_json(l.macs)}});
  }
  nlohmann::json j = {{"mode", std::string(to_string(mode))},
                      {"rho", rho},
                      {"tokens", tokens},
                      {"flops", breakdown_json(flops)},
                      {"macs", breakdown_json(macs)},
                      {"prunable_macs", prunable_macs()},
                      {"layers", layers_json}};
  return j.dump(2);
}

void FlopReport::write_csv(std::ostream& os) const {
  os << "scope,metric,dense_linear,sparse_linear,prune_norm,prune_score,prune_select,prune_compare,attention,other,"
        "total\n";
  for (const auto& l : layers) {
    csv_row(os, l.name, "flops", l.flops);
    csv_row(os, l.name, "macs", l.macs);
  }
  csv_row(os, "total", "flops", flops);
  csv_row(os, "total", "macs", macs);
}

}  // namespace mumoe
