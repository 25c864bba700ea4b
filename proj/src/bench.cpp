#include "mumoe/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <random>

namespace mumoe {

std::string BenchStrategy::name() const {
  return std::string(to_string(strategy)) + (parallel ? "_par" : "");
}

BenchStrategy BenchStrategy::parse(std::string_view name) {
  BenchStrategy s;
  constexpr std::string_view suffix = "_par";
  if (name.size() > suffix.size() && name.substr(name.size() - suffix.size()) == suffix) {
    s.parallel = true;
    name.remove_suffix(suffix.size());
  }
  s.strategy = parse_strategy(name);
  return s;
}

void BenchSpec::validate() const {
  if (repetitions < 3) throw std::invalid_argument("bench: repetitions must be at least 3");
  if (strategies.empty()) throw std::invalid_argument("bench: no strategies given");
  if (d_values.empty() || d_prime_values.empty() || rhos.empty()) {
    throw std::invalid_argument("bench: empty sweep");
  }
  for (auto d : d_values)
    if (d == 0) throw std::invalid_argument("bench: d must be positive");
  for (auto d : d_prime_values)
    if (d == 0) throw std::invalid_argument("bench: d' must be positive");
  for (double r : rhos)
    if (!(r > 0.0 && r <= 1.0)) throw std::invalid_argument("bench: rho must lie in (0, 1]");
}

ScoreMatrix bench_scores(std::size_t d_prime, std::size_t d, double rho, std::uint64_t seed) {
  // Cell-specific stream so that reordering the sweep does not change inputs.
  std::seed_seq seq{seed, static_cast<std::uint64_t>(d_prime), static_cast<std::uint64_t>(d),
                    static_cast<std::uint64_t>(std::llround(rho * 1e6))};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  Matrix m(d_prime, d);
  for (float& v : m.data()) v = dist(rng);
  return ScoreMatrix(std::move(m));
}

std::vector<BenchRow> run_bench(const BenchSpec& spec) {
  spec.validate();
  using clock = std::chrono::steady_clock;
  std::vector<BenchRow> rows;
  for (std::size_t d : spec.d_values) {
    for (std::size_t dp : spec.d_prime_values) {
      for (double rho : spec.rhos) {
        const ScoreMatrix scores = bench_scores(dp, d, rho, spec.seed);
        SelectionParams p = SelectionParams::make(rho, d);

        std::vector<SparsityMask> masks;
        for (const auto& s : spec.strategies) {
          p.strategy = s.strategy;
          masks.push_back(select_mask(scores, p, s.parallel));
        }
        for (std::size_t i = 1; i < masks.size(); ++i) {
          if (!(masks[i] == masks[0])) {
            throw BenchGateError("mask mismatch between " + spec.strategies[0].name() + " and " +
                                 spec.strategies[i].name() + " at d=" + std::to_string(d) +
                                 " d'=" + std::to_string(dp) + " rho=" + std::to_string(rho));
          }
        }

        for (const auto& s : spec.strategies) {
          p.strategy = s.strategy;
          for (std::size_t w = 0; w < spec.warmup; ++w) (void)select_mask(scores, p, s.parallel);
          std::vector<double> samples;
          samples.reserve(spec.repetitions);
          for (std::size_t r = 0; r < spec.repetitions; ++r) {
            const auto t0 = clock::now();
            const SparsityMask m = select_mask(scores, p, s.parallel);
            const auto t1 = clock::now();
            if (m.rows() != dp) throw BenchGateError("unexpected mask shape");
            samples.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
          }
          double mean = 0.0;
          for (double x : samples) mean += x;
          mean /= static_cast<double>(samples.size());
          double var = 0.0;
          for (double x : samples) var += (x - mean) * (x - mean);
          var /= static_cast<double>(samples.size() - 1);
          rows.push_back({s.name(), d, dp, rho, mean, std::sqrt(var), spec.repetitions});
        }
      }
    }
  }
  return rows;
}

void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "strategy,d,d_prime,rho,mean_ns,std_ns,reps\n";
  for (const auto& r : rows) {
    os << r.strategy << ',' << r.d << ',' << r.d_prime << ',' << r.rho << ',' << r.mean_ns << ',' << r.std_ns << ','
       << r.reps << '\n';
  }
}

std::map<std::pair<std::size_t, std::size_t>, double> kth_rho_spread(const std::vector<BenchRow>& rows) {
  std::map<std::pair<std::size_t, std::size_t>, std::pair<double, double>> range;
  for (const auto& r : rows) {
    if (r.strategy != "kth") continue;
    auto [it, inserted] = range.try_emplace({r.d, r.d_prime}, r.mean_ns, r.mean_ns);
    if (!inserted) {
      it->second.first = std::min(it->second.first, r.mean_ns);
      it->second.second = std::max(it->second.second, r.mean_ns);
    }
  }
  std::map<std::pair<std::size_t, std::size_t>, double> spread;
  for (const auto& [key, mm] : range) spread[key] = mm.first > 0.0 ? (mm.second - mm.first) / mm.first : 0.0;
  return spread;
}

}  // namespace mumoe
