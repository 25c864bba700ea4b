#include "mumoe/shift.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

namespace mumoe {

namespace {

constexpr double kHalfPi = 1.57079632679489661923;

// Right-multiplies the row-major orthogonal matrix q (double) by a rotation in plane (a, b).
void givens(std::vector<double>& q, std::size_t d, std::size_t a, std::size_t b, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  for (std::size_t r = 0; r < d; ++r) {
    const double x = q[r * d + a];
    const double y = q[r * d + b];
    q[r * d + a] = c * x - s * y;
    q[r * d + b] = s * x + c * y;
  }
}

RowSparseMatrix wanda_prune(const Matrix& w, const Matrix& calib, const SelectionParams& p) {
  return compress(w, select_mask(wanda_score(w, collect_stats(calib, false)), p));
}

std::span<const TokenId> window_at(std::span<const TokenId> src, std::size_t len, std::mt19937_64& rng) {
  if (src.size() < len) throw std::invalid_argument("shift_experiment: token source shorter than the prompt length");
  std::uniform_int_distribution<std::size_t> pick(0, src.size() - len);
  return src.subspan(pick(rng), len);
}

}  // namespace

Matrix AnisotropicDomain::sample(std::size_t tokens, std::mt19937_64& rng) const {
  const std::size_t d = dim();
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> z(d);
  Matrix x(d, tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t j = 0; j < d; ++j) z[j] = stddevs[j] * normal(rng);
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0.0;
      const auto br = basis.row(i);
      for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(br[j]) * z[j];
      x(i, t) = static_cast<float>(s);
    }
  }
  return x;
}

double AnisotropicDomain::condition_number() const {
  const auto [lo, hi] = std::minmax_element(stddevs.begin(), stddevs.end());
  return (*hi * *hi) / (*lo * *lo);
}

AnisotropicDomain make_domain(std::size_t d, double condition, bool swap_axes, double mix_angle,
                              std::mt19937_64& rng) {
  if (d < 2) throw std::invalid_argument("make_domain: need at least two features");
  if (condition < 1.0) throw std::invalid_argument("make_domain: condition number must be >= 1");
  std::vector<double> q(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) q[i * d + i] = 1.0;
  if (swap_axes) {
    for (std::size_t j = 0; j < d / 2; ++j) givens(q, d, j, d - 1 - j, kHalfPi);
  }
  std::uniform_int_distribution<std::size_t> axis(0, d - 1);
  std::uniform_real_distribution<double> angle(-mix_angle, mix_angle);
  for (std::size_t n = 0; n < d; ++n) {
    std::size_t a = axis(rng);
    std::size_t b = axis(rng);
    if (a == b) b = (a + 1) % d;
    givens(q, d, a, b, angle(rng));
  }
  AnisotropicDomain dom;
  dom.basis = Matrix(d, d);
  for (std::size_t i = 0; i < d * d; ++i) dom.basis.data()[i] = static_cast<float>(q[i]);
  dom.stddevs.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    const double frac = static_cast<double>(j) / static_cast<double>(d - 1);
    dom.stddevs[j] = std::sqrt(std::pow(condition, frac));
  }
  return dom;
}

std::vector<ShiftLosses> synthetic_shift_experiment(const SyntheticShiftSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  const auto params = SelectionParams::make(spec.rho, spec.d, spec.strategy);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::vector<ShiftLosses> out;
  out.reserve(spec.trials);
  for (std::size_t trial = 0; trial < spec.trials; ++trial) {
    const AnisotropicDomain dom_a = make_domain(spec.d, spec.condition, false, spec.mix_angle, rng);
    const AnisotropicDomain dom_b = make_domain(spec.d, spec.condition, true, spec.mix_angle, rng);
    Matrix w(spec.d_out, spec.d);
    for (float& v : w.data()) v = normal(rng);
    const Matrix calib_a = dom_a.sample(spec.calib_tokens, rng);
    const Matrix calib_b = dom_b.sample(spec.calib_tokens, rng);
    const Matrix test = dom_b.sample(spec.test_tokens, rng);

    ShiftLosses row;
    row.online = approx_loss(w, wanda_prune(w, test, params), test);
    row.offline_matched = approx_loss(w, wanda_prune(w, calib_b, params), test);
    row.offline_mismatched = approx_loss(w, wanda_prune(w, calib_a, params), test);
    row.magnitude = approx_loss(w, compress(w, select_mask(magnitude_score(w), params)), test);
    out.push_back(row);
  }
  return out;
}

std::vector<ShiftRow> to_rows(const std::vector<ShiftLosses>& trials, double rho) {
  std::vector<ShiftRow> rows;
  for (std::size_t t = 0; t < trials.size(); ++t) {
    const auto& l = trials[t];
    rows.push_back({t, "synthetic", "wanda", "online", "B", rho, l.online});
    rows.push_back({t, "synthetic", "wanda", "B", "B", rho, l.offline_matched});
    rows.push_back({t, "synthetic", "wanda", "A", "B", rho, l.offline_mismatched});
    rows.push_back({t, "synthetic", "magnitude", "none", "B", rho, l.magnitude});
  }
  return rows;
}

std::vector<ShiftRow> shift_experiment(std::shared_ptr<const Model> model, std::span<const TokenId> domain_a,
                                       std::span<const TokenId> domain_b, const PruneConfig& cfg,
                                       std::size_t trials, std::size_t prompt_len, std::uint64_t seed) {
  if (prompt_len == 0) throw std::invalid_argument("shift_experiment: prompt length must be positive");
  const std::size_t half = domain_b.size() / 2;
  const auto b_calib = domain_b.subspan(0, half);
  const auto b_test = domain_b.subspan(half);
  PruneConfig offline = cfg;
  offline.mode = Mode::offline;
  PruneConfig online = cfg;
  online.mode = Mode::online;

  std::mt19937_64 rng(seed);
  std::vector<ShiftRow> rows;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const auto calib_a = window_at(domain_a, prompt_len, rng);
    const auto calib_b = window_at(b_calib, prompt_len, rng);
    const auto test = window_at(b_test, prompt_len, rng);

    auto record_losses = [&](const PrunedModel& pm, const char* calib_domain) {
      pm.forward(test, [&](LayerId id, const Matrix& w, const RowSparseMatrix* pruned, const Matrix& x) {
        if (!pruned) return;
        rows.push_back({trial, id.name(), std::string(to_string(cfg.method)), calib_domain, "B", cfg.rho,
                        approx_loss(w, *pruned, x)});
      });
    };
    record_losses(prune_offline(model, calibrate_offline(*model, calib_a, offline, "A"), offline), "A");
    record_losses(prune_offline(model, calibrate_offline(*model, calib_b, offline, "B"), offline), "B");
    record_losses(prune_online(model, test, online).model, "online");
  }
  return rows;
}

void write_shift_csv(std::ostream& os, const std::vector<ShiftRow>& rows) {
  os << "trial,layer,method,calib_domain,test_domain,rho,loss\n";
  const auto old = os.precision(17);
  for (const auto& r : rows) {
    os << r.trial << ',' << r.layer << ',' << r.method << ',' << r.calib_domain << ',' << r.test_domain << ','
       << r.rho << ',' << r.loss << '\n';
  }
  os.precision(old);
}

}  // namespace mumoe
