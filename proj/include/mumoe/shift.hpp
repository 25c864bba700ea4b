#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mumoe/pruner.hpp"

namespace mumoe {

/// Zero-mean Gaussian activations with covariance basis · diag(stddev²) · basisᵀ.
struct AnisotropicDomain {
  Matrix basis;  ///< d x d orthogonal
  std::vector<double> stddevs;

  std::size_t dim() const noexcept { return stddevs.size(); }
  /// d x tokens sample.
  Matrix sample(std::size_t tokens, std::mt19937_64& rng) const;
  double condition_number() const;
};

/// Variances log-spaced over [1, condition] along the axes of a rotated basis.
/// With `swap_axes` the rotation first turns axis j onto axis d-1-j (90° in
/// each plane), which hands the high-variance directions to the features that
/// were quiet before. `mix_angle` adds small random Givens rotations on top.
AnisotropicDomain make_domain(std::size_t d, double condition, bool swap_axes, double mix_angle,
                              std::mt19937_64& rng);

struct SyntheticShiftSpec {
  std::size_t d = 64;
  std::size_t d_out = 32;
  std::size_t calib_tokens = 128;
  std::size_t test_tokens = 64;
  std::size_t trials = 200;
  double rho = 0.5;
  double condition = 100.0;
  double mix_angle = 0.3;
  Strategy strategy = Strategy::kth_threshold;
  std::uint64_t seed = 0;
};

/// Loss on a domain-B test prompt for each way of choosing the mask.
struct ShiftLosses {
  double online = 0.0;              ///< wanda, calibrated on the test prompt itself
  double offline_matched = 0.0;     ///< wanda, calibrated on separate domain-B tokens
  double offline_mismatched = 0.0;  ///< wanda, calibrated on domain-A tokens
  double magnitude = 0.0;
};

std::vector<ShiftLosses> synthetic_shift_experiment(const SyntheticShiftSpec& spec);

/// One CSV row: trial, layer, method, calib_domain, test_domain, rho, loss.
struct ShiftRow {
  std::size_t trial = 0;
  std::string layer;
  std::string method;
  std::string calib_domain;
  std::string test_domain;
  double rho = 0.0;
  double loss = 0.0;
};

std::vector<ShiftRow> to_rows(const std::vector<ShiftLosses>& trials, double rho);

/// Model-level experiment. Each trial draws a test prompt from the second half
/// of domain B and calibration windows from domain A and from the first half of
/// domain B, then records every pruned layer's loss on the test prompt under
/// offline-A, offline-B and online masks.
std::vector<ShiftRow> shift_experiment(std::shared_ptr<const Model> model, std::span<const TokenId> domain_a,
                                       std::span<const TokenId> domain_b, const PruneConfig& cfg,
                                       std::size_t trials, std::size_t prompt_len, std::uint64_t seed);

void write_shift_csv(std::ostream& os, const std::vector<ShiftRow>& rows);

}  // namespace mumoe
