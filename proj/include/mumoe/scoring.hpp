#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mumoe/linalg.hpp"

namespace mumoe {

/// Per-weight pruning scores. Same shape as the scored weight matrix; every
/// entry is finite and non-negative.
class ScoreMatrix {
 public:
  ScoreMatrix() = default;
  /// Validates the invariants; throws std::invalid_argument on a negative or non-finite entry.
  explicit ScoreMatrix(Matrix values);

  std::size_t rows() const noexcept { return values_.rows(); }
  std::size_t cols() const noexcept { return values_.cols(); }
  std::span<const float> row(std::size_t r) const { return values_.row(r); }
  float operator()(std::size_t r, std::size_t c) const { return values_(r, c); }
  const Matrix& values() const noexcept { return values_; }

  bool operator==(const ScoreMatrix&) const = default;

 private:
  Matrix values_;
};

/// Damping policy for the Gram matrix used by the SparseGPT score.
struct LambdaPolicy {
  enum class Kind { relative, absolute };
  Kind kind = Kind::relative;
  /// relative: lambda = value * mean(diag(X Xᵀ)); absolute: lambda = value.
  double value = 0.01;
  /// Lower bound applied to relative damping.
  double floor = 1e-8;

  double resolve(const Matrix& x) const;
};

/// Statistics of a layer's input activations X (features x tokens).
struct ActivationStats {
  std::vector<float> feature_norms;  ///< ‖X_{j,:}‖₂ for every input feature j
  std::optional<Matrix> gram;        ///< X Xᵀ + λI, present only for SparseGPT scoring
  std::size_t token_count = 0;
  double lambda_used = 0.0;

  bool operator==(const ActivationStats&) const = default;
};

/// Raised when the damped Gram matrix of a layer cannot be factorized.
class ScoringError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ScoreMatrix magnitude_score(const Matrix& w);

ActivationStats collect_stats(const Matrix& x, bool need_gram, const LambdaPolicy& policy = {});

/// |W_ij| * ‖X_j‖₂.
ScoreMatrix wanda_score(const Matrix& w, const ActivationStats& stats);

/// W_ij² / c_j², c_j the j-th diagonal entry of the lower Cholesky factor of
/// gram⁻¹. `context` names the layer in error messages.
ScoreMatrix sparsegpt_score(const Matrix& w, const ActivationStats& stats,
                            const std::string& context = {});

}  // namespace mumoe
