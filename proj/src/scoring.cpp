#include "mumoe/scoring.hpp"

#include <algorithm>
#include <cmath>

namespace mumoe {

ScoreMatrix::ScoreMatrix(Matrix values) : values_(std::move(values)) {
  for (float v : values_.data()) {
    if (!std::isfinite(v) || v < 0.0f) {
      throw std::invalid_argument("score matrix entries must be finite and non-negative");
    }
  }
}

double LambdaPolicy::resolve(const Matrix& x) const {
  if (kind == Kind::absolute) {
    if (value < 0.0) throw std::invalid_argument("absolute damping must be non-negative");
    return value;
  }
  if (x.rows() == 0) return floor;
  double trace = 0.0;
  for (float v : x.data()) trace += static_cast<double>(v) * v;
  return std::max(value * trace / static_cast<double>(x.rows()), floor);
}

ScoreMatrix magnitude_score(const Matrix& w) {
  Matrix s(w.rows(), w.cols());
  auto out = s.data();
  auto in = w.data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::fabs(in[i]);
  return ScoreMatrix(std::move(s));
}

ActivationStats collect_stats(const Matrix& x, bool need_gram, const LambdaPolicy& policy) {
  if (x.cols() == 0) throw std::invalid_argument("collect_stats: no tokens");
  ActivationStats stats;
  stats.feature_norms = row_l2_norms(x);
  stats.token_count = x.cols();
  if (need_gram) {
    stats.lambda_used = policy.resolve(x);
    stats.gram = gram(x, stats.lambda_used);
  }
  return stats;
}

ScoreMatrix wanda_score(const Matrix& w, const ActivationStats& stats) {
  if (stats.feature_norms.size() != w.cols()) {
    throw ShapeError("wanda_score: " + std::to_string(stats.feature_norms.size()) +
                     " feature norms for weight " + shape_string(w));
  }
  Matrix s(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const auto wr = w.row(i);
    auto sr = s.row(i);
    for (std::size_t j = 0; j < w.cols(); ++j) sr[j] = std::fabs(wr[j]) * stats.feature_norms[j];
  }
  return ScoreMatrix(std::move(s));
}

ScoreMatrix sparsegpt_score(const Matrix& w, const ActivationStats& stats,
                            const std::string& context) {
  if (!stats.gram) throw std::invalid_argument("sparsegpt_score: activation stats carry no gram matrix");
  const Matrix& g = *stats.gram;
  if (g.rows() != w.cols()) {
    throw ShapeError("sparsegpt_score: gram " + shape_string(g) + " for weight " + shape_string(w));
  }
  std::vector<double> inv_diag_sq(w.cols());
  try {
    const LowerTriangular factor = cholesky(spd_inverse(g));
    for (std::size_t j = 0; j < w.cols(); ++j) {
      const double c = factor.diag(j);
      inv_diag_sq[j] = 1.0 / (c * c);
    }
  } catch (const NotPositiveDefinite& e) {
    throw ScoringError((context.empty() ? std::string("sparsegpt_score") : context) + ": " + e.what() +
                       " (lambda " + std::to_string(stats.lambda_used) + ")");
  }
  Matrix s(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const auto wr = w.row(i);
    auto sr = s.row(i);
    for (std::size_t j = 0; j < w.cols(); ++j) {
      const double v = wr[j];
      sr[j] = static_cast<float>(v * v * inv_diag_sq[j]);
    }
  }
  return ScoreMatrix(std::move(s));
}

}  // namespace mumoe
