#pragma once

// Independent reference implementations used to check the production code.
// Everything here is written in the most literal style possible (scalar
// loops, no shared helpers) so that agreement with the library is evidence
// rather than tautology.

#include <cmath>
#include <cstddef>
#include <vector>

#include "mac/matrix.hpp"

namespace oracle {

// Scalar triple-loop matrix product.
inline mac::Matrix matmul(const mac::Matrix& a, const mac::Matrix& b) {
  mac::Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) {
        s += a(i, k) * b(k, j);
      }
      c(i, j) = s;
    }
  }
  return c;
}

// Scalar weighted binary cross-entropy: mean over samples of the weighted
// per-class BCE, probabilities clipped to [clip, 1-clip] before the logs.
inline double weighted_bce(const mac::Matrix& pred, const mac::Matrix& labels,
                           const std::vector<double>& weights, double clip) {
  double total = 0.0;
  for (std::size_t s = 0; s < pred.rows; ++s) {
    double sample_loss = 0.0;
    for (std::size_t c = 0; c < pred.cols; ++c) {
      double p = pred(s, c);
      if (p < clip) p = clip;
      if (p > 1.0 - clip) p = 1.0 - clip;
      const double y = labels(s, c);
      sample_loss += weights[c] * (-y * std::log(p) - (1.0 - y) * std::log(1.0 - p));
    }
    total += sample_loss;
  }
  return total / static_cast<double>(pred.rows);
}

// Step-by-step scalar Adam reference with bias correction.
struct AdamScalar {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double m = 0.0;
  double v = 0.0;
  std::uint64_t t = 0;

  double step(double param, double grad) {
    t += 1;
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad * grad;
    const double m_hat = m / (1.0 - std::pow(beta1, static_cast<double>(t)));
    const double v_hat = v / (1.0 - std::pow(beta2, static_cast<double>(t)));
    return param - lr * m_hat / (std::sqrt(v_hat) + epsilon);
  }
};

inline double rel_error(double a, double b) {
  const double denom = std::max(std::fabs(a), std::fabs(b));
  if (denom == 0.0) return 0.0;
  return std::fabs(a - b) / denom;
}

inline double max_abs_diff(const mac::Matrix& a, const mac::Matrix& b) {
  double m = 0.0;
  for (std::size_t t = 0; t < a.data.size(); ++t) {
    m = std::max(m, std::fabs(a.data[t] - b.data[t]));
  }
  return m;
}

inline double max_rel_diff(const mac::Matrix& a, const mac::Matrix& b) {
  double m = 0.0;
  for (std::size_t t = 0; t < a.data.size(); ++t) {
    m = std::max(m, rel_error(a.data[t], b.data[t]));
  }
  return m;
}

// Largest deviation relative to the magnitude of the reference matrix.
// Near-zero elements are compared at matrix scale instead of their own.
inline double max_scaled_diff(const mac::Matrix& a, const mac::Matrix& b) {
  double scale = 0.0;
  for (double v : b.data) scale = std::max(scale, std::fabs(v));
  if (scale == 0.0) scale = 1.0;
  return max_abs_diff(a, b) / scale;
}

}  // namespace oracle
