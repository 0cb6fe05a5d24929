#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mac/error.hpp"
#include "mac/matrix.hpp"

namespace mac {

// Probabilities are clipped to [kProbClip, 1 - kProbClip] before any log or
// reciprocal; the clip acts as a stop-gradient.
inline constexpr double kProbClip = 1e-7;

struct ClassWeighting {
  std::vector<double> weights;  // normalized, sums to 1
  std::optional<std::size_t> any_index;

  static ClassWeighting uniform(std::size_t num_classes) {
    if (num_classes == 0) throw ConfigError("ClassWeighting: need at least one class");
    ClassWeighting w;
    w.weights.assign(num_classes, 1.0 / static_cast<double>(num_classes));
    return w;
  }

  // The "any" class counts twice as much as each of the others.
  static ClassWeighting any_doubled(std::size_t num_classes, std::size_t any_index) {
    std::vector<double> raw(num_classes, 1.0);
    if (any_index >= num_classes) {
      throw ConfigError("ClassWeighting: any_index " + std::to_string(any_index) +
                        " out of range for " + std::to_string(num_classes) + " classes");
    }
    raw[any_index] = 2.0;
    return from_raw(raw, any_index);
  }

  static ClassWeighting from_raw(const std::vector<double>& raw,
                                 std::optional<std::size_t> any_index = std::nullopt) {
    if (raw.empty()) throw ConfigError("ClassWeighting: need at least one class");
    if (any_index && *any_index >= raw.size()) {
      throw ConfigError("ClassWeighting: any_index out of range");
    }
    double sum = 0.0;
    for (double v : raw) {
      if (!(v >= 0.0)) throw ConfigError("ClassWeighting: weights must be nonnegative");
      sum += v;
    }
    if (sum <= 0.0) throw ConfigError("ClassWeighting: weights sum to zero");
    ClassWeighting w;
    w.any_index = any_index;
    w.weights.reserve(raw.size());
    for (double v : raw) w.weights.push_back(v / sum);
    return w;
  }
};

namespace detail {

inline void check_bce_inputs(const Matrix& pred, const Matrix& labels, const ClassWeighting& w) {
  if (!pred.same_shape(labels)) {
    throw ShapeError("weighted_bce: predictions are " + shape_string(pred) + ", labels are " +
                     shape_string(labels));
  }
  if (pred.rows == 0) throw ShapeError("weighted_bce: empty batch");
  if (w.weights.size() != pred.cols) {
    throw ShapeError("weighted_bce: " + std::to_string(w.weights.size()) + " class weights for " +
                     std::to_string(pred.cols) + " classes");
  }
  for (std::size_t s = 0; s < labels.rows; ++s) {
    for (std::size_t c = 0; c < labels.cols; ++c) {
      const double y = labels(s, c);
      if (y != 0.0 && y != 1.0) {
        throw DomainError("weighted_bce: label at (" + std::to_string(s) + "," +
                          std::to_string(c) + ") is " + std::to_string(y) + ", expected 0 or 1");
      }
      const double p = pred(s, c);
      if (!(p >= 0.0 && p <= 1.0)) {
        throw DomainError("weighted_bce: prediction at (" + std::to_string(s) + "," +
                          std::to_string(c) + ") is outside [0, 1]");
      }
    }
  }
}

}  // namespace detail

// Mean over samples of the class-weighted binary cross-entropy.
inline double weighted_bce(const Matrix& pred, const Matrix& labels, const ClassWeighting& w) {
  detail::check_bce_inputs(pred, labels, w);
  double total = 0.0;
  for (std::size_t s = 0; s < pred.rows; ++s) {
    double sample_loss = 0.0;
    for (std::size_t c = 0; c < pred.cols; ++c) {
      double p = pred(s, c);
      if (p < kProbClip) p = kProbClip;
      if (p > 1.0 - kProbClip) p = 1.0 - kProbClip;
      const double y = labels(s, c);
      sample_loss += w.weights[c] * (-y * std::log(p) - (1.0 - y) * std::log1p(-p));
    }
    total += sample_loss;
  }
  return total / static_cast<double>(pred.rows);
}

// d(weighted_bce)/d(pred). Zero outside the clip region, the clipped-value
// formula on its boundary.
inline Matrix weighted_bce_grad(const Matrix& pred, const Matrix& labels,
                                const ClassWeighting& w) {
  detail::check_bce_inputs(pred, labels, w);
  Matrix grad(pred.rows, pred.cols);
  const double inv_s = 1.0 / static_cast<double>(pred.rows);
  for (std::size_t s = 0; s < pred.rows; ++s) {
    for (std::size_t c = 0; c < pred.cols; ++c) {
      const double p = pred(s, c);
      if (p < kProbClip || p > 1.0 - kProbClip) {
        grad(s, c) = 0.0;
        continue;
      }
      const double y = labels(s, c);
      grad(s, c) = w.weights[c] * (p - y) / (p * (1.0 - p)) * inv_s;
    }
  }
  return grad;
}

}  // namespace mac
