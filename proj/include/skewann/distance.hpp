#pragma once

#include <cmath>
#include <cstddef>
#include <span>

#include "skewann/common.hpp"

namespace skewann {

/// kL2 reports squared Euclidean distance on the hot path; bounds take the
/// square root first because squared L2 does not satisfy the triangle
/// inequality. kInnerProduct reports the negated dot product and is not a
/// metric, so bound pruning is never applied to it.
enum class Metric : std::uint8_t { kL2 = 0, kInnerProduct = 1 };

inline bool is_metric(Metric m) { return m == Metric::kL2; }

inline float l2_sq(const float* a, const float* b, std::size_t d) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < d; ++i) {
    const float diff = a[i] - b[i];
    acc += diff * diff;
  }
  return acc;
}

inline float dot(const float* a, const float* b, std::size_t d) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < d; ++i) acc += a[i] * b[i];
  return acc;
}

inline float l2_sq(std::span<const float> a, std::span<const float> b) {
  require(a.size() == b.size(), ErrorCode::kMismatch, "distance: dimension mismatch");
  return l2_sq(a.data(), b.data(), a.size());
}

inline float l2(std::span<const float> a, std::span<const float> b) { return std::sqrt(l2_sq(a, b)); }

inline float distance(Metric metric, std::span<const float> a, std::span<const float> b) {
  require(a.size() == b.size(), ErrorCode::kMismatch, "distance: dimension mismatch");
  switch (metric) {
    case Metric::kL2:
      return l2_sq(a.data(), b.data(), a.size());
    case Metric::kInnerProduct:
      return -dot(a.data(), b.data(), a.size());
  }
  fail(ErrorCode::kInvalidArgument, "distance: unknown metric");
}

/// Lower bound on Dist(q, v) from a pivot p with both distances known.
inline double pivot_lower_bound(double q_to_pivot, double v_to_pivot) {
  return std::abs(q_to_pivot - v_to_pivot);
}

/// Reject-before-fetch test. The threshold gets a tiny relative slack so that
/// float rounding in stored pivot distances can only make pruning more
/// conservative, never unsound.
inline bool bound_exceeds(double lower_bound, double threshold) {
  return lower_bound > threshold + 1e-6 * std::max(1.0, threshold);
}

}  // namespace skewann
