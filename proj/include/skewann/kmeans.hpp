#pragma once

#include <numeric>
#include <random>

#include "skewann/distance.hpp"
#include "skewann/storage.hpp"

namespace skewann {

struct KMeansResult {
  Matrix<float> centroids;
  std::vector<std::uint32_t> assignment;
  /// Total within-cluster squared distance after every assignment step.
  std::vector<double> inertia;
  std::size_t iterations = 0;
};

namespace detail {

inline std::uint32_t nearest_centroid(const float* x, const Matrix<float>& c, float* best_dist = nullptr) {
  std::uint32_t best = 0;
  float bd = std::numeric_limits<float>::infinity();
  for (std::size_t j = 0; j < c.rows; ++j) {
    const float dj = l2_sq(x, c.data.data() + j * c.cols, c.cols);
    if (dj < bd) {  // strict: ties stay with the lower id
      bd = dj;
      best = static_cast<std::uint32_t>(j);
    }
  }
  if (best_dist != nullptr) *best_dist = bd;
  return best;
}

inline Matrix<float> kmeanspp_init(std::span<const float> data, std::size_t n, std::size_t d, std::size_t k,
                                   std::mt19937_64& rng) {
  Matrix<float> c{k, d, std::vector<float>(k * d)};
  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  std::copy_n(data.data() + first * d, d, c.data.begin());
  for (std::size_t j = 1; j < k; ++j) {
    const float* prev = c.data.data() + (j - 1) * d;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      min_d[i] = std::min(min_d[i], static_cast<double>(l2_sq(data.data() + i * d, prev, d)));
      total += min_d[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        r -= min_d[i];
        if (r < 0.0 && min_d[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    }
    std::copy_n(data.data() + pick * d, d, c.data.begin() + static_cast<std::ptrdiff_t>(j * d));
  }
  return c;
}

inline double assign_all(std::span<const float> data, std::size_t n, std::size_t d, const Matrix<float>& c,
                         std::vector<std::uint32_t>& assignment, std::size_t workers) {
  std::vector<float> dist(n);
  parallel_for(
      n, [&](std::size_t i) { assignment[i] = nearest_centroid(data.data() + i * d, c, &dist[i]); }, workers);
  double total = 0.0;
  for (float x : dist) total += x;
  return total;
}

inline void update_centroids(std::span<const float> data, std::size_t n, std::size_t d,
                             const std::vector<std::uint32_t>& assignment, Matrix<float>& c) {
  std::vector<double> sums(c.rows * d, 0.0);
  std::vector<std::size_t> counts(c.rows, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = assignment[i];
    ++counts[a];
    const float* x = data.data() + i * d;
    double* s = sums.data() + a * d;
    for (std::size_t t = 0; t < d; ++t) s[t] += x[t];
  }
  for (std::size_t j = 0; j < c.rows; ++j) {
    if (counts[j] == 0) continue;  // left for empty-cluster repair
    for (std::size_t t = 0; t < d; ++t)
      c.data[j * d + t] = static_cast<float>(sums[j * d + t] / static_cast<double>(counts[j]));
  }
}

inline double inertia_of(std::span<const float> data, std::size_t n, std::size_t d, const Matrix<float>& c,
                         const std::vector<std::uint32_t>& assignment) {
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += l2_sq(data.data() + i * d, c.data.data() + assignment[i] * d, d);
  return total;
}

/// An empty cluster takes the point farthest from its centroid in the
/// currently largest cluster. Returns whether any repair happened.
inline bool repair_empty(std::span<const float> data, std::size_t n, std::size_t d, Matrix<float>& c,
                         std::vector<std::uint32_t>& assignment) {
  std::vector<std::size_t> sizes(c.rows, 0);
  for (auto a : assignment) ++sizes[a];
  bool repaired = false;
  for (std::size_t e = 0; e < c.rows; ++e) {
    if (sizes[e] != 0) continue;
    const auto largest = static_cast<std::uint32_t>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    std::size_t far = n;
    float far_d = -1.0f;
    for (std::size_t i = 0; i < n; ++i) {
      if (assignment[i] != largest) continue;
      const float di = l2_sq(data.data() + i * d, c.data.data() + largest * d, d);
      if (di > far_d) {
        far_d = di;
        far = i;
      }
    }
    assignment[far] = static_cast<std::uint32_t>(e);
    --sizes[largest];
    ++sizes[e];
    std::copy_n(data.data() + far * d, d, c.data.begin() + static_cast<std::ptrdiff_t>(e * d));
    repaired = true;
  }
  return repaired;
}

}  // namespace detail

/// Lloyd's k-means with k-means++ seeding. The result always ends on an
/// assignment step, so every point is assigned to its nearest returned
/// centroid (lower id on ties), except points moved by the final empty-cluster
/// repair, which sit exactly on their new centroid.
inline KMeansResult kmeans(std::span<const float> data, std::size_t n, std::size_t d, std::size_t k,
                           std::size_t max_iters, std::uint64_t seed, std::size_t workers = 0) {
  require(k > 0, ErrorCode::kInvalidArgument, "kmeans: k must be positive");
  require(n > 0, ErrorCode::kInvalidArgument, "kmeans: no points");
  require(k <= n, ErrorCode::kInvalidArgument, "kmeans: k exceeds point count");
  require(max_iters > 0, ErrorCode::kInvalidArgument, "kmeans: max_iters must be positive");
  require(data.size() == n * d, ErrorCode::kMismatch, "kmeans: data size mismatch");

  std::mt19937_64 rng(seed);
  KMeansResult r;
  r.centroids = detail::kmeanspp_init(data, n, d, k, rng);
  r.assignment.assign(n, 0);
  r.inertia.push_back(detail::assign_all(data, n, d, r.centroids, r.assignment, workers));

  constexpr int kMaxRepairRounds = 8;
  int repair_rounds = 0;
  auto previous = r.assignment;
  for (std::size_t it = 0; it < max_iters; ++it) {
    detail::update_centroids(data, n, d, r.assignment, r.centroids);
    r.inertia.push_back(detail::assign_all(data, n, d, r.centroids, r.assignment, workers));
    ++r.iterations;
    bool repaired = false;
    if (repair_rounds < kMaxRepairRounds && detail::repair_empty(data, n, d, r.centroids, r.assignment)) {
      ++repair_rounds;
      repaired = true;
      r.inertia.push_back(detail::inertia_of(data, n, d, r.centroids, r.assignment));
      // one extra Lloyd step after a repair
      detail::update_centroids(data, n, d, r.assignment, r.centroids);
      r.inertia.push_back(detail::assign_all(data, n, d, r.centroids, r.assignment, workers));
    }
    if (!repaired && r.assignment == previous) break;
    previous = r.assignment;
  }
  if (detail::repair_empty(data, n, d, r.centroids, r.assignment))
    r.inertia.push_back(detail::inertia_of(data, n, d, r.centroids, r.assignment));
  return r;
}

}  // namespace skewann
