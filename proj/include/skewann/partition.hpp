#pragma once

#include <cmath>

#include "skewann/kmeans.hpp"
#include "skewann/storage.hpp"

namespace skewann {

inline constexpr std::string_view kPartitionMagic = "ORCP";

/// IVF partition of a store. centroid_dist holds the true (non-squared) L2
/// distance of every vector to its own centroid; it is the pivot metadata
/// used by scan-style local indices.
struct ClusterPartition {
  std::size_t k = 0;
  std::size_t n = 0;
  std::size_t dim = 0;
  Matrix<float> centroids;
  std::vector<std::uint32_t> assignment;
  std::vector<float> centroid_dist;
  /// members of cluster c are member_ids[offsets[c] .. offsets[c+1]), ascending.
  std::vector<std::uint64_t> offsets;
  std::vector<std::uint32_t> member_ids;
  /// Position of each vector inside its cluster's member list.
  std::vector<std::uint32_t> local_pos;
  std::vector<double> inertia_history;

  std::size_t size(std::size_t c) const { return offsets[c + 1] - offsets[c]; }
  std::span<const std::uint32_t> members(std::size_t c) const {
    return {member_ids.data() + offsets[c], size(c)};
  }
  std::span<const float> centroid(std::size_t c) const { return centroids.row(c); }
  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s(k);
    for (std::size_t c = 0; c < k; ++c) s[c] = size(c);
    return s;
  }

  void rebuild_membership() {
    offsets.assign(k + 1, 0);
    for (auto a : assignment) ++offsets[a + 1];
    for (std::size_t c = 0; c < k; ++c) offsets[c + 1] += offsets[c];
    member_ids.assign(n, 0);
    local_pos.assign(n, 0);
    std::vector<std::uint64_t> cursor(offsets.begin(), offsets.end() - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = assignment[i];
      local_pos[i] = static_cast<std::uint32_t>(cursor[c] - offsets[c]);
      member_ids[cursor[c]++] = static_cast<std::uint32_t>(i);
    }
  }
};

/// Builds a partition from an in-memory copy of the data.
inline ClusterPartition partition_from_matrix(const Matrix<float>& data, std::size_t k, std::size_t max_iters,
                                              std::uint64_t seed, std::size_t workers = 0) {
  require(k > 0, ErrorCode::kInvalidArgument, "kmeans_partition: k must be positive");
  require(data.rows > 0, ErrorCode::kInvalidArgument, "kmeans_partition: empty store");
  require(k <= data.rows, ErrorCode::kInvalidArgument, "kmeans_partition: k exceeds vector count");
  auto km = kmeans(data.data, data.rows, data.cols, k, max_iters, seed, workers);
  ClusterPartition p;
  p.k = k;
  p.n = data.rows;
  p.dim = data.cols;
  p.centroids = std::move(km.centroids);
  p.assignment = std::move(km.assignment);
  p.inertia_history = std::move(km.inertia);
  p.centroid_dist.resize(p.n);
  for (std::size_t i = 0; i < p.n; ++i)
    p.centroid_dist[i] = std::sqrt(l2_sq(data.row(i).data(), p.centroids.row(p.assignment[i]).data(), p.dim));
  p.rebuild_membership();
  return p;
}

inline ClusterPartition kmeans_partition(const VectorStore& store, std::size_t k, std::size_t max_iters,
                                         std::uint64_t seed, std::size_t workers = 0) {
  require(store.count() > 0, ErrorCode::kInvalidArgument, "kmeans_partition: empty store");
  Matrix<float> data{store.count(), store.dim(), store.read_all()};
  return partition_from_matrix(data, k, max_iters, seed, workers);
}

struct SkewReport {
  std::size_t min = 0;
  std::size_t max = 0;
  double mean = 0.0;
  double std = 0.0;  // population
  /// histogram[b] counts clusters whose size falls in [2^b, 2^(b+1)).
  std::vector<std::size_t> histogram;
};

inline SkewReport skew_report_of(std::span<const std::size_t> sizes) {
  SkewReport r;
  if (sizes.empty()) return r;
  r.min = *std::min_element(sizes.begin(), sizes.end());
  r.max = *std::max_element(sizes.begin(), sizes.end());
  // Welford keeps the variance stable for very long-tailed inputs.
  double mean = 0.0, m2 = 0.0;
  std::size_t cnt = 0;
  for (auto s : sizes) {
    ++cnt;
    const double x = static_cast<double>(s);
    const double delta = x - mean;
    mean += delta / static_cast<double>(cnt);
    m2 += delta * (x - mean);
  }
  r.mean = mean;
  r.std = std::sqrt(m2 / static_cast<double>(cnt));
  for (auto s : sizes) {
    const std::size_t b = s == 0 ? 0 : static_cast<std::size_t>(std::bit_width(s) - 1);
    if (r.histogram.size() <= b) r.histogram.resize(b + 1, 0);
    ++r.histogram[b];
  }
  return r;
}

inline SkewReport skew_report(const ClusterPartition& p) {
  const auto s = p.sizes();
  return skew_report_of(s);
}

/// The m nearest centroids to q, ascending by distance, lower id on ties.
inline std::vector<std::uint32_t> assign_query_clusters(const ClusterPartition& p, std::span<const float> q,
                                                        std::size_t m) {
  require(m > 0, ErrorCode::kInvalidArgument, "assign_query_clusters: m must be positive");
  require(m <= p.k, ErrorCode::kInvalidArgument, "assign_query_clusters: m exceeds cluster count");
  require(q.size() == p.dim, ErrorCode::kMismatch, "assign_query_clusters: dimension mismatch");
  std::vector<std::pair<float, std::uint32_t>> d(p.k);
  for (std::size_t c = 0; c < p.k; ++c)
    d[c] = {l2_sq(q.data(), p.centroids.row(c).data(), p.dim), static_cast<std::uint32_t>(c)};
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(m), d.end());
  std::vector<std::uint32_t> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = d[i].second;
  return out;
}

inline void save_partition(const std::string& path, const ClusterPartition& p) {
  io::Writer w(path);
  w.put_bytes(kPartitionMagic);
  w.put(static_cast<std::uint64_t>(p.k));
  w.put(static_cast<std::uint64_t>(p.n));
  w.put(static_cast<std::uint64_t>(p.dim));
  w.put_span(std::span<const float>(p.centroids.data));
  w.put_span(std::span<const std::uint32_t>(p.assignment));
  w.put_span(std::span<const float>(p.centroid_dist));
  w.put_span(std::span<const std::uint64_t>(p.offsets));
  w.put_span(std::span<const std::uint32_t>(p.member_ids));
  w.close();
}

inline ClusterPartition load_partition(const std::string& path) {
  io::Reader r(path);
  r.expect_magic(kPartitionMagic);
  ClusterPartition p;
  p.k = r.get<std::uint64_t>();
  p.n = r.get<std::uint64_t>();
  p.dim = r.get<std::uint64_t>();
  p.centroids = Matrix<float>{p.k, p.dim, r.get_vec<float>(p.k * p.dim)};
  p.assignment = r.get_vec<std::uint32_t>(p.n);
  p.centroid_dist = r.get_vec<float>(p.n);
  p.offsets = r.get_vec<std::uint64_t>(p.k + 1);
  p.member_ids = r.get_vec<std::uint32_t>(p.n);
  for (auto a : p.assignment) require(a < p.k, ErrorCode::kFormat, "load_partition: assignment out of range");
  p.rebuild_membership();
  return p;
}

}  // namespace skewann
