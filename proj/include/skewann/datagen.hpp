#pragma once

#include <numeric>
#include <queue>
#include <random>

#include "skewann/distance.hpp"
#include "skewann/storage.hpp"

namespace skewann {

struct BlobParams {
  std::size_t centers = 16;
  float sigma = 1.0f;
  float spread = 10.0f;  // centers uniform in [-spread, spread]^d
};

struct ZipfParams {
  std::size_t centers = 64;
  double alpha = 1.2;
  float sigma = 1.0f;
  float spread = 10.0f;
  /// Per-axis standard deviation decays as decay^j (axes permuted per
  /// center), total variance kept at d * sigma^2. 1 means isotropic.
  double decay = 1.0;
};

namespace detail {

inline Matrix<float> random_centers(std::size_t c, std::size_t d, float spread, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-spread, spread);
  Matrix<float> m{c, d, std::vector<float>(c * d)};
  for (auto& x : m.data) x = u(rng);
  return m;
}

inline void emit_around(Matrix<float>& out, std::size_t row, std::span<const float> center, float sigma,
                        std::mt19937_64& rng, std::span<const float> scale = {}) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  auto dst = out.row(row);
  for (std::size_t j = 0; j < center.size(); ++j) {
    const float s = scale.empty() ? sigma : sigma * scale[j];
    dst[j] = center[j] + (s > 0.0f ? s * g(rng) : 0.0f);
  }
}

/// Axis scales for each center: decay^rank with a per-center permutation,
/// normalised to unit mean square.
inline Matrix<float> axis_scales(std::size_t c, std::size_t d, double decay, std::uint64_t seed) {
  Matrix<float> m{c, d, std::vector<float>(c * d, 1.0f)};
  if (decay == 1.0) return m;
  std::vector<double> base(d);
  double ms = 0.0;
  for (std::size_t j = 0; j < d; ++j) ms += (base[j] = std::pow(decay, static_cast<double>(j))) * base[j];
  const double norm = std::sqrt(ms / static_cast<double>(d));
  std::mt19937_64 rng(seed ^ 0x5ca1eull);
  std::vector<std::size_t> perm(d);
  for (std::size_t i = 0; i < c; ++i) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t j = 0; j < d; ++j) m.row(i)[j] = static_cast<float>(base[perm[j]] / norm);
  }
  return m;
}

}  // namespace detail

/// Zipf weights rank^-alpha, normalized.
inline std::vector<double> zipf_weights(std::size_t c, double alpha) {
  std::vector<double> w(c);
  double sum = 0.0;
  for (std::size_t r = 0; r < c; ++r) sum += w[r] = std::pow(static_cast<double>(r + 1), -alpha);
  for (auto& x : w) x /= sum;
  return w;
}

/// Integer populations summing to n, proportional to the weights
/// (largest remainder), each at least 1 when n allows.
inline std::vector<std::size_t> apportion(std::size_t n, std::span<const double> weights) {
  const std::size_t c = weights.size();
  std::vector<std::size_t> cnt(c, 0);
  if (c == 0) return cnt;
  const std::size_t floor_each = n >= c ? 1 : 0;
  const std::size_t rest = n - floor_each * c;
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t given = 0;
  for (std::size_t i = 0; i < c; ++i) {
    const double exact = weights[i] * static_cast<double>(rest);
    cnt[i] = floor_each + static_cast<std::size_t>(exact);
    given += static_cast<std::size_t>(exact);
    rem.emplace_back(exact - std::floor(exact), i);
  }
  std::sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  for (std::size_t i = 0; given < rest; ++i, ++given) ++cnt[rem[i % c].second];
  return cnt;
}

/// Isotropic Gaussian blobs; point i belongs to center i mod centers.
inline Matrix<float> gen_blobs(std::size_t n, std::size_t d, const BlobParams& p, std::uint64_t seed) {
  require(n >= 1 && d >= 1 && p.centers >= 1 && p.sigma >= 0.0f, ErrorCode::kInvalidArgument, "blobs: invalid parameters");
  std::mt19937_64 rng(seed);
  const auto centers = detail::random_centers(p.centers, d, p.spread, rng);
  Matrix<float> out{n, d, std::vector<float>(n * d)};
  for (std::size_t i = 0; i < n; ++i) detail::emit_around(out, i, centers.row(i % p.centers), p.sigma, rng);
  return out;
}

/// Points around `centers` generating centers with populations proportional
/// to rank^-alpha, emitted in shuffled order. Returns the data; the centers
/// and weights are reproducible from the same seed via zipf_centers().
inline Matrix<float> zipf_centers(std::size_t d, const ZipfParams& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return detail::random_centers(p.centers, d, p.spread, rng);
}

inline Matrix<float> gen_zipf(std::size_t n, std::size_t d, const ZipfParams& p, std::uint64_t seed) {
  require(n >= 1 && d >= 1 && p.centers >= 1 && p.alpha >= 0.0 && p.sigma >= 0.0f && p.decay > 0.0 && p.decay <= 1.0,
          ErrorCode::kInvalidArgument, "zipf: invalid parameters");
  const auto centers = zipf_centers(d, p, seed);
  const auto scales = detail::axis_scales(p.centers, d, p.decay, seed);
  const auto counts = apportion(n, zipf_weights(p.centers, p.alpha));
  std::vector<std::uint32_t> owner;
  owner.reserve(n);
  for (std::size_t c = 0; c < counts.size(); ++c) owner.insert(owner.end(), counts[c], static_cast<std::uint32_t>(c));
  std::mt19937_64 rng(seed ^ 0xabcdefull);
  std::shuffle(owner.begin(), owner.end(), rng);
  Matrix<float> out{n, d, std::vector<float>(n * d)};
  for (std::size_t i = 0; i < n; ++i) detail::emit_around(out, i, centers.row(owner[i]), p.sigma, rng, scales.row(owner[i]));
  return out;
}

/// Queries from the same mixture: a center drawn by Zipf weight, plus noise.
/// When `only` is non-empty, centers are drawn uniformly from that subset.
inline Matrix<float> gen_zipf_queries(std::size_t nq, std::size_t d, const ZipfParams& p, std::uint64_t data_seed,
                                      std::uint64_t query_seed, std::span<const std::uint32_t> only = {}) {
  const auto centers = zipf_centers(d, p, data_seed);
  const auto scales = detail::axis_scales(p.centers, d, p.decay, data_seed);
  const auto w = zipf_weights(p.centers, p.alpha);
  std::mt19937_64 rng(query_seed);
  std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
  std::uniform_int_distribution<std::size_t> pick_only(0, only.empty() ? 0 : only.size() - 1);
  Matrix<float> out{nq, d, std::vector<float>(nq * d)};
  for (std::size_t i = 0; i < nq; ++i) {
    const std::size_t c = only.empty() ? pick(rng) : only[pick_only(rng)];
    detail::emit_around(out, i, centers.row(c), p.sigma, rng, scales.row(c));
  }
  return out;
}

/// All points of the m^d integer lattice {0..m-1}^d, last coordinate fastest.
inline Matrix<float> gen_grid(std::size_t m, std::size_t d) {
  require(m >= 1 && d >= 1, ErrorCode::kInvalidArgument, "grid: invalid parameters");
  const double total = std::pow(static_cast<double>(m), static_cast<double>(d));
  require(total <= 1e8, ErrorCode::kInvalidArgument, "grid: too many points");
  const auto n = static_cast<std::size_t>(total);
  Matrix<float> out{n, d, std::vector<float>(n * d)};
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t x = i;
    for (std::size_t j = d; j-- > 0;) {
      out.row(i)[j] = static_cast<float>(x % m);
      x /= m;
    }
  }
  return out;
}

/// Exact k nearest neighbors by exhaustive scan, ascending by squared L2,
/// ties toward the lower id.
inline Matrix<std::int32_t> brute_force_knn(const Matrix<float>& data, const Matrix<float>& queries, std::size_t k,
                                            std::size_t workers = 0) {
  require(data.cols == queries.cols, ErrorCode::kMismatch, "groundtruth: dimension mismatch");
  require(k >= 1 && k <= data.rows, ErrorCode::kInvalidArgument, "groundtruth: k must be in [1, N]");
  Matrix<std::int32_t> gt{queries.rows, k, std::vector<std::int32_t>(queries.rows * k)};
  const std::size_t d = data.cols;
  parallel_for(
      queries.rows,
      [&](std::size_t qi) {
        using Entry = std::pair<float, std::uint32_t>;
        std::priority_queue<Entry> heap;  // worst on top
        const float* q = queries.row(qi).data();
        for (std::uint32_t i = 0; i < data.rows; ++i) {
          const Entry e{l2_sq(q, data.row(i).data(), d), i};
          if (heap.size() < k) {
            heap.push(e);
          } else if (e < heap.top()) {
            heap.pop();
            heap.push(e);
          }
        }
        for (std::size_t j = k; j-- > 0;) {
          gt.row(qi)[j] = static_cast<std::int32_t>(heap.top().second);
          heap.pop();
        }
      },
      workers);
  return gt;
}

}  // namespace skewann
