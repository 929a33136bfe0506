#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "skewann/common.hpp"

namespace skewann {

/// Count-Min sketch over 64-bit keys. Estimates never undercount; with
/// width = ceil(e / eps) and depth = ceil(ln(1 / delta)) the overcount is at
/// most eps * total with probability at least 1 - delta.
class CountMinSketch {
 public:
  CountMinSketch(std::size_t width, std::size_t depth, std::uint64_t seed = 0x5eed)
      : width_(width), depth_(depth), counters_(width * depth, 0), seeds_(depth) {
    require(width > 0 && depth > 0, ErrorCode::kInvalidArgument, "CountMinSketch: width and depth must be positive");
    std::uint64_t s = seed;
    for (auto& x : seeds_) x = splitmix(s);
  }

  static CountMinSketch for_error(double eps, double delta, std::uint64_t seed = 0x5eed) {
    require(eps > 0 && delta > 0 && delta < 1, ErrorCode::kInvalidArgument, "CountMinSketch: bad error parameters");
    return CountMinSketch(static_cast<std::size_t>(std::ceil(std::exp(1.0) / eps)),
                          static_cast<std::size_t>(std::ceil(std::log(1.0 / delta))), seed);
  }

  void add(std::uint64_t key, std::uint64_t count = 1) {
    for (std::size_t r = 0; r < depth_; ++r) counters_[r * width_ + slot(key, r)] += count;
    total_ += count;
  }

  std::uint64_t estimate(std::uint64_t key) const {
    std::uint64_t best = std::numeric_limits<std::uint64_t>::max();
    for (std::size_t r = 0; r < depth_; ++r) best = std::min(best, counters_[r * width_ + slot(key, r)]);
    return best;
  }

  /// Adds another sketch with identical shape and seeds.
  void merge(const CountMinSketch& other) {
    require(other.width_ == width_ && other.depth_ == depth_ && other.seeds_ == seeds_, ErrorCode::kMismatch,
            "CountMinSketch: merge of incompatible sketches");
    for (std::size_t i = 0; i < counters_.size(); ++i) counters_[i] += other.counters_[i];
    total_ += other.total_;
  }

  void clear() {
    std::fill(counters_.begin(), counters_.end(), 0);
    total_ = 0;
  }

  /// Fresh sketch with the same shape and hash seeds.
  CountMinSketch empty_clone() const {
    CountMinSketch c = *this;
    c.clear();
    return c;
  }

  std::size_t width() const { return width_; }
  std::size_t depth() const { return depth_; }
  std::uint64_t total() const { return total_; }
  /// Additive error guarantee e / width.
  double epsilon() const { return std::exp(1.0) / static_cast<double>(width_); }
  std::size_t memory_bytes() const { return counters_.size() * sizeof(std::uint64_t); }

 private:
  static std::uint64_t splitmix(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  std::size_t slot(std::uint64_t key, std::size_t row) const {
    std::uint64_t x = key ^ seeds_[row];
    return static_cast<std::size_t>(splitmix(x) % width_);
  }

  std::size_t width_;
  std::size_t depth_;
  std::vector<std::uint64_t> counters_;
  std::vector<std::uint64_t> seeds_;
  std::uint64_t total_ = 0;
};

}  // namespace skewann
