#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "skewann/common.hpp"

namespace skewann {

struct Neighbor {
  std::uint32_t id = kNone;
  float distance = 0.0f;  // squared L2 (or negated dot product)

  friend bool operator<(const Neighbor& a, const Neighbor& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.id < b.id);
  }
  friend bool operator==(const Neighbor& a, const Neighbor& b) = default;
};

/// Bounded sorted list of the best k results seen so far. Ties break toward
/// the lower id. k is small (tens to hundreds), so insertion into a sorted
/// vector beats a heap once the threshold check rejects most candidates.
class TopKQueue {
 public:
  explicit TopKQueue(std::size_t k) : k_(k) {
    require(k > 0, ErrorCode::kInvalidArgument, "TopKQueue: k must be positive");
    entries_.reserve(k + 1);
  }

  std::size_t capacity() const { return k_; }
  std::size_t size() const { return entries_.size(); }
  bool full() const { return entries_.size() == k_; }
  const std::vector<Neighbor>& entries() const { return entries_; }

  /// Distance of the current k-th entry, +inf while fewer than k entries.
  float threshold() const {
    return full() ? entries_.back().distance : std::numeric_limits<float>::infinity();
  }

  /// Threshold in true (non-squared) L2 units, for bound comparisons.
  double threshold_l2() const {
    const float t = threshold();
    return std::isinf(t) ? std::numeric_limits<double>::infinity() : std::sqrt(static_cast<double>(t));
  }

  /// Returns true if the entry set changed.
  bool push(std::uint32_t id, float distance) {
    const Neighbor n{id, distance};
    if (full() && !(n < entries_.back())) return false;
    auto pos = std::lower_bound(entries_.begin(), entries_.end(), n);
    if (pos != entries_.end() && pos->id == id) return false;
    entries_.insert(pos, n);
    if (entries_.size() > k_) entries_.pop_back();
    ++version_;
    return true;
  }

  /// Incremented on every change of the entry set.
  std::uint64_t version() const { return version_; }

  bool contains(std::uint32_t id) const {
    for (const auto& e : entries_)
      if (e.id == id) return true;
    return false;
  }

 private:
  std::size_t k_;
  std::vector<Neighbor> entries_;
  std::uint64_t version_ = 0;
};

}  // namespace skewann
