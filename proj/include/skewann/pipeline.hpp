#pragma once

#include "skewann/engine.hpp"

namespace skewann {

/// Builds every cluster's local index with the plan-assigned type.
inline std::vector<LocalIndex> build_indices(const VectorStore& store, const ClusterPartition& partition,
                                             const IndexPlan& plan, const LocalBuildParams& params,
                                             std::size_t workers = 0) {
  require(plan.choice.size() == partition.k, ErrorCode::kMismatch, "build_indices: plan does not match partition");
  std::vector<LocalIndex> out(partition.k);
  parallel_for(
      partition.k,
      [&](std::size_t c) { out[c] = build_local_index(store, partition, static_cast<std::uint32_t>(c), plan.choice[c], params); },
      workers);
  return out;
}

/// Record order that keeps every cluster contiguous: scan clusters in
/// posting-list (or member) order, graph clusters in BFS order from the
/// entry point so neighbors tend to share pages.
inline std::vector<std::uint32_t> cluster_layout_order(const ClusterPartition& partition,
                                                       std::span<const LocalIndex> indices) {
  require(indices.size() == partition.k, ErrorCode::kMismatch, "cluster_layout_order: index count mismatch");
  std::vector<std::uint32_t> order;
  order.reserve(partition.n);
  for (const auto& idx : indices) {
    const std::size_t n = idx.size();
    if (idx.type() == IndexType::kIvfFlat) {
      for (auto local : idx.list_entries) order.push_back(idx.members[local]);
    } else if (idx.type() == IndexType::kGraph && n > 0) {
      std::vector<bool> seen(n, false);
      std::vector<std::uint32_t> queue{idx.entry};
      seen[idx.entry] = true;
      for (std::size_t h = 0; h < queue.size(); ++h)
        for (const auto& e : idx.neighbors(queue[h]))
          if (!seen[e.neighbor]) {
            seen[e.neighbor] = true;
            queue.push_back(e.neighbor);
          }
      for (std::uint32_t i = 0; i < n; ++i)
        if (!seen[i]) queue.push_back(i);
      for (auto local : queue) order.push_back(idx.members[local]);
    } else {
      order.insert(order.end(), idx.members.begin(), idx.members.end());
    }
  }
  require(order.size() == partition.n, ErrorCode::kMismatch, "cluster_layout_order: indices do not cover the store");
  return order;
}

/// Everything a query needs, loaded or built in memory.
struct Deployment {
  VectorStore store;
  ClusterPartition partition;
  IndexPlan plan;
  std::vector<LocalIndex> indices;
  SnapshotPtr snapshot;

  EngineState state(const HotVectorCache* cache = nullptr) const {
    return EngineState{store, partition, plan, indices, cache};
  }
};

}  // namespace skewann
