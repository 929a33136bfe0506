#pragma once

#include <filesystem>
#include <functional>

#include "skewann/partition.hpp"
#include "skewann/profiler.hpp"
#include "skewann/topk.hpp"
#include "skewann/vamana.hpp"

namespace skewann {

inline constexpr std::string_view kLocalIndexMagic = "ORCI";
inline constexpr std::uint32_t kLocalIndexVersion = 1;

struct LocalIndexHeader {
  std::uint32_t cluster_id = 0;
  IndexType type = IndexType::kFlat;
  std::uint64_t vector_count = 0;
  std::uint32_t dim = 0;
  std::uint64_t section_offset = 0;  // byte offset of the type-specific section
};

struct Edge {
  std::uint32_t neighbor;
  float dist;  // true L2 between the two endpoints
};

struct LocalBuildParams {
  GraphParams graph;
  std::uint32_t nlist_max = 1024;
  std::size_t kmeans_iters = 10;
  std::uint64_t seed = 11;
};

/// One cluster's disk-resident index. Only structure lives here; raw
/// vectors are always read through the store. Local position i refers to
/// members[i].
struct LocalIndex {
  LocalIndexHeader header;
  std::vector<std::uint32_t> members;

  // graph section
  std::uint32_t entry = 0;
  std::vector<std::uint64_t> adj_offsets;  // n + 1
  std::vector<Edge> edges;

  // ivf section
  std::uint32_t nlist = 0;
  Matrix<float> sub_centroids;
  std::vector<std::uint64_t> list_offsets;  // nlist + 1
  std::vector<std::uint32_t> list_entries;  // local positions

  IndexType type() const { return header.type; }
  std::size_t size() const { return members.size(); }
  std::span<const Edge> neighbors(std::uint32_t local) const {
    return {edges.data() + adj_offsets[local], adj_offsets[local + 1] - adj_offsets[local]};
  }
  std::span<const std::uint32_t> list(std::uint32_t l) const {
    return {list_entries.data() + list_offsets[l], list_offsets[l + 1] - list_offsets[l]};
  }
};

/// Knobs of one local search.
struct SearchBudget {
  std::size_t beam = 64;       // L, candidate pool capacity for graph search
  std::size_t max_hops = 0;    // 0 = unbounded
  bool pruning = true;
  std::size_t local_nprobe = 8;
};

struct VisitRecord {
  std::uint32_t vector_id;
  std::uint32_t depth;  // pop order for graph search, 0 for scans
};

/// Per-cluster record of what a local search evaluated.
struct VisitTrace {
  std::uint32_t cluster = 0;
  IndexType type = IndexType::kFlat;
  std::vector<VisitRecord> visits;
  std::uint32_t depth_max = 0;
};

/// Counters for the verify stage of one query.
struct FetchCounters {
  std::uint64_t raw_fetches = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t rejected_by_bound = 0;
  double fetch_seconds = 0.0;
  /// When set, every bound rejection is logged as (vector id, lower bound, threshold).
  std::vector<std::tuple<std::uint32_t, double, double>>* rejection_log = nullptr;
};

/// Query-scoped gateway to raw vectors: consults the optional hot cache,
/// otherwise performs a counted store fetch.
class Fetcher {
 public:
  using CacheLookup = std::function<bool(std::uint32_t, std::span<float>)>;

  Fetcher(const VectorStore& store, FetchContext& ctx, FetchCounters& counters, CacheLookup cache = {})
      : store_(store), ctx_(ctx), counters_(counters), cache_(std::move(cache)) {}

  void fetch(std::uint32_t id, std::span<float> out) {
    if (cache_ && cache_(id, out)) {
      ++counters_.cache_hits;
      return;
    }
    Stopwatch sw;
    store_.fetch(id, out, &ctx_);
    counters_.fetch_seconds += sw.seconds();
    ++counters_.raw_fetches;
  }

  void reject(std::uint32_t id, double lb, double threshold) {
    ++counters_.rejected_by_bound;
    if (counters_.rejection_log != nullptr) counters_.rejection_log->emplace_back(id, lb, threshold);
  }

  const VectorStore& store() const { return store_; }

 private:
  const VectorStore& store_;
  FetchContext& ctx_;
  FetchCounters& counters_;
  CacheLookup cache_;
};

// Build ------------------------------------------------------------------------

inline LocalIndex build_local_index(const VectorStore& store, const ClusterPartition& partition,
                                    std::uint32_t cluster_id, IndexType type, const LocalBuildParams& params) {
  require(cluster_id < partition.k, ErrorCode::kOutOfRange, "build_local_index: cluster id out of range");
  const auto mem = partition.members(cluster_id);
  require(!mem.empty(), ErrorCode::kInvalidArgument, "build_local_index: cluster is empty");
  LocalIndex idx;
  idx.header.cluster_id = cluster_id;
  idx.header.type = type;
  idx.header.vector_count = mem.size();
  idx.header.dim = static_cast<std::uint32_t>(store.dim());
  idx.members.assign(mem.begin(), mem.end());
  if (type == IndexType::kFlat) return idx;

  const std::size_t d = store.dim(), n = mem.size();
  Matrix<float> pts{n, d, std::vector<float>(n * d)};
  for (std::size_t i = 0; i < n; ++i) store.read(mem[i], pts.row(i));

  if (type == IndexType::kGraph) {
    GraphParams gp = params.graph;
    gp.seed = params.seed ^ (0x9e3779b97f4a7c15ull * (cluster_id + 1));
    auto g = build_vamana(std::move(pts), gp);
    idx.entry = g.entry;
    idx.adj_offsets.assign(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) idx.adj_offsets[i + 1] = idx.adj_offsets[i] + g.adj[i].size();
    idx.edges.reserve(idx.adj_offsets[n]);
    for (std::uint32_t i = 0; i < n; ++i)
      for (auto j : g.adj[i]) idx.edges.push_back({j, std::sqrt(l2_sq(g.row(i), g.row(j), d))});
    return idx;
  }

  const std::size_t nlist = std::min(ivf_nlist(n, params.nlist_max), n);
  auto km = kmeans(pts.data, n, d, nlist, params.kmeans_iters, params.seed + cluster_id);
  idx.nlist = static_cast<std::uint32_t>(nlist);
  idx.sub_centroids = std::move(km.centroids);
  idx.list_offsets.assign(nlist + 1, 0);
  for (auto a : km.assignment) ++idx.list_offsets[a + 1];
  for (std::size_t l = 0; l < nlist; ++l) idx.list_offsets[l + 1] += idx.list_offsets[l];
  idx.list_entries.assign(n, 0);
  std::vector<std::uint64_t> cur(idx.list_offsets.begin(), idx.list_offsets.end() - 1);
  for (std::uint32_t i = 0; i < n; ++i) idx.list_entries[cur[km.assignment[i]]++] = i;
  return idx;
}

inline std::string local_index_filename(std::uint32_t cluster_id) {
  return "cluster_" + std::to_string(cluster_id) + ".idx";
}

inline void save_local_index(const std::string& path, const LocalIndex& idx) {
  io::Writer w(path);
  w.put_bytes(kLocalIndexMagic);
  w.put(kLocalIndexVersion);
  w.put(idx.header.cluster_id);
  w.put(static_cast<std::uint8_t>(idx.header.type));
  w.put(idx.header.vector_count);
  w.put(idx.header.dim);
  const std::uint64_t section = 4 + 4 + 4 + 1 + 8 + 4 + 8 + 4ull * idx.members.size();
  w.put(section);
  w.put_span(std::span<const std::uint32_t>(idx.members));
  if (idx.type() == IndexType::kGraph) {
    w.put(idx.entry);
    w.put_span(std::span<const std::uint64_t>(idx.adj_offsets));
    for (const auto& e : idx.edges) {
      w.put(e.neighbor);
      w.put(e.dist);
    }
  } else if (idx.type() == IndexType::kIvfFlat) {
    w.put(idx.nlist);
    w.put_span(std::span<const float>(idx.sub_centroids.data));
    w.put_span(std::span<const std::uint64_t>(idx.list_offsets));
    w.put_span(std::span<const std::uint32_t>(idx.list_entries));
  }
  w.close();
}

inline LocalIndex load_local_index(const std::string& path) {
  io::Reader r(path);
  r.expect_magic(kLocalIndexMagic);
  require(r.get<std::uint32_t>() == kLocalIndexVersion, ErrorCode::kFormat, "local index: unsupported version");
  LocalIndex idx;
  idx.header.cluster_id = r.get<std::uint32_t>();
  idx.header.type = index_type_from_u8(r.get<std::uint8_t>());
  idx.header.vector_count = r.get<std::uint64_t>();
  idx.header.dim = r.get<std::uint32_t>();
  idx.header.section_offset = r.get<std::uint64_t>();
  const auto n = idx.header.vector_count;
  idx.members = r.get_vec<std::uint32_t>(n);
  if (idx.type() == IndexType::kGraph) {
    idx.entry = r.get<std::uint32_t>();
    require(n == 0 || idx.entry < n, ErrorCode::kFormat, "local index: entry point out of range");
    idx.adj_offsets = r.get_vec<std::uint64_t>(n + 1);
    idx.edges.resize(idx.adj_offsets[n]);
    for (auto& e : idx.edges) {
      e.neighbor = r.get<std::uint32_t>();
      e.dist = r.get<float>();
      require(e.neighbor < n, ErrorCode::kFormat, "local index: neighbor out of range");
    }
  } else if (idx.type() == IndexType::kIvfFlat) {
    idx.nlist = r.get<std::uint32_t>();
    idx.sub_centroids = Matrix<float>{idx.nlist, idx.header.dim, r.get_vec<float>(std::size_t{idx.nlist} * idx.header.dim)};
    idx.list_offsets = r.get_vec<std::uint64_t>(idx.nlist + 1);
    idx.list_entries = r.get_vec<std::uint32_t>(n);
  }
  require(r.at_end(), ErrorCode::kFormat, "local index: trailing bytes in " + path);
  return idx;
}

/// Checks that the index matches the partition, that the graph is fully
/// reachable, and that a sample of stored edge distances agrees with the raw
/// vectors within 1e-4 relative. Returns the number of edges checked.
inline std::size_t verify_local_index(const LocalIndex& idx, const ClusterPartition& partition,
                                      const VectorStore& store, double edge_fraction = 0.01,
                                      std::uint64_t seed = 3) {
  const auto mem = partition.members(idx.header.cluster_id);
  require(idx.members.size() == mem.size() && std::equal(mem.begin(), mem.end(), idx.members.begin()),
          ErrorCode::kMismatch, "local index: member list does not match partition");
  if (idx.type() == IndexType::kIvfFlat) {
    require(idx.list_offsets.back() == idx.size(), ErrorCode::kFormat, "local index: posting lists do not cover cluster");
    for (std::uint32_t l = 0; l < idx.nlist; ++l)
      require(!idx.list(l).empty(), ErrorCode::kFormat, "local index: empty posting list");
  }
  if (idx.type() != IndexType::kGraph) return 0;
  const std::size_t n = idx.size();
  std::vector<bool> seen(n, false);
  std::vector<std::uint32_t> stack{idx.entry};
  seen[idx.entry] = true;
  std::size_t reached = 1;
  while (!stack.empty()) {
    const auto u = stack.back();
    stack.pop_back();
    for (const auto& e : idx.neighbors(u))
      if (!seen[e.neighbor]) {
        seen[e.neighbor] = true;
        ++reached;
        stack.push_back(e.neighbor);
      }
  }
  require(reached == n, ErrorCode::kFormat, "local index: graph not connected from entry point");
  if (idx.edges.empty()) return 0;
  const auto samples = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(edge_fraction * static_cast<double>(idx.edges.size()))));
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint32_t> pick_node(0, static_cast<std::uint32_t>(n - 1));
  std::size_t checked = 0;
  std::vector<float> a(store.dim()), b(store.dim());
  while (checked < samples) {
    const auto u = pick_node(rng);
    for (const auto& e : idx.neighbors(u)) {
      store.read(idx.members[u], a);
      store.read(idx.members[e.neighbor], b);
      const double truth = std::sqrt(static_cast<double>(l2_sq(a, b)));
      require(std::abs(truth - e.dist) <= 1e-4 * std::max(1.0, truth), ErrorCode::kFormat,
              "local index: stored edge distance disagrees with raw vectors");
      if (++checked >= samples) break;
    }
  }
  return checked;
}

// Search -------------------------------------------------------------------------

/// Exhaustive scan with the cluster centroid as pivot.
/// `q_to_centroid` is the true L2 distance from q to the cluster centroid.
inline void search_flat(const LocalIndex& idx, const ClusterPartition& partition, std::span<const float> q,
                        double q_to_centroid, TopKQueue& topk, Fetcher& fetcher, bool pruning,
                        VisitTrace* trace = nullptr) {
  std::vector<float> buf(q.size());
  for (const auto id : idx.members) {
    if (pruning) {
      const double lb = pivot_lower_bound(q_to_centroid, partition.centroid_dist[id]);
      const double dis = topk.threshold_l2();
      if (bound_exceeds(lb, dis)) {
        fetcher.reject(id, lb, dis);
        continue;
      }
    }
    fetcher.fetch(id, buf);
    topk.push(id, l2_sq(q.data(), buf.data(), q.size()));
    if (trace != nullptr) trace->visits.push_back({id, 0});
  }
}

/// Probes the local_nprobe nearest posting lists; vector-level pruning uses
/// the whole-cluster centroid as pivot, reusing the partition's
/// per-vector centroid distances.
inline void search_ivfflat(const LocalIndex& idx, const ClusterPartition& partition, std::span<const float> q,
                           double q_to_centroid, std::size_t local_nprobe, TopKQueue& topk, Fetcher& fetcher,
                           bool pruning, VisitTrace* trace = nullptr) {
  require(local_nprobe >= 1, ErrorCode::kInvalidArgument, "search_ivfflat: local_nprobe must be positive");
  const std::size_t probes = std::min<std::size_t>(local_nprobe, idx.nlist);
  std::vector<std::pair<float, std::uint32_t>> order(idx.nlist);
  for (std::uint32_t l = 0; l < idx.nlist; ++l) order[l] = {l2_sq(q.data(), idx.sub_centroids.row(l).data(), q.size()), l};
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(probes), order.end());
  std::vector<float> buf(q.size());
  for (std::size_t p = 0; p < probes; ++p) {
    for (const auto local : idx.list(order[p].second)) {
      const auto id = idx.members[local];
      if (pruning) {
        const double lb = pivot_lower_bound(q_to_centroid, partition.centroid_dist[id]);
        const double dis = topk.threshold_l2();
        if (bound_exceeds(lb, dis)) {
          fetcher.reject(id, lb, dis);
          continue;
        }
      }
      fetcher.fetch(id, buf);
      topk.push(id, l2_sq(q.data(), buf.data(), q.size()));
      if (trace != nullptr) trace->visits.push_back({id, 0});
    }
  }
}

/// Entry hint for graph search: a local position plus, when the caller
/// already holds the raw vector in memory, its squared distance to q.
struct GraphSeed {
  std::uint32_t local = kNone;
  std::optional<float> known_dist_sq;
};

/// Best-first beam search with edge-distance pruning. A neighbor whose bound
/// |Dist(q, v_i) - Dist(v_i, v_j)| exceeds the current threshold is enqueued
/// unfetched, keyed by its bound; it is fetched only if, when popped, the
/// bound no longer exceeds the threshold, otherwise it is discarded.
inline void search_graph(const LocalIndex& idx, std::span<const float> q, const GraphSeed& seed,
                         const SearchBudget& budget, TopKQueue& topk, Fetcher& fetcher, VisitTrace* trace = nullptr) {
  const std::size_t n = idx.size();
  if (n == 0) return;
  require(seed.local == kNone || seed.local < n, ErrorCode::kOutOfRange, "search_graph: invalid seed id");
  const std::size_t beam = std::max<std::size_t>(1, budget.beam);
  const std::size_t d = q.size();
  std::vector<float> buf(d);

  struct Cand {
    double key;  // true L2 if fetched, else lower bound
    std::uint32_t local;
    bool fetched;
    bool expanded;
  };
  auto less = [](const Cand& a, const Cand& b) { return a.key < b.key || (a.key == b.key && a.local < b.local); };
  std::vector<Cand> pool;
  std::size_t fetched_in_pool = 0;
  std::vector<bool> visited(n, false);

  auto insert = [&](const Cand& c) {
    if (fetched_in_pool >= beam) {
      auto worst = std::find_if(pool.rbegin(), pool.rend(), [](const Cand& x) { return x.fetched; });
      if (!less(c, *worst)) return;
    }
    pool.insert(std::lower_bound(pool.begin(), pool.end(), c, less), c);
    if (c.fetched) ++fetched_in_pool;
    while (fetched_in_pool > beam) {
      if (pool.back().fetched) --fetched_in_pool;
      pool.pop_back();
    }
  };
  auto score = [&](std::uint32_t local) {
    const auto id = idx.members[local];
    fetcher.fetch(id, buf);
    const float dsq = l2_sq(q.data(), buf.data(), d);
    topk.push(id, dsq);
    return std::sqrt(static_cast<double>(dsq));
  };

  const std::uint32_t start = seed.local == kNone ? idx.entry : seed.local;
  visited[start] = true;
  double start_dist = 0.0;
  if (seed.local != kNone && seed.known_dist_sq) {
    topk.push(idx.members[start], *seed.known_dist_sq);
    start_dist = std::sqrt(static_cast<double>(*seed.known_dist_sq));
  } else {
    start_dist = score(start);
  }
  insert({start_dist, start, true, false});

  std::uint32_t pops = 0;
  while (true) {
    auto it = std::find_if(pool.begin(), pool.end(), [](const Cand& c) { return !c.expanded; });
    if (it == pool.end()) break;
    if (!it->fetched) {
      const double dis = topk.threshold_l2();
      const Cand c = *it;
      pool.erase(it);
      if (budget.pruning && bound_exceeds(c.key, dis)) continue;
      insert({score(c.local), c.local, true, false});
      continue;
    }
    if (budget.max_hops != 0 && pops >= budget.max_hops) break;
    it->expanded = true;
    const Cand cur = *it;
    ++pops;
    if (trace != nullptr) trace->visits.push_back({idx.members[cur.local], pops});
    for (const auto& e : idx.neighbors(cur.local)) {
      if (visited[e.neighbor]) continue;
      visited[e.neighbor] = true;
      if (budget.pruning) {
        const double lb = pivot_lower_bound(cur.key, e.dist);
        const double dis = topk.threshold_l2();
        if (bound_exceeds(lb, dis)) {
          fetcher.reject(idx.members[e.neighbor], lb, dis);
          insert({lb, e.neighbor, false, false});
          continue;
        }
      }
      insert({score(e.neighbor), e.neighbor, true, false});
    }
  }
  if (trace != nullptr) trace->depth_max = std::max(trace->depth_max, pops);
}

}  // namespace skewann
