#pragma once

#include <atomic>
#include <memory>
#include <shared_mutex>
#include <unordered_map>
#include <unordered_set>

#include "skewann/cms.hpp"
#include "skewann/local_index.hpp"
#include "skewann/partition.hpp"
#include "skewann/vamana.hpp"

namespace skewann {

inline constexpr std::string_view kNavGraphMagic = "ORGA";

struct NavNode {
  std::uint32_t vector_id = kNone;  // kNone for centroid nodes
  std::uint32_t cluster = 0;
  std::uint32_t local_pos = kNone;  // kNone for centroid nodes
  bool is_protected = false;

  friend bool operator==(const NavNode&, const NavNode&) = default;
};

struct NavSeed {
  std::uint32_t node = 0;
  std::uint32_t vector_id = kNone;
  std::uint32_t cluster = 0;
  std::uint32_t local_pos = kNone;
  float dist_sq = 0.0f;
  /// Raw vector of the seed, owned by the snapshot.
  std::span<const float> vector;
};

/// One immutable version of the routing graph. Every node is a real vector
/// (a centroid or a data point) and maps to its cluster and local position.
class NavGraphSnapshot {
 public:
  NavGraphSnapshot() { live_count().fetch_add(1); }
  NavGraphSnapshot(const NavGraphSnapshot& o)
      : version(o.version), bootstrap_size(o.bootstrap_size), params(o.params), nodes(o.nodes), graph(o.graph),
        by_vector_(o.by_vector_) {
    live_count().fetch_add(1);
  }
  NavGraphSnapshot& operator=(const NavGraphSnapshot&) = delete;
  ~NavGraphSnapshot() {
    canary_.store(kDead);
    live_count().fetch_sub(1);
  }

  std::uint64_t version = 0;
  std::size_t bootstrap_size = 0;
  GraphParams params;
  std::vector<NavNode> nodes;
  GraphData graph;

  std::size_t size() const { return nodes.size(); }
  std::size_t dim() const { return graph.points.cols; }
  bool alive() const { return canary_.load() == kAlive; }

  bool contains_vector(std::uint32_t vector_id) const { return by_vector_.count(vector_id) != 0; }
  std::uint32_t node_of_vector(std::uint32_t vector_id) const {
    auto it = by_vector_.find(vector_id);
    return it == by_vector_.end() ? kNone : it->second;
  }
  std::span<const float> vector(std::uint32_t node) const { return graph.points.row(node); }
  std::size_t protected_count() const {
    return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](auto& n) { return n.is_protected; }));
  }
  std::size_t memory_bytes() const {
    std::size_t b = graph.points.data.size() * sizeof(float) + nodes.size() * sizeof(NavNode);
    for (const auto& a : graph.adj) b += a.size() * sizeof(std::uint32_t);
    return b;
  }

  void reindex() {
    by_vector_.clear();
    for (std::uint32_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].vector_id != kNone) by_vector_[nodes[i].vector_id] = i;
  }

  /// Snapshots alive in this process; used to audit reclamation.
  static std::atomic<std::int64_t>& live_count() {
    static std::atomic<std::int64_t> n{0};
    return n;
  }

 private:
  static constexpr std::uint64_t kAlive = 0xA11CEull;
  static constexpr std::uint64_t kDead = 0xDEADull;
  std::atomic<std::uint64_t> canary_{kAlive};
  std::unordered_map<std::uint32_t, std::uint32_t> by_vector_;
};

using SnapshotPtr = std::shared_ptr<const NavGraphSnapshot>;

/// Single atomically swappable reference to the published snapshot. A
/// reader's copy keeps its version alive; the old version is released when
/// the last in-flight query holding it drops the reference.
class SnapshotSlot {
 public:
  explicit SnapshotSlot(SnapshotPtr initial = nullptr) : ptr_(std::move(initial)) {}
  SnapshotPtr load() const { return std::atomic_load_explicit(&ptr_, std::memory_order_acquire); }
  void publish(SnapshotPtr next) { std::atomic_store_explicit(&ptr_, std::move(next), std::memory_order_release); }

 private:
  SnapshotPtr ptr_;
};

// Bootstrap and traversal ----------------------------------------------------

struct NavParams {
  std::size_t samples_per_cluster = 8;
  GraphParams graph{16, 48, 1.2f, 99};
  std::size_t traverse_beam = 64;
  std::uint64_t seed = 17;
};

/// Version 0: all centroids plus up to s random members per cluster, all
/// protected.
inline std::shared_ptr<NavGraphSnapshot> bootstrap_ga(const ClusterPartition& partition, const VectorStore& store,
                                                      const NavParams& params) {
  auto snap = std::make_shared<NavGraphSnapshot>();
  snap->params = params.graph;
  const std::size_t d = partition.dim;
  Matrix<float> pts;
  pts.cols = d;
  for (std::uint32_t c = 0; c < partition.k; ++c) {
    snap->nodes.push_back({kNone, c, kNone, true});
    const auto row = partition.centroid(c);
    pts.data.insert(pts.data.end(), row.begin(), row.end());
  }
  std::vector<float> buf(d);
  for (std::uint32_t c = 0; c < partition.k; ++c) {
    const auto mem = partition.members(c);
    std::vector<std::uint32_t> pos(mem.size());
    std::iota(pos.begin(), pos.end(), 0u);
    const std::size_t take = std::min(params.samples_per_cluster, mem.size());
    std::mt19937_64 rng(params.seed * 1000003ull + c);
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pos.size() - 1);
      std::swap(pos[i], pos[pick(rng)]);
    }
    std::sort(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(take));
    for (std::size_t i = 0; i < take; ++i) {
      const auto id = mem[pos[i]];
      snap->nodes.push_back({id, c, pos[i], true});
      store.read(id, buf);
      pts.data.insert(pts.data.end(), buf.begin(), buf.end());
    }
  }
  pts.rows = snap->nodes.size();
  snap->graph = build_vamana(std::move(pts), params.graph);
  snap->bootstrap_size = snap->nodes.size();
  snap->reindex();
  return snap;
}

/// The nprobe nearest routing nodes to q, ascending by distance.
inline std::vector<NavSeed> traverse_ga(const NavGraphSnapshot& snap, std::span<const float> q, std::size_t nprobe,
                                        std::size_t beam = 64) {
  require(nprobe >= 1, ErrorCode::kInvalidArgument, "traverse_ga: nprobe must be positive");
  require(q.size() == snap.dim(), ErrorCode::kMismatch, "traverse_ga: dimension mismatch");
  std::vector<NavSeed> out;
  if (snap.size() == 0) return out;
  thread_local VisitedSet visited;
  auto res = beam_search(snap.graph, q.data(), snap.graph.entry, std::max(nprobe, beam), visited);
  const std::size_t m = std::min(nprobe, res.pool.size());
  out.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto node = res.pool[i].second;
    const auto& nn = snap.nodes[node];
    out.push_back({node, nn.vector_id, nn.cluster, nn.local_pos, res.pool[i].first, snap.vector(node)});
  }
  return out;
}

// Hot-region scoring --------------------------------------------------------------

/// Private per-worker statistics for one epoch.
struct WorkerStats {
  explicit WorkerStats(CountMinSketch sketch) : cms(std::move(sketch)) {}
  CountMinSketch cms;
  /// Largest convergence factor observed per vector this epoch.
  std::unordered_map<std::uint32_t, float> max_phi;
};

inline constexpr float kScanEpsilon = 0.01f;

/// Folds one local search trace into a worker's statistics. Graph visits
/// weigh by pop depth over the deepest pop; scan visits weigh 1 for final
/// top-k members and epsilon otherwise.
inline void record_trace(WorkerStats& stats, const VisitTrace& trace, const std::unordered_set<std::uint32_t>& final_topk,
                         float epsilon = kScanEpsilon) {
  for (const auto& v : trace.visits) {
    float phi = 0.0f;
    if (trace.type == IndexType::kGraph) {
      phi = trace.depth_max == 0 ? 0.0f : static_cast<float>(v.depth) / static_cast<float>(trace.depth_max);
    } else {
      phi = final_topk.count(v.vector_id) != 0 ? 1.0f : epsilon;
    }
    stats.cms.add(v.vector_id);
    auto [it, inserted] = stats.max_phi.try_emplace(v.vector_id, phi);
    if (!inserted) it->second = std::max(it->second, phi);
  }
}

/// Score(v) = frequency estimate at harvest time times the largest
/// convergence factor seen for v during the epoch.
struct HotScoreTable {
  std::unordered_map<std::uint32_t, double> score;

  bool empty() const { return score.empty(); }
  double of(std::uint32_t id) const {
    auto it = score.find(id);
    return it == score.end() ? 0.0 : it->second;
  }
};

inline HotScoreTable harvest_scores(std::span<const WorkerStats* const> retired) {
  HotScoreTable t;
  if (retired.empty()) return t;
  CountMinSketch merged = retired.front()->cms.empty_clone();
  std::unordered_map<std::uint32_t, float> phi;
  for (const auto* w : retired) {
    merged.merge(w->cms);
    for (const auto& [id, p] : w->max_phi) {
      auto [it, inserted] = phi.try_emplace(id, p);
      if (!inserted) it->second = std::max(it->second, p);
    }
  }
  for (const auto& [id, p] : phi) t.score[id] = static_cast<double>(merged.estimate(id)) * p;
  return t;
}

// Hot vector cache -------------------------------------------------------------------

/// Pinned raw records for hot vectors. Readers share a lock; recency is an
/// atomic tick per entry so lookups never need exclusive access.
class HotVectorCache {
 public:
  HotVectorCache(std::size_t budget_bytes, ElemKind kind, std::size_t dim)
      : budget_(budget_bytes), kind_(kind), dim_(dim) {}

  bool lookup(std::uint32_t id, std::span<float> out) const {
    std::shared_lock lock(mu_);
    auto it = entries_.find(id);
    if (it == entries_.end()) return false;
    it->second->last_use.store(tick_.fetch_add(1, std::memory_order_relaxed) + 1, std::memory_order_relaxed);
    const auto& rec = it->second->record;
    if (kind_ == ElemKind::kFloat32) {
      std::memcpy(out.data(), rec.data(), dim_ * sizeof(float));
    } else {
      for (std::size_t j = 0; j < dim_; ++j) out[j] = static_cast<float>(std::to_integer<std::uint8_t>(rec[j]));
    }
    return true;
  }

  std::vector<std::byte> record(std::uint32_t id) const {
    std::shared_lock lock(mu_);
    auto it = entries_.find(id);
    return it == entries_.end() ? std::vector<std::byte>{} : it->second->record;
  }

  void pin(std::uint32_t id, std::vector<std::byte> record) {
    std::unique_lock lock(mu_);
    if (record.size() > budget_) return;
    auto& slot = entries_[id];
    if (slot) bytes_ -= slot->record.size();
    slot = std::make_unique<Entry>();
    slot->record = std::move(record);
    slot->last_use.store(tick_.fetch_add(1) + 1);
    bytes_ += slot->record.size();
    while (bytes_ > budget_) evict_lru_locked(id);
  }

  void evict(std::uint32_t id) {
    std::unique_lock lock(mu_);
    auto it = entries_.find(id);
    if (it == entries_.end()) return;
    bytes_ -= it->second->record.size();
    entries_.erase(it);
  }

  bool contains(std::uint32_t id) const {
    std::shared_lock lock(mu_);
    return entries_.count(id) != 0;
  }
  std::size_t bytes() const {
    std::shared_lock lock(mu_);
    return bytes_;
  }
  std::size_t size() const {
    std::shared_lock lock(mu_);
    return entries_.size();
  }
  std::size_t budget() const { return budget_; }

 private:
  struct Entry {
    std::vector<std::byte> record;
    std::atomic<std::uint64_t> last_use{0};
  };

  void evict_lru_locked(std::uint32_t keep) {
    auto victim = entries_.end();
    std::uint64_t oldest = std::numeric_limits<std::uint64_t>::max();
    for (auto it = entries_.begin(); it != entries_.end(); ++it) {
      if (it->first == keep) continue;
      const auto t = it->second->last_use.load();
      if (t < oldest || (t == oldest && it->first < victim->first)) {
        oldest = t;
        victim = it;
      }
    }
    if (victim == entries_.end()) return;
    bytes_ -= victim->second->record.size();
    entries_.erase(victim);
  }

  std::size_t budget_;
  ElemKind kind_;
  std::size_t dim_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::uint32_t, std::unique_ptr<Entry>> entries_;
  mutable std::atomic<std::uint64_t> tick_{0};
  std::size_t bytes_ = 0;
};

// Epoch refresh ------------------------------------------------------------------

struct RefreshResult {
  std::shared_ptr<NavGraphSnapshot> snapshot;
  std::vector<std::uint32_t> inserted;  // H+
  std::vector<std::uint32_t> removed;   // H-
};

/// Bounded refresh: the unprotected part of the graph is re-selected as the
/// h hottest vectors among the current unprotected nodes and the scored
/// candidates, so at most h nodes enter and at most h leave per epoch.
/// The current snapshot is cloned, H- deleted, H+ inserted; the caller
/// publishes the result.
inline RefreshResult refresh_ga(const NavGraphSnapshot& current, const HotScoreTable& scores, std::size_t h,
                                const ClusterPartition& partition, const VectorStore& store) {
  RefreshResult res;
  res.snapshot = std::make_shared<NavGraphSnapshot>(current);
  res.snapshot->version = current.version + 1;
  if (scores.empty() || h == 0) return res;

  using Ranked = std::pair<double, std::uint32_t>;  // (score, vector id)
  auto hotter = [](const Ranked& a, const Ranked& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); };

  std::vector<Ranked> candidates;
  for (const auto& [id, s] : scores.score)
    if (!current.contains_vector(id) && s > 0.0) candidates.emplace_back(s, id);
  std::sort(candidates.begin(), candidates.end(), hotter);
  if (candidates.size() > h) candidates.resize(h);

  std::vector<Ranked> unprotected;
  for (const auto& n : current.nodes)
    if (!n.is_protected && n.vector_id != kNone) unprotected.emplace_back(scores.of(n.vector_id), n.vector_id);

  std::vector<Ranked> pool = unprotected;
  pool.insert(pool.end(), candidates.begin(), candidates.end());
  std::sort(pool.begin(), pool.end(), hotter);
  std::unordered_set<std::uint32_t> keep;
  for (std::size_t i = 0; i < std::min(h, pool.size()); ++i) keep.insert(pool[i].second);

  for (const auto& c : candidates)
    if (keep.count(c.second) != 0) res.inserted.push_back(c.second);
  std::vector<Ranked> cold;
  for (const auto& u : unprotected)
    if (keep.count(u.second) == 0) cold.push_back(u);
  std::sort(cold.begin(), cold.end(), [&](const Ranked& a, const Ranked& b) { return hotter(b, a); });
  if (cold.size() > h) cold.resize(h);
  for (const auto& c : cold) res.removed.push_back(c.second);

  auto& snap = *res.snapshot;
  if (!res.removed.empty()) {
    std::vector<bool> drop(snap.size(), false);
    for (auto id : res.removed) drop[snap.node_of_vector(id)] = true;
    const auto remap = graph_remove(snap.graph, drop, snap.params);
    std::vector<NavNode> kept;
    kept.reserve(snap.size());
    for (std::size_t i = 0; i < snap.nodes.size(); ++i)
      if (remap[i] != kNone) kept.push_back(snap.nodes[i]);
    snap.nodes = std::move(kept);
  }
  VisitedSet visited;
  std::vector<float> buf(store.dim());
  for (auto id : res.inserted) {
    store.read(id, buf);
    graph_insert(snap.graph, buf, snap.params, visited);
    snap.nodes.push_back({id, partition.assignment[id], partition.local_pos[id], false});
  }
  if (!res.inserted.empty()) ensure_connected(snap.graph, snap.params.max_degree);
  snap.reindex();
  return res;
}

// Serialization ----------------------------------------------------------------------

inline std::string ga_filename(std::uint64_t version) { return "ga_v" + std::to_string(version) + ".bin"; }

inline void save_snapshot(const std::string& path, const NavGraphSnapshot& s) {
  io::Writer w(path);
  w.put_bytes(kNavGraphMagic);
  w.put(s.version);
  w.put(static_cast<std::uint64_t>(s.bootstrap_size));
  w.put(static_cast<std::uint64_t>(s.size()));
  w.put(static_cast<std::uint64_t>(s.dim()));
  w.put(s.params.max_degree);
  w.put(s.params.build_beam);
  w.put(s.params.alpha);
  w.put(s.params.seed);
  w.put(s.graph.entry);
  for (const auto& n : s.nodes) {
    w.put(n.vector_id);
    w.put(n.cluster);
    w.put(n.local_pos);
    w.put(static_cast<std::uint8_t>(n.is_protected));
  }
  w.put_span(std::span<const float>(s.graph.points.data));
  for (const auto& a : s.graph.adj) {
    w.put(static_cast<std::uint32_t>(a.size()));
    w.put_span(std::span<const std::uint32_t>(a));
  }
  w.close();
}

inline std::shared_ptr<NavGraphSnapshot> load_snapshot(const std::string& path) {
  io::Reader r(path);
  r.expect_magic(kNavGraphMagic);
  auto s = std::make_shared<NavGraphSnapshot>();
  s->version = r.get<std::uint64_t>();
  s->bootstrap_size = r.get<std::uint64_t>();
  const auto n = r.get<std::uint64_t>();
  const auto d = r.get<std::uint64_t>();
  s->params.max_degree = r.get<std::uint32_t>();
  s->params.build_beam = r.get<std::uint32_t>();
  s->params.alpha = r.get<float>();
  s->params.seed = r.get<std::uint64_t>();
  s->graph.entry = r.get<std::uint32_t>();
  s->nodes.resize(n);
  for (auto& node : s->nodes) {
    node.vector_id = r.get<std::uint32_t>();
    node.cluster = r.get<std::uint32_t>();
    node.local_pos = r.get<std::uint32_t>();
    node.is_protected = r.get<std::uint8_t>() != 0;
  }
  s->graph.points = Matrix<float>{n, d, r.get_vec<float>(n * d)};
  s->graph.adj.resize(n);
  for (auto& a : s->graph.adj) {
    a = r.get_vec<std::uint32_t>(r.get<std::uint32_t>());
    for (auto x : a) require(x < n, ErrorCode::kFormat, "ga snapshot: neighbor out of range");
  }
  require(r.at_end(), ErrorCode::kFormat, "ga snapshot: trailing bytes");
  s->reindex();
  return s;
}

}  // namespace skewann
