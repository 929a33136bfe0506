#pragma once

#include <condition_variable>
#include <deque>
#include <mutex>
#include <optional>

#include "skewann/navigation.hpp"

namespace skewann {

/// Patience n = ceil(rho * M) over M candidate clusters.
struct EarlyStopPolicy {
  double rho = 0.2;

  std::size_t patience(std::size_t m) const {
    require(rho > 0.0 && rho <= 1.0, ErrorCode::kInvalidArgument, "early stop: rho must be in (0, 1]");
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(rho * static_cast<double>(m) - 1e-12)));
  }
};

struct QueryOptions {
  std::size_t k = 10;
  std::size_t nprobe = 0;  // GA seeds; 0 means 4k
  std::size_t ga_beam = 64;
  EarlyStopPolicy policy;
  bool reorder = true;
  bool early_stop = true;
  bool pruning = true;
  std::size_t min_clusters = 0;
  std::size_t beam = 0;  // local graph pool; 0 means max(64, 2k)
  std::size_t max_hops = 0;
  std::size_t local_nprobe = 8;
  bool collect_traces = true;

  std::size_t seeds() const { return nprobe == 0 ? 4 * k : nprobe; }
  std::size_t local_beam() const { return beam == 0 ? std::max<std::size_t>(64, 2 * k) : beam; }
};

struct QueryStats {
  std::uint64_t snapshot_version = 0;
  double t_route = 0.0;
  double t_access = 0.0;  // summed over clusters, fetch time included
  double t_fetch = 0.0;
  double t_total = 0.0;
  std::size_t seeds = 0;
  std::size_t clusters_candidate = 0;
  std::size_t clusters_probed = 0;
  std::size_t clusters_skipped = 0;
  std::uint64_t rejected_by_bound = 0;
  std::uint64_t raw_fetches = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t pages_touched = 0;
  std::uint64_t device_reads = 0;
  bool snapshot_alive = true;
  std::vector<std::uint32_t> visit_order;
};

struct ClusterEvidence {
  std::uint32_t cluster = 0;
  std::uint32_t cp = 0;
  std::optional<NavSeed> seed;  // nearest seed in this cluster
  double order_dist = 0.0;      // squared distance used to break CP ties
};

struct QueryResult {
  std::vector<Neighbor> neighbors;  // ascending, squared L2
  QueryStats stats;
  std::vector<VisitTrace> traces;
};

/// Shared, read-only serving state. Indices are positional by cluster id.
struct EngineState {
  const VectorStore& store;
  const ClusterPartition& partition;
  const IndexPlan& plan;
  std::span<const LocalIndex> indices;
  const HotVectorCache* cache = nullptr;

  void validate() const {
    require(plan.choice.size() == partition.k, ErrorCode::kMismatch, "engine: plan does not match partition");
    require(indices.size() == partition.k, ErrorCode::kMismatch, "engine: index count does not match partition");
    require(store.dim() == partition.dim && store.count() == partition.n, ErrorCode::kMismatch,
            "engine: store does not match partition");
    for (std::uint32_t c = 0; c < partition.k; ++c) {
      require(indices[c].header.cluster_id == c && indices[c].type() == plan.choice[c] &&
                  indices[c].size() == partition.size(c),
              ErrorCode::kMismatch, "engine: local index " + std::to_string(c) + " does not match plan");
    }
  }
};

/// Groups seeds by cluster: CP counts and the nearest seed per cluster.
inline std::vector<ClusterEvidence> build_evidence(std::span<const NavSeed> seeds) {
  std::vector<ClusterEvidence> ev;
  std::unordered_map<std::uint32_t, std::size_t> slot;
  for (const auto& s : seeds) {
    auto [it, inserted] = slot.try_emplace(s.cluster, ev.size());
    if (inserted) ev.push_back({s.cluster, 0, s, s.dist_sq});
    auto& e = ev[it->second];
    ++e.cp;
    if (s.dist_sq < e.seed->dist_sq) {
      e.seed = s;
      e.order_dist = s.dist_sq;
    }
  }
  return ev;
}

/// Visit order: CP descending, then nearest seed ascending, then cluster id.
/// With reordering off the order is plain cluster id.
inline void order_clusters(std::vector<ClusterEvidence>& ev, bool reorder) {
  if (reorder) {
    std::sort(ev.begin(), ev.end(), [](const ClusterEvidence& a, const ClusterEvidence& b) {
      if (a.cp != b.cp) return a.cp > b.cp;
      if (a.order_dist != b.order_dist) return a.order_dist < b.order_dist;
      return a.cluster < b.cluster;
    });
  } else {
    std::sort(ev.begin(), ev.end(), [](const auto& a, const auto& b) { return a.cluster < b.cluster; });
  }
}

/// Route, reorder, search each cluster with the shared top-k, stop early.
inline QueryResult execute_query(const EngineState& state, const NavGraphSnapshot& snap, std::span<const float> q,
                                 const QueryOptions& opt, FetchCounters* external_counters = nullptr) {
  require(q.size() == state.partition.dim, ErrorCode::kMismatch, "execute_query: query dimension mismatch");
  require(snap.dim() == state.partition.dim, ErrorCode::kMismatch, "execute_query: snapshot does not match partition");
  Stopwatch total;
  QueryResult res;
  auto& st = res.stats;
  st.snapshot_version = snap.version;

  Stopwatch route;
  const auto seeds = traverse_ga(snap, q, opt.seeds(), std::max(opt.ga_beam, opt.seeds()));
  auto ev = build_evidence(seeds);
  if (ev.size() < opt.min_clusters) {
    for (auto c : assign_query_clusters(state.partition, q, std::min(opt.min_clusters, state.partition.k))) {
      if (std::any_of(ev.begin(), ev.end(), [c](const auto& e) { return e.cluster == c; })) continue;
      ev.push_back({c, 0, std::nullopt, l2_sq(q, state.partition.centroid(c))});
      if (ev.size() >= opt.min_clusters) break;
    }
  }
  order_clusters(ev, opt.reorder);
  st.t_route = route.seconds();
  st.seeds = seeds.size();
  st.clusters_candidate = ev.size();

  TopKQueue topk(opt.k);
  FetchContext ctx;
  FetchCounters local_counters;
  FetchCounters& counters = external_counters != nullptr ? *external_counters : local_counters;
  const auto before = counters;
  Fetcher::CacheLookup lookup;
  if (state.cache != nullptr) lookup = [cache = state.cache](std::uint32_t id, std::span<float> out) { return cache->lookup(id, out); };
  Fetcher fetcher(state.store, ctx, counters, lookup);

  SearchBudget budget;
  budget.beam = opt.local_beam();
  budget.max_hops = opt.max_hops;
  budget.pruning = opt.pruning;
  budget.local_nprobe = opt.local_nprobe;

  const std::size_t patience = opt.policy.patience(ev.size());
  std::size_t idle = 0;
  for (std::size_t i = 0; i < ev.size(); ++i) {
    const auto& e = ev[i];
    const auto& idx = state.indices[e.cluster];
    const double q_to_centroid = std::sqrt(static_cast<double>(l2_sq(q, state.partition.centroid(e.cluster))));
    VisitTrace trace{e.cluster, idx.type(), {}, 0};
    VisitTrace* tp = opt.collect_traces ? &trace : nullptr;
    const auto version = topk.version();
    Stopwatch access;
    switch (idx.type()) {
      case IndexType::kFlat:
        search_flat(idx, state.partition, q, q_to_centroid, topk, fetcher, opt.pruning, tp);
        break;
      case IndexType::kIvfFlat:
        search_ivfflat(idx, state.partition, q, q_to_centroid, opt.local_nprobe, topk, fetcher, opt.pruning, tp);
        break;
      case IndexType::kGraph: {
        GraphSeed gs;
        if (e.seed && e.seed->local_pos != kNone) gs = {e.seed->local_pos, e.seed->dist_sq};
        search_graph(idx, q, gs, budget, topk, fetcher, tp);
        break;
      }
    }
    st.t_access += access.seconds();
    ++st.clusters_probed;
    st.visit_order.push_back(e.cluster);
    if (opt.collect_traces) res.traces.push_back(std::move(trace));
    idle = topk.version() == version ? idle + 1 : 0;
    if (opt.early_stop && idle >= patience) {
      st.clusters_skipped = ev.size() - i - 1;
      break;
    }
  }

  res.neighbors = topk.entries();
  st.raw_fetches = counters.raw_fetches - before.raw_fetches;
  st.cache_hits = counters.cache_hits - before.cache_hits;
  st.rejected_by_bound = counters.rejected_by_bound - before.rejected_by_bound;
  st.t_fetch = counters.fetch_seconds - before.fetch_seconds;
  st.pages_touched = ctx.pages();
  st.device_reads = ctx.device_reads();
  st.snapshot_alive = snap.alive();
  st.t_total = total.seconds();
  return res;
}

// Evaluation ---------------------------------------------------------------------------

/// Mean over queries of |returned ∩ GT_k| / k.
inline double evaluate_recall(std::span<const std::vector<std::uint32_t>> results, const Matrix<std::int32_t>& gt,
                              std::size_t k) {
  require(k >= 1, ErrorCode::kInvalidArgument, "recall: k must be positive");
  require(gt.rows >= results.size(), ErrorCode::kInvalidArgument, "recall: missing ground truth rows");
  require(gt.cols >= k, ErrorCode::kInvalidArgument, "recall: ground truth has fewer than k neighbors");
  if (results.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto row = gt.row(i);
    std::unordered_set<std::uint32_t> truth(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k));
    std::size_t hit = 0;
    for (std::size_t j = 0; j < std::min(k, results[i].size()); ++j) hit += truth.count(results[i][j]);
    sum += static_cast<double>(hit) / static_cast<double>(k);
  }
  return sum / static_cast<double>(results.size());
}

inline std::vector<std::uint32_t> result_ids(const QueryResult& r) {
  std::vector<std::uint32_t> ids;
  ids.reserve(r.neighbors.size());
  for (const auto& n : r.neighbors) ids.push_back(n.id);
  return ids;
}

/// Clusters holding at least one of the first k ground-truth neighbors.
inline std::unordered_set<std::uint32_t> gt_clusters(const ClusterPartition& p, std::span<const std::int32_t> gt_row,
                                                     std::size_t k) {
  std::unordered_set<std::uint32_t> out;
  for (std::size_t j = 0; j < std::min(k, gt_row.size()); ++j) out.insert(p.assignment[static_cast<std::size_t>(gt_row[j])]);
  return out;
}

/// Fraction of probed clusters that hold a ground-truth neighbor.
inline double routing_precision(std::span<const std::uint32_t> probed, const std::unordered_set<std::uint32_t>& truth) {
  if (probed.empty()) return 0.0;
  std::size_t hit = 0;
  for (auto c : probed) hit += truth.count(c);
  return static_cast<double>(hit) / static_cast<double>(probed.size());
}

// Serving with epoch refresh ---------------------------------------------------------

struct ServeOptions {
  std::size_t workers = 1;
  std::size_t delta_q = 1000;
  std::size_t h = 0;  // 0 means 1% of bootstrap GA size, at least 1
  bool refresh = true;
  /// Run each refresh on the query thread at the boundary instead of the
  /// background updater. Deterministic with one worker.
  bool inline_refresh = false;
  std::size_t cms_width = 2048;
  std::size_t cms_depth = 4;
  std::uint64_t cms_seed = 0x5eed;
  float epsilon = kScanEpsilon;
  /// Keep every published snapshot so queries can be replayed per version.
  bool keep_history = false;
  QueryOptions query;
};

struct EpochEvent {
  std::uint64_t version = 0;
  std::size_t node_count = 0;
  std::size_t inserted = 0;
  std::size_t removed = 0;
  std::size_t cache_bytes = 0;
  std::size_t queries_completed = 0;
  std::optional<double> precision;  // mean routing precision of the epoch's queries
};

/// Runs a query batch on a pool of workers. Each worker records traces into
/// a private sketch; every delta_q completed queries the updater retires all
/// sketches, refreshes a clone of the GA and publishes it. Queries load the
/// published snapshot once and never wait on a refresh.
class QueryServer {
 public:
  QueryServer(const EngineState& state, SnapshotPtr initial, ServeOptions opt, HotVectorCache* cache = nullptr)
      : state_(state), slot_(initial), opt_(std::move(opt)), cache_(cache) {
    require(initial != nullptr, ErrorCode::kInvalidArgument, "QueryServer: no initial snapshot");
    require(opt_.delta_q >= 1, ErrorCode::kInvalidArgument, "QueryServer: delta_q must be positive");
    require(opt_.workers >= 1, ErrorCode::kInvalidArgument, "QueryServer: need at least one worker");
    state_.validate();
    if (cache_ != nullptr) state_.cache = cache_;
    if (opt_.h == 0) opt_.h = std::max<std::size_t>(1, initial->bootstrap_size / 100);
    bootstrap_size_ = initial->bootstrap_size;
    if (opt_.keep_history) history_.push_back(initial);
  }

  /// Optional ground truth enables per-epoch routing precision.
  void set_ground_truth(const Matrix<std::int32_t>* gt, std::size_t k) {
    gt_ = gt;
    gt_k_ = k;
  }

  std::vector<QueryResult> run(const Matrix<float>& queries) {
    const std::size_t nq = queries.rows;
    std::vector<QueryResult> results(nq);
    workers_.clear();
    for (std::size_t w = 0; w < opt_.workers; ++w) workers_.push_back(std::make_unique<Worker>(fresh_stats()));
    completed_ = 0;
    std::atomic<std::size_t> next{0};
    stop_ = false;
    std::thread updater;
    if (opt_.refresh && !opt_.inline_refresh) updater = std::thread([this] { updater_loop(); });

    Stopwatch wall;
    auto work = [&](std::size_t w) {
      auto& me = *workers_[w];
      while (true) {
        const auto i = next.fetch_add(1);
        if (i >= nq) break;
        const SnapshotPtr snap = slot_.load();
        results[i] = execute_query(state_, *snap, queries.row(i), opt_.query);
        after_query(me, i, results[i]);
      }
    };
    if (opt_.workers == 1) {
      work(0);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < opt_.workers; ++w) pool.emplace_back(work, w);
      for (auto& t : pool) t.join();
    }
    wall_seconds_ = wall.seconds();
    if (updater.joinable()) {
      {
        std::lock_guard lock(queue_mu_);
        stop_ = true;
      }
      queue_cv_.notify_all();
      updater.join();
    }
    return results;
  }

  SnapshotPtr current() const { return slot_.load(); }
  const std::vector<EpochEvent>& events() const { return events_; }
  std::size_t refreshes() const { return events_.size(); }
  double wall_seconds() const { return wall_seconds_; }
  std::size_t h() const { return opt_.h; }
  /// Snapshot with the given version, when history is kept.
  SnapshotPtr snapshot_version(std::uint64_t v) const {
    std::lock_guard lock(history_mu_);
    for (const auto& s : history_)
      if (s->version == v) return s;
    return nullptr;
  }

 private:
  struct Worker {
    explicit Worker(std::unique_ptr<WorkerStats> s) : stats(std::move(s)) {}
    std::mutex mu;
    std::unique_ptr<WorkerStats> stats;
  };

  std::unique_ptr<WorkerStats> fresh_stats() const {
    return std::make_unique<WorkerStats>(CountMinSketch(opt_.cms_width, opt_.cms_depth, opt_.cms_seed));
  }

  void after_query(Worker& me, std::size_t qi, const QueryResult& r) {
    if (opt_.refresh) {
      std::unordered_set<std::uint32_t> final_ids;
      for (const auto& n : r.neighbors) final_ids.insert(n.id);
      std::lock_guard lock(me.mu);
      for (const auto& t : r.traces) record_trace(*me.stats, t, final_ids, opt_.epsilon);
    }
    if (gt_ != nullptr) {
      const double p = routing_precision(r.stats.visit_order, gt_clusters(state_.partition, gt_->row(qi), gt_k_));
      std::lock_guard lock(precision_mu_);
      precision_sum_ += p;
      ++precision_n_;
    }
    const auto done = completed_.fetch_add(1) + 1;
    if (!opt_.refresh || done % opt_.delta_q != 0) return;
    if (opt_.inline_refresh) {
      do_refresh(done);
      return;
    }
    {
      std::lock_guard lock(queue_mu_);
      pending_.push_back(done);
    }
    queue_cv_.notify_one();
  }

  void updater_loop() {
    while (true) {
      std::size_t done = 0;
      {
        std::unique_lock lock(queue_mu_);
        queue_cv_.wait(lock, [this] { return stop_ || !pending_.empty(); });
        if (pending_.empty()) return;
        done = pending_.front();
        pending_.pop_front();
      }
      do_refresh(done);
    }
  }

  void do_refresh(std::size_t done) {
    std::lock_guard refresh_lock(refresh_mu_);
    std::vector<std::unique_ptr<WorkerStats>> retired;
    for (auto& w : workers_) {
      auto next = fresh_stats();
      std::lock_guard lock(w->mu);
      std::swap(next, w->stats);
      retired.push_back(std::move(next));
    }
    std::vector<const WorkerStats*> views;
    for (const auto& r : retired) views.push_back(r.get());
    const auto scores = harvest_scores(views);
    const SnapshotPtr cur = slot_.load();
    auto res = refresh_ga(*cur, scores, opt_.h, state_.partition, state_.store);
    if (cache_ != nullptr) {
      for (auto id : res.removed) cache_->evict(id);
      for (auto id : res.inserted) cache_->pin(id, state_.store.read_record(id));
    }
    EpochEvent ev;
    ev.version = res.snapshot->version;
    ev.node_count = res.snapshot->size();
    ev.inserted = res.inserted.size();
    ev.removed = res.removed.size();
    ev.cache_bytes = cache_ != nullptr ? cache_->bytes() : 0;
    ev.queries_completed = done;
    {
      std::lock_guard lock(precision_mu_);
      if (precision_n_ > 0) ev.precision = precision_sum_ / static_cast<double>(precision_n_);
      precision_sum_ = 0.0;
      precision_n_ = 0;
    }
    SnapshotPtr published = std::move(res.snapshot);
    if (opt_.keep_history) {
      std::lock_guard lock(history_mu_);
      history_.push_back(published);
    }
    slot_.publish(std::move(published));
    events_.push_back(ev);
  }

  EngineState state_;
  SnapshotSlot slot_;
  ServeOptions opt_;
  HotVectorCache* cache_;
  std::size_t bootstrap_size_ = 0;
  const Matrix<std::int32_t>* gt_ = nullptr;
  std::size_t gt_k_ = 10;

  std::vector<std::unique_ptr<Worker>> workers_;
  std::atomic<std::size_t> completed_{0};
  std::mutex queue_mu_;
  std::condition_variable queue_cv_;
  std::deque<std::size_t> pending_;
  bool stop_ = false;
  std::mutex refresh_mu_;
  std::mutex precision_mu_;
  double precision_sum_ = 0.0;
  std::size_t precision_n_ = 0;
  std::vector<EpochEvent> events_;
  mutable std::mutex history_mu_;
  std::vector<SnapshotPtr> history_;
  double wall_seconds_ = 0.0;
};

}  // namespace skewann
