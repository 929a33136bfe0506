#pragma once

#include <numeric>
#include <queue>
#include <random>

#include "skewann/distance.hpp"
#include "skewann/storage.hpp"

namespace skewann {

struct GraphParams {
  std::uint32_t max_degree = 32;  // R
  std::uint32_t build_beam = 64;  // L during construction
  float alpha = 1.2f;
  std::uint64_t seed = 7;
};

/// In-memory navigable graph over the rows of `points`. Shared by the
/// per-cluster graph index (built once, then frozen to disk) and the routing
/// graph (patched every epoch).
struct GraphData {
  Matrix<float> points;
  std::vector<std::vector<std::uint32_t>> adj;
  std::uint32_t entry = 0;

  std::size_t size() const { return points.rows; }
  const float* row(std::uint32_t i) const { return points.data.data() + static_cast<std::size_t>(i) * points.cols; }
};

/// Generation-stamped visited marks, reusable across searches without clearing.
class VisitedSet {
 public:
  void prepare(std::size_t n) {
    if (stamps_.size() < n) stamps_.resize(n, 0);
    if (++gen_ == 0) {
      std::fill(stamps_.begin(), stamps_.end(), 0);
      gen_ = 1;
    }
  }
  bool insert(std::uint32_t i) {
    if (stamps_[i] == gen_) return false;
    stamps_[i] = gen_;
    return true;
  }
  bool contains(std::uint32_t i) const { return stamps_[i] == gen_; }

 private:
  std::vector<std::uint32_t> stamps_;
  std::uint32_t gen_ = 0;
};

struct BeamResult {
  /// Best `beam` nodes found, ascending by distance.
  std::vector<std::pair<float, std::uint32_t>> pool;
  /// Expanded nodes in pop order.
  std::vector<std::pair<float, std::uint32_t>> expanded;
};

/// Best-first beam search over an in-memory graph, squared L2.
inline BeamResult beam_search(const GraphData& g, const float* q, std::uint32_t start, std::size_t beam,
                              VisitedSet& visited) {
  BeamResult r;
  if (g.size() == 0) return r;
  const std::size_t d = g.points.cols;
  visited.prepare(g.size());
  struct Cand {
    float dist;
    std::uint32_t id;
    bool expanded;
  };
  std::vector<Cand> pool;
  pool.reserve(beam + 1);
  visited.insert(start);
  pool.push_back({l2_sq(q, g.row(start), d), start, false});
  std::size_t cursor = 0;
  auto less = [](const Cand& a, const Cand& b) { return a.dist < b.dist || (a.dist == b.dist && a.id < b.id); };
  while (cursor < pool.size()) {
    Cand& c = pool[cursor];
    c.expanded = true;
    r.expanded.emplace_back(c.dist, c.id);
    const auto cur = c.id;
    std::size_t best_insert = pool.size();
    for (auto nb : g.adj[cur]) {
      if (!visited.insert(nb)) continue;
      Cand n{l2_sq(q, g.row(nb), d), nb, false};
      if (pool.size() >= beam && !less(n, pool.back())) continue;
      auto pos = std::lower_bound(pool.begin(), pool.end(), n, less);
      best_insert = std::min<std::size_t>(best_insert, static_cast<std::size_t>(pos - pool.begin()));
      pool.insert(pos, n);
      if (pool.size() > beam) pool.pop_back();
    }
    // next unexpanded
    std::size_t next = std::min(best_insert, cursor + 1);
    while (next < pool.size() && pool[next].expanded) ++next;
    cursor = next;
  }
  r.pool.reserve(pool.size());
  for (const auto& c : pool) r.pool.emplace_back(c.dist, c.id);
  return r;
}

namespace detail {

inline std::vector<std::uint32_t> robust_prune(const GraphData& g, std::uint32_t p,
                                               std::vector<std::pair<float, std::uint32_t>> cands, float alpha,
                                               std::size_t max_degree) {
  const std::size_t d = g.points.cols;
  std::sort(cands.begin(), cands.end());
  cands.erase(std::unique(cands.begin(), cands.end(),
                          [](const auto& a, const auto& b) { return a.second == b.second; }),
              cands.end());
  std::vector<std::uint32_t> out;
  std::vector<bool> removed(cands.size(), false);
  for (std::size_t i = 0; i < cands.size() && out.size() < max_degree; ++i) {
    if (removed[i] || cands[i].second == p) continue;
    const auto star = cands[i].second;
    out.push_back(star);
    for (std::size_t j = i + 1; j < cands.size(); ++j) {
      if (removed[j]) continue;
      const float djk = l2_sq(g.row(star), g.row(cands[j].second), d);
      if (alpha * djk <= cands[j].first) removed[j] = true;
    }
  }
  return out;
}

inline std::vector<std::pair<float, std::uint32_t>> with_distances(const GraphData& g, std::uint32_t p,
                                                                   std::span<const std::uint32_t> ids) {
  std::vector<std::pair<float, std::uint32_t>> v;
  v.reserve(ids.size());
  for (auto id : ids)
    if (id != p) v.emplace_back(l2_sq(g.row(p), g.row(id), g.points.cols), id);
  return v;
}

inline void add_reverse_edges(GraphData& g, std::uint32_t p, float alpha, std::size_t max_degree) {
  for (auto j : g.adj[p]) {
    auto& nj = g.adj[j];
    if (std::find(nj.begin(), nj.end(), p) != nj.end()) continue;
    if (nj.size() < max_degree) {
      nj.push_back(p);
    } else {
      std::vector<std::uint32_t> ids(nj.begin(), nj.end());
      ids.push_back(p);
      nj = robust_prune(g, j, with_distances(g, j, ids), alpha, max_degree);
    }
  }
}

inline std::uint32_t medoid(const Matrix<float>& pts) {
  std::vector<double> mean(pts.cols, 0.0);
  for (std::size_t i = 0; i < pts.rows; ++i)
    for (std::size_t t = 0; t < pts.cols; ++t) mean[t] += pts.data[i * pts.cols + t];
  std::vector<float> m(pts.cols);
  for (std::size_t t = 0; t < pts.cols; ++t) m[t] = static_cast<float>(mean[t] / static_cast<double>(pts.rows));
  std::uint32_t best = 0;
  float bd = std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < pts.rows; ++i) {
    const float di = l2_sq(m.data(), pts.data.data() + i * pts.cols, pts.cols);
    if (di < bd) {
      bd = di;
      best = static_cast<std::uint32_t>(i);
    }
  }
  return best;
}

}  // namespace detail

/// Nodes reachable from the entry point.
inline std::vector<bool> reachable_from_entry(const GraphData& g) {
  std::vector<bool> seen(g.size(), false);
  if (g.size() == 0) return seen;
  std::vector<std::uint32_t> stack{g.entry};
  seen[g.entry] = true;
  while (!stack.empty()) {
    const auto u = stack.back();
    stack.pop_back();
    for (auto v : g.adj[u])
      if (!seen[v]) {
        seen[v] = true;
        stack.push_back(v);
      }
  }
  return seen;
}

/// Links every unreachable node into the reachable set through the nearest
/// reachable node that still has a free slot.
inline void ensure_connected(GraphData& g, std::size_t max_degree) {
  const std::size_t n = g.size();
  if (n == 0) return;
  auto seen = reachable_from_entry(g);
  for (std::uint32_t u = 0; u < n; ++u) {
    if (seen[u]) continue;
    std::uint32_t best = kNone, fallback = kNone;
    float bd = std::numeric_limits<float>::infinity(), fd = bd;
    for (std::uint32_t w = 0; w < n; ++w) {
      if (!seen[w]) continue;
      const float dw = l2_sq(g.row(u), g.row(w), g.points.cols);
      if (g.adj[w].size() < max_degree && dw < bd) {
        bd = dw;
        best = w;
      }
      if (dw < fd) {
        fd = dw;
        fallback = w;
      }
    }
    if (best == kNone) {
      // every reachable node is full: replace the longest edge of the nearest one
      best = fallback;
      auto& nb = g.adj[best];
      auto far = std::max_element(nb.begin(), nb.end(), [&](auto a, auto b) {
        return l2_sq(g.row(best), g.row(a), g.points.cols) < l2_sq(g.row(best), g.row(b), g.points.cols);
      });
      *far = u;
      seen = reachable_from_entry(g);
      continue;
    }
    g.adj[best].push_back(u);
    std::vector<std::uint32_t> stack{u};
    seen[u] = true;
    while (!stack.empty()) {
      const auto x = stack.back();
      stack.pop_back();
      for (auto v : g.adj[x])
        if (!seen[v]) {
          seen[v] = true;
          stack.push_back(v);
        }
    }
  }
  // the fallback path may have cut a previously reachable node off
  seen = reachable_from_entry(g);
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) ensure_connected(g, max_degree);
}

/// Vamana-style construction: random regular init, then two greedy
/// refinement passes (alpha = 1, then the configured alpha).
inline GraphData build_vamana(Matrix<float> points, const GraphParams& params) {
  GraphData g;
  g.points = std::move(points);
  const std::size_t n = g.size();
  g.adj.assign(n, {});
  if (n == 0) return g;
  const std::size_t R = params.max_degree;
  require(R >= 1, ErrorCode::kInvalidArgument, "build_vamana: max_degree must be positive");
  std::mt19937_64 rng(params.seed);

  if (n - 1 <= R) {
    for (std::uint32_t i = 0; i < n; ++i)
      for (std::uint32_t j = 0; j < n; ++j)
        if (i != j) g.adj[i].push_back(j);
    g.entry = detail::medoid(g.points);
    return g;
  }

  for (std::uint32_t i = 0; i < n; ++i) {
    auto& nb = g.adj[i];
    std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(n - 1));
    while (nb.size() < std::min<std::size_t>(R, n - 1)) {
      const auto j = pick(rng);
      if (j != i && std::find(nb.begin(), nb.end(), j) == nb.end()) nb.push_back(j);
    }
  }
  g.entry = detail::medoid(g.points);

  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  VisitedSet visited;
  for (const float pass_alpha : {1.0f, params.alpha}) {
    for (auto p : order) {
      auto res = beam_search(g, g.row(p), g.entry, params.build_beam, visited);
      auto cands = std::move(res.expanded);
      for (auto j : g.adj[p]) cands.emplace_back(l2_sq(g.row(p), g.row(j), g.points.cols), j);
      g.adj[p] = detail::robust_prune(g, p, std::move(cands), pass_alpha, R);
      detail::add_reverse_edges(g, p, pass_alpha, R);
    }
  }
  ensure_connected(g, R);
  return g;
}

/// Appends one point and wires it in with the same greedy/prune rule.
inline std::uint32_t graph_insert(GraphData& g, std::span<const float> v, const GraphParams& params,
                                  VisitedSet& visited) {
  require(v.size() == g.points.cols || g.size() == 0, ErrorCode::kMismatch, "graph_insert: dimension mismatch");
  if (g.size() == 0) g.points.cols = v.size();
  const auto id = static_cast<std::uint32_t>(g.size());
  g.points.data.insert(g.points.data.end(), v.begin(), v.end());
  ++g.points.rows;
  g.adj.emplace_back();
  if (id == 0) {
    g.entry = 0;
    return id;
  }
  auto res = beam_search(g, g.row(id), g.entry, params.build_beam, visited);
  g.adj[id] = detail::robust_prune(g, id, std::move(res.expanded), params.alpha, params.max_degree);
  detail::add_reverse_edges(g, id, params.alpha, params.max_degree);
  return id;
}

/// Removes the given nodes, re-wiring their in-neighbors through the removed
/// nodes' out-lists, then compacts ids. Returns old->new id map (kNone for
/// removed nodes).
inline std::vector<std::uint32_t> graph_remove(GraphData& g, const std::vector<bool>& remove,
                                               const GraphParams& params) {
  const std::size_t n = g.size();
  for (std::uint32_t p = 0; p < n; ++p) {
    if (remove[p]) continue;
    auto& nb = g.adj[p];
    if (std::none_of(nb.begin(), nb.end(), [&](auto x) { return remove[x]; })) continue;
    std::vector<std::uint32_t> ids;
    for (auto x : nb) {
      if (!remove[x]) {
        ids.push_back(x);
        continue;
      }
      for (auto y : g.adj[x])
        if (!remove[y] && y != p) ids.push_back(y);
    }
    nb = detail::robust_prune(g, p, detail::with_distances(g, p, ids), params.alpha, params.max_degree);
  }
  std::vector<std::uint32_t> remap(n, kNone);
  std::uint32_t next = 0;
  for (std::uint32_t i = 0; i < n; ++i)
    if (!remove[i]) remap[i] = next++;
  GraphData out;
  out.points.cols = g.points.cols;
  out.points.rows = next;
  out.points.data.reserve(static_cast<std::size_t>(next) * g.points.cols);
  out.adj.reserve(next);
  for (std::uint32_t i = 0; i < n; ++i) {
    if (remove[i]) continue;
    out.points.data.insert(out.points.data.end(), g.row(i), g.row(i) + g.points.cols);
    std::vector<std::uint32_t> nb;
    for (auto x : g.adj[i])
      if (!remove[x]) nb.push_back(remap[x]);
    out.adj.push_back(std::move(nb));
  }
  out.entry = (g.entry < n && !remove[g.entry]) ? remap[g.entry] : (next > 0 ? detail::medoid(out.points) : 0);
  g = std::move(out);
  ensure_connected(g, params.max_degree);
  return remap;
}

}  // namespace skewann
