// Command-line front end: dataset generation, ground truth, build, query,
// evaluation, epoch stats and the motivation experiments.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <sstream>

#include "skewann/datagen.hpp"
#include "skewann/pipeline.hpp"

using namespace skewann;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void usage_check(bool ok, const std::string& what) {
  if (!ok) throw UsageError(what);
}

std::size_t default_workers() {
  return std::clamp<std::size_t>(std::thread::hardware_concurrency(), 1, 48);
}

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot read " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[static_cast<std::size_t>(i)]);
      h *= 0x100000001b3ull;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + path);
  out << j.dump(2) << "\n";
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, path + ": " + e.what());
  }
}

/// Effective option values of a subcommand as key=value pairs.
json config_echo(const CLI::App& sub) {
  json cfg = json::object();
  std::istringstream in(sub.config_to_str(true, false));
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos || line[0] == '[' || line[0] == '#') continue;
    auto key = line.substr(0, eq);
    auto val = line.substr(eq + 1);
    key.erase(key.find_last_not_of(' ') + 1);
    val.erase(0, val.find_first_not_of(' '));
    if (val.size() >= 2 && val.front() == '"' && val.back() == '"') val = val.substr(1, val.size() - 2);
    if (key == "config") continue;
    cfg[key] = val;
  }
  return cfg;
}

Backing parse_backing(const std::string& s) {
  if (s == "mmap") return Backing::kMmap;
  if (s == "buffered") return Backing::kBuffered;
  return Backing::kDirect;
}

VectorStore open_input(const std::string& path) {
  require(fs::exists(path), ErrorCode::kIo, "no such file: " + path);
  if (io::has_magic(path, kRawMagic)) {
    io::Reader r(path);
    r.expect_magic(kRawMagic);
    r.get<std::uint32_t>();
    r.get<std::uint64_t>();
    const auto dim = r.get<std::uint32_t>();
    const auto kind = static_cast<ElemKind>(r.get<std::uint8_t>());
    return VectorStore::open(path, kind, dim, StoreFormat::kRaw);
  }
  const auto ext = fs::path(path).extension().string();
  const ElemKind kind = ext == ".bvecs" ? ElemKind::kUInt8 : ElemKind::kFloat32;
  std::ifstream in(path, std::ios::binary);
  std::int32_t d = 0;
  in.read(reinterpret_cast<char*>(&d), sizeof d);
  require(in.gcount() == sizeof d && d > 0, ErrorCode::kFormat, path + ": not a vecs file");
  return VectorStore::open(path, kind, static_cast<std::size_t>(d), StoreFormat::kVecs);
}

Matrix<float> load_matrix(const std::string& path) {
  const auto store = open_input(path);
  return Matrix<float>{store.count(), store.dim(), store.read_all()};
}

// Deployment loaded from a manifest ---------------------------------------------------------

struct Loaded {
  json manifest;
  fs::path root;
  std::unique_ptr<Deployment> dep;
};

Loaded load_manifest(const std::string& path, Backing backing, const std::string& ga_override = "") {
  Loaded l;
  l.manifest = read_json(path);
  l.root = fs::path(path).parent_path();
  const auto& m = l.manifest;
  require(m.value("format", "") == "skewann-manifest/1", ErrorCode::kFormat, path + ": not a build manifest");
  auto at = [&](const std::string& rel, std::string_view magic) {
    const auto p = (l.root / rel).string();
    require(io::has_magic(p, magic), ErrorCode::kFormat, p + ": missing or bad header");
    return p;
  };
  const std::size_t dim = m.at("dim");
  const auto store_path = at(m.at("store"), kRawMagic);
  std::optional<VectorStore> store;
  try {
    store.emplace(VectorStore::open(store_path, ElemKind::kFloat32, dim, StoreFormat::kRaw, backing));
  } catch (const Error& e) {
    if (backing != Backing::kDirect) throw;
    std::cerr << "note: direct I/O unavailable (" << e.what() << "), using mmap\n";
    store.emplace(VectorStore::open(store_path, ElemKind::kFloat32, dim, StoreFormat::kRaw, Backing::kMmap));
  }
  store->set_layout(load_layout(at(m.at("layout"), kLayoutMagic)));
  auto partition = load_partition(at(m.at("partition"), kPartitionMagic));
  auto plan = load_plan(at(m.at("plan"), kPlanMagic));
  std::vector<LocalIndex> indices;
  for (const auto& f : m.at("indices")) indices.push_back(load_local_index(at(f, kLocalIndexMagic)));
  const auto ga = ga_override.empty() ? at(m.at("ga"), kNavGraphMagic) : ga_override;
  require(io::has_magic(ga, kNavGraphMagic), ErrorCode::kFormat, ga + ": missing or bad header");
  SnapshotPtr snap = load_snapshot(ga);
  l.dep = std::make_unique<Deployment>(
      Deployment{std::move(*store), std::move(partition), std::move(plan), std::move(indices), std::move(snap)});
  l.dep->state().validate();
  return l;
}

// gen --------------------------------------------------------------------------------

struct GenArgs {
  std::string kind = "zipf-skewed";
  std::size_t n = 100000;
  std::size_t dim = 32;
  std::size_t queries = 1000;
  std::uint64_t seed = 1;
  std::uint64_t query_seed = 2;
  std::size_t centers = 64;
  double alpha = 1.2;
  float sigma = 1.0f;
  float spread = 10.0f;
  double decay = 1.0;
  std::size_t side = 4;
  std::string out;
};

int cmd_gen(const GenArgs& a, const CLI::App& sub) {
  usage_check(a.n >= 1 && a.dim >= 1, "gen: n and dim must be at least 1");
  usage_check(a.kind == "blobs" || a.kind == "zipf-skewed" || a.kind == "grid", "gen: unknown kind " + a.kind);
  fs::create_directories(a.out);
  Matrix<float> data, queries;
  if (a.kind == "zipf-skewed") {
    ZipfParams p{a.centers, a.alpha, a.sigma, a.spread, a.decay};
    data = gen_zipf(a.n, a.dim, p, a.seed);
    queries = gen_zipf_queries(a.queries, a.dim, p, a.seed, a.query_seed);
  } else if (a.kind == "blobs") {
    data = gen_blobs(a.n, a.dim, BlobParams{a.centers, a.sigma, a.spread}, a.seed);
    // queries: random data points plus blob-scale noise
    std::mt19937_64 rng(a.query_seed);
    std::normal_distribution<float> noise(0.0f, std::max(a.sigma, 1e-6f));
    queries = Matrix<float>{a.queries, a.dim, std::vector<float>(a.queries * a.dim)};
    for (std::size_t i = 0; i < a.queries; ++i) {
      const auto src = data.row(rng() % data.rows);
      for (std::size_t j = 0; j < a.dim; ++j) queries.row(i)[j] = src[j] + (a.sigma > 0 ? noise(rng) : 0.0f);
    }
  } else {
    data = gen_grid(a.side, a.dim);
    std::mt19937_64 rng(a.query_seed);
    std::uniform_real_distribution<float> u(0.0f, static_cast<float>(a.side - 1));
    queries = Matrix<float>{a.queries, a.dim, std::vector<float>(a.queries * a.dim)};
    for (auto& x : queries.data) x = u(rng);
  }
  const auto base = (fs::path(a.out) / "base.fvecs").string();
  const auto qf = (fs::path(a.out) / "queries.fvecs").string();
  write_fvecs(base, data);
  write_fvecs(qf, queries);
  json meta{{"kind", a.kind}, {"n", data.rows}, {"dim", data.cols}, {"queries", queries.rows},
            {"base", "base.fvecs"}, {"query_file", "queries.fvecs"}, {"config", config_echo(sub)}};
  write_json((fs::path(a.out) / "meta.json").string(), meta);
  std::cout << json{{"base", base}, {"queries", qf}, {"n", data.rows}, {"dim", data.cols}}.dump() << "\n";
  return 0;
}

// groundtruth -------------------------------------------------------------------------

int cmd_groundtruth(const std::string& base, const std::string& queries, std::size_t k, std::size_t workers,
                    const std::string& out) {
  const auto data = load_matrix(base);
  const auto qs = load_matrix(queries);
  usage_check(k >= 1, "groundtruth: k must be at least 1");
  usage_check(k <= data.rows, "groundtruth: k exceeds the number of base vectors");
  require(qs.cols == data.cols, ErrorCode::kMismatch, "groundtruth: query and base dimensions differ");
  write_ivecs(out, brute_force_knn(data, qs, k, workers));
  return 0;
}

// build --------------------------------------------------------------------------------

struct BuildArgs {
  std::string base;
  std::string out;
  std::size_t k = 64;
  std::size_t iters = 15;
  std::uint64_t seed = 3;
  double budget_mb = 0.0;  // 0: unlimited
  std::string fixed_profile;
  std::string weights;
  std::vector<std::string> types;
  std::uint32_t max_degree = 32;
  std::uint32_t build_beam = 64;
  float graph_alpha = 1.2f;
  std::uint32_t nlist_max = 1024;
  std::size_t samples = 8;
  std::size_t workers = default_workers();
  double rho_cache = 0.1;
  std::uint64_t b_buf = 1 << 20;
  std::uint32_t local_nprobe = 8;
};

int cmd_build(const BuildArgs& a, const CLI::App& sub) {
  usage_check(a.k >= 1 && a.iters >= 1, "build: k and iters must be at least 1");
  usage_check(a.budget_mb >= 0.0, "build: budget must be non-negative");
  json stamps;
  stamps["started"] = now_iso();
  const fs::path out(a.out);
  fs::create_directories(out / "indices");

  const auto input = open_input(a.base);
  const Matrix<float> data{input.count(), input.dim(), input.read_all()};
  usage_check(a.k <= data.rows, "build: k exceeds the number of base vectors");
  const auto base_copy = (out / "base.orcv").string();
  write_raw_store(base_copy, data);
  const auto base = VectorStore::open(base_copy, ElemKind::kFloat32, data.cols, StoreFormat::kRaw);

  const auto partition = partition_from_matrix(data, a.k, a.iters, a.seed, a.workers);
  save_partition((out / "partition.bin").string(), partition);
  stamps["partitioned"] = now_iso();

  HardwareProfile profile;
  if (!a.fixed_profile.empty()) {
    profile = load_profile(a.fixed_profile);
  } else {
    CalibrationOptions co;
    co.scratch_dir = out.string();
    co.dim = data.cols;
    co.max_degree = a.max_degree;
    co.rho_cache = a.rho_cache;
    co.b_buf = static_cast<double>(a.b_buf);
    co.nlist_max = a.nlist_max;
    co.local_nprobe = a.local_nprobe;
    profile = calibrate(co);
  }
  save_profile((out / "profile.txt").string(), profile);
  stamps["profiled"] = now_iso();

  std::vector<double> weights;
  if (!a.weights.empty()) {
    std::ifstream in(a.weights);
    require(static_cast<bool>(in), ErrorCode::kIo, "cannot read " + a.weights);
    for (double w; in >> w;) weights.push_back(w);
    require(weights.size() == a.k, ErrorCode::kMismatch, "build: weight file must hold one weight per cluster");
  }
  PlanOptions po;
  if (a.budget_mb > 0.0) po.budget = static_cast<std::uint64_t>(a.budget_mb * 1e6);
  for (const auto& t : a.types) po.allowed.push_back(index_type_from_string(t));
  const auto plan = solve_plan(profile, partition, weights, po);
  save_plan((out / "plan.bin").string(), plan);
  stamps["planned"] = now_iso();

  LocalBuildParams lp;
  lp.graph.max_degree = a.max_degree;
  lp.graph.build_beam = a.build_beam;
  lp.graph.alpha = a.graph_alpha;
  lp.nlist_max = a.nlist_max;
  const auto indices = build_indices(base, partition, plan, lp, a.workers);
  std::vector<std::string> index_files;
  for (std::uint32_t c = 0; c < partition.k; ++c) {
    const auto rel = "indices/" + local_index_filename(c);
    save_local_index((out / rel).string(), indices[c]);
    index_files.push_back(rel);
  }
  const auto slot_of = write_reordered_store((out / "store.orcv").string(), base,
                                             cluster_layout_order(partition, indices));
  save_layout((out / "layout.bin").string(), slot_of);
  stamps["indexed"] = now_iso();

  NavParams np;
  np.samples_per_cluster = a.samples;
  const auto snap = bootstrap_ga(partition, base, np);
  save_snapshot((out / ga_filename(0)).string(), *snap);
  fs::remove(base_copy);
  stamps["finished"] = now_iso();

  std::size_t counts[3] = {0, 0, 0};
  for (auto t : plan.choice) ++counts[static_cast<int>(t)];
  json m;
  m["format"] = "skewann-manifest/1";
  m["dataset"] = fs::absolute(a.base).string();
  m["n"] = data.rows;
  m["dim"] = data.cols;
  m["k"] = partition.k;
  m["store"] = "store.orcv";
  m["layout"] = "layout.bin";
  m["partition"] = "partition.bin";
  m["plan"] = "plan.bin";
  m["profile"] = "profile.txt";
  m["indices"] = index_files;
  m["ga"] = ga_filename(0);
  m["plan_summary"] = {{"flat", counts[0]},
                       {"graph", counts[1]},
                       {"ivfflat", counts[2]},
                       {"predicted_memory_bytes", plan.total_memory},
                       {"objective_seconds", plan.objective},
                       {"ga_nodes", snap->size()}};
  json sums = json::object();
  for (const std::string f : {"store.orcv", "layout.bin", "partition.bin", "plan.bin", "profile.txt"})
    sums[f] = fnv1a_file((out / f).string());
  for (const auto& f : index_files) sums[f] = fnv1a_file((out / f).string());
  sums[ga_filename(0)] = fnv1a_file((out / ga_filename(0)).string());
  m["checksums"] = sums;
  m["config"] = config_echo(sub);
  {
    std::ofstream cfg(out / "config.txt");
    for (const auto& [key, value] : m["config"].items()) cfg << key << '=' << value.get<std::string>() << '\n';
  }
  m["config_file"] = "config.txt";
  m["build_timestamps"] = stamps;
  write_json((out / "manifest.json").string(), m);
  std::cout << json{{"manifest", (out / "manifest.json").string()}, {"plan", m["plan_summary"]}}.dump() << "\n";
  return 0;
}

// query -------------------------------------------------------------------------------

struct QueryArgs {
  std::string manifest;
  std::string queries;
  std::string ga;
  std::string gt;
  std::size_t k = 10;
  std::size_t nprobe = 0;
  std::size_t ga_beam = 64;
  double rho = 0.2;
  std::size_t delta_q = 1000;
  std::size_t h = 0;
  bool reorder = true;
  bool early_stop = true;
  bool pruning = true;
  bool ga_refresh = true;
  std::size_t min_clusters = 0;
  std::size_t beam = 0;
  std::size_t local_nprobe = 8;
  std::size_t workers = default_workers();
  double cache_mb = 64.0;
  std::string backing = "direct";
  std::string results;
  std::string stats;
  std::string events;
  std::string summary;
  std::string save_ga;
  std::string weights_out;
};

QueryOptions query_options(const QueryArgs& a) {
  usage_check(a.k >= 1, "query: k must be at least 1");
  usage_check(a.rho > 0.0 && a.rho <= 1.0, "query: rho must be in (0, 1]");
  QueryOptions o;
  o.k = a.k;
  o.nprobe = a.nprobe;
  o.ga_beam = a.ga_beam;
  o.policy.rho = a.rho;
  o.reorder = a.reorder;
  o.early_stop = a.early_stop;
  o.pruning = a.pruning;
  o.min_clusters = a.min_clusters;
  o.beam = a.beam;
  o.local_nprobe = a.local_nprobe;
  return o;
}

json event_json(const EpochEvent& e) {
  json j{{"version", e.version},   {"node_count", e.node_count},   {"inserted", e.inserted},
         {"removed", e.removed},   {"cache_bytes", e.cache_bytes}, {"queries_completed", e.queries_completed}};
  j["precision"] = e.precision ? json(*e.precision) : json(nullptr);
  return j;
}

int cmd_query(const QueryArgs& a, const CLI::App& sub) {
  usage_check(a.delta_q >= 1, "query: delta-q must be at least 1");
  usage_check(a.workers >= 1, "query: workers must be at least 1");
  const auto opt = query_options(a);
  auto l = load_manifest(a.manifest, parse_backing(a.backing), a.ga);
  auto& dep = *l.dep;
  const auto qs = load_matrix(a.queries);
  require(qs.cols == dep.partition.dim, ErrorCode::kMismatch, "query: query dimension does not match the build");
  Matrix<std::int32_t> gt;
  if (!a.gt.empty()) gt = read_ivecs(a.gt);

  std::unique_ptr<HotVectorCache> cache;
  if (a.cache_mb > 0.0)
    cache = std::make_unique<HotVectorCache>(static_cast<std::size_t>(a.cache_mb * (1 << 20)), ElemKind::kFloat32,
                                             dep.partition.dim);
  ServeOptions so;
  so.workers = a.workers;
  so.delta_q = a.delta_q;
  so.h = a.h;
  so.refresh = a.ga_refresh;
  so.query = opt;
  QueryServer server(dep.state(), dep.snapshot, so, cache.get());
  if (!gt.data.empty()) {
    require(gt.rows >= qs.rows && gt.cols >= a.k, ErrorCode::kMismatch, "query: ground truth too small");
    server.set_ground_truth(&gt, a.k);
  }
  const auto res = server.run(qs);

  if (!a.results.empty()) {
    std::ofstream out(a.results);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + a.results);
    out << "query_id,rank,vector_id,distance\n" << std::setprecision(9);
    for (std::size_t i = 0; i < res.size(); ++i)
      for (std::size_t r = 0; r < res[i].neighbors.size(); ++r)
        out << i << ',' << r << ',' << res[i].neighbors[r].id << ','
            << std::sqrt(static_cast<double>(res[i].neighbors[r].distance)) << '\n';
  }
  if (!a.stats.empty()) {
    std::ofstream out(a.stats);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + a.stats);
    for (std::size_t i = 0; i < res.size(); ++i) {
      const auto& s = res[i].stats;
      out << json{{"query_id", i},
                  {"snapshot_version", s.snapshot_version},
                  {"t_route", s.t_route},
                  {"t_access", s.t_access},
                  {"t_fetch", s.t_fetch},
                  {"t_total", s.t_total},
                  {"seeds", s.seeds},
                  {"clusters_candidate", s.clusters_candidate},
                  {"clusters_probed", s.clusters_probed},
                  {"clusters_skipped", s.clusters_skipped},
                  {"rejected_by_bound", s.rejected_by_bound},
                  {"raw_fetches", s.raw_fetches},
                  {"cache_hits", s.cache_hits},
                  {"pages_touched", s.pages_touched},
                  {"device_reads", s.device_reads}}
                 .dump()
          << '\n';
    }
  }
  if (!a.events.empty()) {
    std::ofstream out(a.events);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + a.events);
    for (const auto& e : server.events()) out << event_json(e).dump() << '\n';
  }
  if (!a.save_ga.empty()) {
    fs::create_directories(a.save_ga);
    const auto cur = server.current();
    save_snapshot((fs::path(a.save_ga) / ga_filename(cur->version)).string(), *cur);
  }
  if (!a.weights_out.empty()) {
    std::vector<std::size_t> visits(dep.partition.k, 0);
    for (const auto& r : res)
      for (auto c : r.stats.visit_order) ++visits[c];
    std::ofstream out(a.weights_out);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + a.weights_out);
    for (auto v : visits) out << (static_cast<double>(v) + 1.0) / static_cast<double>(res.size() + 1) << '\n';
  }

  double fetches = 0.0;
  for (const auto& r : res) fetches += static_cast<double>(r.stats.raw_fetches);
  json summary{{"queries", res.size()},
               {"workers", a.workers},
               {"wall_seconds", server.wall_seconds()},
               {"qps", static_cast<double>(res.size()) / server.wall_seconds()},
               {"mean_raw_fetches", res.empty() ? 0.0 : fetches / static_cast<double>(res.size())},
               {"refreshes", server.refreshes()},
               {"final_ga_version", server.current()->version},
               {"config", config_echo(sub)}};
  if (!gt.data.empty()) {
    std::vector<std::vector<std::uint32_t>> ids;
    for (const auto& r : res) ids.push_back(result_ids(r));
    summary["recall"] = evaluate_recall(ids, gt, a.k);
  }
  if (!a.summary.empty()) write_json(a.summary, summary);
  summary.erase("config");
  std::cout << summary.dump() << "\n";
  return 0;
}

// eval --------------------------------------------------------------------------------

int cmd_eval(const std::string& results, const std::string& gt_path, std::vector<std::size_t> ks,
             const std::string& stats, const std::string& summary, const std::string& out_path) {
  const auto gt = read_ivecs(gt_path);
  std::ifstream in(results);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot read " + results);
  std::string line;
  std::getline(in, line);
  require(line == "query_id,rank,vector_id,distance", ErrorCode::kFormat, results + ": unexpected header");
  std::vector<std::vector<std::uint32_t>> ids;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t q = 0, rank = 0;
    std::uint32_t id = 0;
    char c1 = 0, c2 = 0;
    ls >> q >> c1 >> rank >> c2 >> id;
    require(static_cast<bool>(ls) && c1 == ',' && c2 == ',', ErrorCode::kFormat, results + ": bad line " + line);
    if (ids.size() <= q) ids.resize(q + 1);
    require(ids[q].size() == rank, ErrorCode::kFormat, results + ": ranks out of order for query " + std::to_string(q));
    ids[q].push_back(id);
  }
  require(gt.rows >= ids.size(), ErrorCode::kMismatch, "eval: ground truth has fewer queries than the results");

  std::vector<double> lat;
  double fetches = 0.0, pages = 0.0;
  if (!stats.empty()) {
    std::ifstream s(stats);
    require(static_cast<bool>(s), ErrorCode::kIo, "cannot read " + stats);
    for (std::string l; std::getline(s, l);) {
      if (l.empty()) continue;
      const auto j = json::parse(l);
      lat.push_back(j.at("t_total").get<double>());
      fetches += j.at("raw_fetches").get<double>();
      pages += j.at("pages_touched").get<double>();
    }
  }
  const double nq = static_cast<double>(ids.size());
  double mean_lat = 0.0, p99 = 0.0, qps = 0.0;
  if (!lat.empty()) {
    mean_lat = std::accumulate(lat.begin(), lat.end(), 0.0) / static_cast<double>(lat.size());
    auto sorted = lat;
    std::sort(sorted.begin(), sorted.end());
    p99 = sorted[std::min(sorted.size() - 1, static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(sorted.size()))) - 1)];
    qps = 1.0 / mean_lat;
  }
  if (!summary.empty()) qps = read_json(summary).at("qps").get<double>();

  std::ostringstream os;
  os << "k,queries,recall,qps,mean_latency_ms,p99_latency_ms,mean_raw_fetches,mean_pages_touched\n";
  for (auto k : ks) {
    usage_check(k >= 1 && k <= static_cast<std::size_t>(gt.cols), "eval: k out of range for the ground truth");
    os << k << ',' << ids.size() << ',' << evaluate_recall(ids, gt, k) << ',' << qps << ',' << mean_lat * 1e3 << ','
       << p99 * 1e3 << ',' << (lat.empty() ? 0.0 : fetches / nq) << ',' << (lat.empty() ? 0.0 : pages / nq) << '\n';
  }
  if (out_path.empty()) {
    std::cout << os.str();
  } else {
    std::ofstream out(out_path);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + out_path);
    out << os.str();
  }
  return 0;
}

// stats ------------------------------------------------------------------------------

int cmd_stats(const std::string& manifest, const std::string& events) {
  const auto l = load_manifest(manifest, Backing::kMmap);
  const auto& dep = *l.dep;
  const auto skew = skew_report(dep.partition);
  std::cout << json{{"n", dep.partition.n},
                    {"dim", dep.partition.dim},
                    {"k", dep.partition.k},
                    {"plan", l.manifest.at("plan_summary")},
                    {"cluster_size", {{"min", skew.min}, {"max", skew.max}, {"mean", skew.mean}, {"std", skew.std}}},
                    {"ga", {{"version", dep.snapshot->version},
                            {"node_count", dep.snapshot->size()},
                            {"protected", dep.snapshot->protected_count()},
                            {"bytes", dep.snapshot->memory_bytes()}}}}
                   .dump()
            << "\n";
  if (!events.empty()) {
    std::ifstream in(events);
    require(static_cast<bool>(in), ErrorCode::kIo, "cannot read " + events);
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      std::cout << json{{"version", j.at("version")},     {"node_count", j.at("node_count")},
                        {"inserted", j.at("inserted")},   {"removed", j.at("removed")},
                        {"cache_bytes", j.at("cache_bytes")}, {"precision", j.value("precision", json(nullptr))}}
                       .dump()
                << "\n";
    }
  }
  return 0;
}

// motivate ---------------------------------------------------------------------------

struct MotivateArgs {
  std::string experiment;
  std::string manifest;
  std::string queries;
  std::string gt;
  std::size_t k = 10;
  std::vector<std::size_t> nprobes{1, 2, 4, 8, 16, 32, 64};
  std::size_t warmup = 0;  // 0: half the queries
  std::size_t delta_q = 200;
  std::string backing = "mmap";
  std::string out;
};

int cmd_motivate(const MotivateArgs& a) {
  std::ostringstream os;
  auto l = load_manifest(a.manifest, parse_backing(a.backing));
  auto& dep = *l.dep;
  if (a.experiment == "skew") {
    auto sizes = dep.partition.sizes();
    std::vector<std::uint32_t> order(sizes.size());
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return sizes[x] > sizes[y]; });
    os << "rank,cluster_id,size\n";
    for (std::size_t r = 0; r < order.size(); ++r) os << r << ',' << order[r] << ',' << sizes[order[r]] << '\n';
  } else {
    usage_check(!a.gt.empty(), "motivate: --gt is required for " + a.experiment);
    const auto gt = read_ivecs(a.gt);
    usage_check(a.k >= 1 && a.k <= static_cast<std::size_t>(gt.cols), "motivate: k out of range for the ground truth");
    if (a.experiment == "gt-clusters") {
      os << "query_id,gt_clusters,gt_cluster_pct\n";
      for (std::size_t i = 0; i < gt.rows; ++i) {
        const auto c = gt_clusters(dep.partition, gt.row(i), a.k).size();
        os << i << ',' << c << ',' << 100.0 * static_cast<double>(c) / static_cast<double>(dep.partition.k) << '\n';
      }
    } else {
      usage_check(!a.queries.empty(), "motivate: --queries is required for routing");
      const auto qs = load_matrix(a.queries);
      require(gt.rows >= qs.rows, ErrorCode::kMismatch, "motivate: ground truth has fewer rows than queries");
      const std::size_t warm = a.warmup == 0 ? qs.rows / 2 : std::min(a.warmup, qs.rows - 1);
      auto rows = [&](std::size_t from, std::size_t to) {
        Matrix<float> m{to - from, qs.cols, {}};
        m.data.assign(qs.data.begin() + static_cast<std::ptrdiff_t>(from * qs.cols),
                      qs.data.begin() + static_cast<std::ptrdiff_t>(to * qs.cols));
        return m;
      };
      const auto warm_q = rows(0, warm);
      const auto eval_q = rows(warm, qs.rows);
      Matrix<std::int32_t> eval_gt{eval_q.rows, gt.cols, {}};
      eval_gt.data.assign(gt.data.begin() + static_cast<std::ptrdiff_t>(warm * gt.cols),
                          gt.data.begin() + static_cast<std::ptrdiff_t>(qs.rows * gt.cols));

      NavParams centroid_only;
      centroid_only.samples_per_cluster = 0;
      const SnapshotPtr centroids = bootstrap_ga(dep.partition, dep.store, centroid_only);
      ServeOptions so;
      so.delta_q = a.delta_q;
      so.inline_refresh = true;
      so.query.k = a.k;
      QueryServer warmup(dep.state(), dep.snapshot, so);
      warmup.run(warm_q);
      const std::vector<std::pair<std::string, SnapshotPtr>> routers{
          {"centroid", centroids}, {"sample", dep.snapshot}, {"query-aware", warmup.current()}};

      os << "router,nprobe,recall,qps,mean_clusters_probed,mean_raw_fetches\n";
      for (const auto& [name, snap] : routers)
        for (auto np : a.nprobes) {
          QueryOptions o;
          o.k = a.k;
          o.nprobe = std::min(np, snap->size());
          o.collect_traces = false;
          std::vector<std::vector<std::uint32_t>> ids;
          double probed = 0.0, fetched = 0.0;
          Stopwatch sw;
          for (std::size_t i = 0; i < eval_q.rows; ++i) {
            const auto r = execute_query(dep.state(), *snap, eval_q.row(i), o);
            ids.push_back(result_ids(r));
            probed += static_cast<double>(r.stats.clusters_probed);
            fetched += static_cast<double>(r.stats.raw_fetches);
          }
          const double t = sw.seconds();
          const double nq = static_cast<double>(eval_q.rows);
          os << name << ',' << np << ',' << evaluate_recall(ids, eval_gt, a.k) << ',' << nq / t << ',' << probed / nq
             << ',' << fetched / nq << '\n';
        }
    }
  }
  if (a.out.empty()) {
    std::cout << os.str();
  } else {
    std::ofstream out(a.out);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + a.out);
    out << os.str();
  }
  return 0;
}

/// Expands `<command> --config FILE` into --key=value arguments placed before
/// the explicit ones, so flags given on the command line take precedence.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  auto it = std::find(args.begin(), args.end(), "--config");
  if (it == args.end()) return args;
  usage_check(it != args.begin() && it + 1 != args.end(), "--config takes a file and follows the command");
  const std::string path = *(it + 1);
  args.erase(it, it + 2);
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot read " + path);
  std::vector<std::string> extra;
  for (const auto& [key, raw] : parse_key_values(in, path)) {
    const bool given = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == "--" + key || a.rfind("--" + key + "=", 0) == 0 || a == "--no-" + key;
    });
    if (given) continue;
    std::string value = raw;
    if (!value.empty() && (value.front() == '[' || value.front() == '{')) {
      // list values: [a, b] or {} as echoed into manifests, or space separated
      for (auto& ch : value)
        if (ch == '[' || ch == ']' || ch == '{' || ch == '}' || ch == ',' || ch == '"') ch = ' ';
    }
    std::istringstream parts(value);
    std::vector<std::string> items{std::istream_iterator<std::string>(parts), std::istream_iterator<std::string>()};
    if (items.empty()) continue;  // empty value or list keeps the default
    if (items.size() <= 1) {
      extra.push_back("--" + key + "=" + value);
    } else {
      for (const auto& item : items) extra.push_back("--" + key + "=" + item);
    }
  }
  args.insert(args.begin() + 1, extra.begin(), extra.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"skewann: out-of-core vector search over skewed data"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a synthetic dataset and queries");
  g->add_option("--kind", gen.kind, "blobs, zipf-skewed or grid")->check(CLI::IsMember({"blobs", "zipf-skewed", "grid"}));
  g->add_option("--n", gen.n, "number of base vectors (ignored for grid)");
  g->add_option("--dim", gen.dim);
  g->add_option("--queries", gen.queries);
  g->add_option("--seed", gen.seed);
  g->add_option("--query-seed", gen.query_seed);
  g->add_option("--centers", gen.centers);
  g->add_option("--alpha", gen.alpha, "zipf exponent of center populations");
  g->add_option("--sigma", gen.sigma);
  g->add_option("--spread", gen.spread);
  g->add_option("--decay", gen.decay, "per-axis scale decay, 1 = isotropic");
  g->add_option("--side", gen.side, "grid points per axis");
  g->add_option("--out", gen.out)->required();

  std::string gt_base, gt_queries, gt_out;
  std::size_t gt_k = 100, gt_workers = default_workers();
  auto* gtc = app.add_subcommand("groundtruth", "exact k nearest neighbors by exhaustive scan");
  gtc->add_option("--base", gt_base)->required();
  gtc->add_option("--queries", gt_queries)->required();
  gtc->add_option("--k", gt_k);
  gtc->add_option("--workers", gt_workers);
  gtc->add_option("--out", gt_out)->required();

  BuildArgs build;
  auto* b = app.add_subcommand("build", "partition, profile, plan, build indices and the routing graph");
  b->add_option("--base", build.base)->required();
  b->add_option("--out", build.out)->required();
  b->add_option("--k", build.k, "cluster count");
  b->add_option("--iters", build.iters);
  b->add_option("--seed", build.seed);
  b->add_option("--budget-mb", build.budget_mb, "index memory budget, 0 = unlimited");
  b->add_option("--fixed-profile", build.fixed_profile, "use this profile instead of calibrating");
  b->add_option("--weights", build.weights, "per-cluster access weights, one per line");
  b->add_option("--types", build.types, "restrict the plan to these index types");
  b->add_option("--max-degree", build.max_degree);
  b->add_option("--build-beam", build.build_beam);
  b->add_option("--graph-alpha", build.graph_alpha);
  b->add_option("--nlist-max", build.nlist_max);
  b->add_option("--samples", build.samples, "bootstrap routing samples per cluster");
  b->add_option("--rho-cache", build.rho_cache);
  b->add_option("--b-buf", build.b_buf);
  b->add_option("--local-nprobe", build.local_nprobe);
  b->add_option("--workers", build.workers);

  QueryArgs query;
  auto* q = app.add_subcommand("query", "run a query batch");
  q->add_option("--manifest", query.manifest)->required();
  q->add_option("--queries", query.queries)->required();
  q->add_option("--ga", query.ga, "routing snapshot to start from instead of the built one");
  q->add_option("--gt", query.gt, "ground truth for recall and routing precision");
  q->add_option("--k", query.k);
  q->add_option("--nprobe", query.nprobe, "routing seeds, 0 = 4k");
  q->add_option("--ga-beam", query.ga_beam);
  q->add_option("--rho", query.rho, "early stop patience fraction");
  q->add_option("--delta-q", query.delta_q, "queries per epoch");
  q->add_option("--refresh-h", query.h, "routing nodes replaced per epoch, 0 = 1% of bootstrap");
  q->add_flag("--reorder,!--no-reorder", query.reorder);
  q->add_flag("--early-stop,!--no-early-stop", query.early_stop);
  q->add_flag("--pruning,!--no-pruning", query.pruning);
  q->add_flag("--ga-refresh,!--no-ga-refresh", query.ga_refresh);
  q->add_option("--min-clusters", query.min_clusters);
  q->add_option("--beam", query.beam, "local graph search pool, 0 = max(64, 2k)");
  q->add_option("--local-nprobe", query.local_nprobe);
  q->add_option("--workers", query.workers);
  q->add_option("--cache-mb", query.cache_mb, "hot vector cache, 0 disables");
  q->add_option("--backing", query.backing)->check(CLI::IsMember({"direct", "mmap", "buffered"}));
  q->add_option("--results", query.results, "CSV query_id,rank,vector_id,distance");
  q->add_option("--stats", query.stats, "per-query JSON lines");
  q->add_option("--events", query.events, "per-epoch JSON lines");
  q->add_option("--summary", query.summary);
  q->add_option("--save-ga", query.save_ga, "directory for the final routing snapshot");
  q->add_option("--weights-out", query.weights_out, "per-cluster visit weights for build --weights");

  std::string ev_results, ev_gt, ev_stats, ev_summary, ev_out;
  std::vector<std::size_t> ev_k{10};
  auto* e = app.add_subcommand("eval", "recall, QPS, latency and I/O from a query run");
  e->add_option("--results", ev_results)->required();
  e->add_option("--gt", ev_gt)->required();
  e->add_option("--k", ev_k);
  e->add_option("--stats", ev_stats);
  e->add_option("--summary", ev_summary);
  e->add_option("--out", ev_out);

  std::string st_manifest, st_events;
  auto* s = app.add_subcommand("stats", "deployment summary and per-epoch routing graph events");
  s->add_option("--manifest", st_manifest)->required();
  s->add_option("--events", st_events);

  MotivateArgs mot;
  auto* m = app.add_subcommand("motivate", "cluster skew, ground-truth spread and routing comparison");
  m->add_option("--experiment", mot.experiment)->required()->check(CLI::IsMember({"skew", "gt-clusters", "routing"}));
  m->add_option("--manifest", mot.manifest)->required();
  m->add_option("--queries", mot.queries);
  m->add_option("--gt", mot.gt);
  m->add_option("--k", mot.k);
  m->add_option("--nprobe", mot.nprobes);
  m->add_option("--warmup", mot.warmup, "queries used to warm the routing graph, 0 = half");
  m->add_option("--delta-q", mot.delta_q);
  m->add_option("--backing", mot.backing)->check(CLI::IsMember({"direct", "mmap", "buffered"}));
  m->add_option("--out", mot.out);

  std::vector<std::string> args;
  try {
    args = expand_config(argc, argv);
  } catch (const UsageError& ex) {
    std::cerr << "usage error: " << ex.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 2;
  }

  try {
    if (g->parsed()) return cmd_gen(gen, *g);
    if (gtc->parsed()) return cmd_groundtruth(gt_base, gt_queries, gt_k, gt_workers, gt_out);
    if (b->parsed()) return cmd_build(build, *b);
    if (q->parsed()) return cmd_query(query, *q);
    if (e->parsed()) return cmd_eval(ev_results, ev_gt, ev_k, ev_stats, ev_summary, ev_out);
    if (s->parsed()) return cmd_stats(st_manifest, st_events);
    if (m->parsed()) return cmd_motivate(mot);
  } catch (const UsageError& ex) {
    std::cerr << "usage error: " << ex.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 2;
}
