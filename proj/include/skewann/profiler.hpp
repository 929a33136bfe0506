#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>

#include "skewann/partition.hpp"
#include "skewann/vamana.hpp"

namespace skewann {

enum class IndexType : std::uint8_t { kFlat = 0, kGraph = 1, kIvfFlat = 2 };

inline constexpr std::array<IndexType, 3> kAllIndexTypes{IndexType::kFlat, IndexType::kGraph, IndexType::kIvfFlat};

inline std::string_view to_string(IndexType t) {
  switch (t) {
    case IndexType::kFlat:
      return "flat";
    case IndexType::kGraph:
      return "graph";
    case IndexType::kIvfFlat:
      return "ivfflat";
  }
  return "unknown";
}

inline IndexType index_type_from_string(std::string_view s) {
  if (s == "flat") return IndexType::kFlat;
  if (s == "graph") return IndexType::kGraph;
  if (s == "ivfflat" || s == "ivf") return IndexType::kIvfFlat;
  fail(ErrorCode::kInvalidArgument, "unknown index type: " + std::string(s));
}

inline IndexType index_type_from_u8(std::uint8_t v) {
  require(v <= 2, ErrorCode::kInvalidArgument, "unknown index type code " + std::to_string(v));
  return static_cast<IndexType>(v);
}

/// Device and implementation constants behind the cost model.
struct HardwareProfile {
  double bw_seq = 2.0e9;      // bytes / second
  double lat_rand = 1.0e-4;   // seconds per random 4 KiB read
  double c_vec = 5.0e-8;      // seconds per distance computation
  double alpha_flat = 1.0;
  double beta_scan = 1.0;
  double rho_cache = 0.1;
  double b_buf = 1 << 20;     // bytes
  double b_node = 656;        // bytes, 4d + 4R + 16 at d=128, R=32
  double deg = 32;
  double a = 1.0;             // hop count H(N) = max(1, a ln N + b)
  double b = 0.0;
  std::uint32_t nlist_max = 1024;
  std::uint32_t local_nprobe = 8;

  friend bool operator==(const HardwareProfile&, const HardwareProfile&) = default;
};

inline double default_node_bytes(std::size_t dim, std::size_t max_degree) {
  return 4.0 * static_cast<double>(dim) + 4.0 * static_cast<double>(max_degree) + 16.0;
}

inline void validate(const HardwareProfile& p) {
  require(p.bw_seq > 0 && p.lat_rand > 0 && p.c_vec > 0, ErrorCode::kInvalidArgument,
          "profile: rates and latencies must be positive");
  require(p.alpha_flat > 0 && p.beta_scan > 0, ErrorCode::kInvalidArgument, "profile: coefficients must be positive");
  require(p.rho_cache >= 0 && p.rho_cache <= 1, ErrorCode::kInvalidArgument, "profile: rho_cache outside [0,1]");
  require(p.b_buf >= 0 && p.b_node > 0 && p.deg > 0, ErrorCode::kInvalidArgument, "profile: sizes must be positive");
  require(p.nlist_max >= 4, ErrorCode::kInvalidArgument, "profile: nlist_max must be at least 4");
  require(p.local_nprobe >= 1, ErrorCode::kInvalidArgument, "profile: local_nprobe must be positive");
}

// Cost operators ------------------------------------------------------------

/// Bandwidth-bound streaming transfer.
inline double tr(const HardwareProfile& p, double bytes) { return bytes / p.bw_seq; }

/// Latency-bound random reads, one Lat_rand per 4 KiB page touched.
inline double rd(const HardwareProfile& p, double bytes) {
  return std::ceil(bytes / static_cast<double>(kPageSize)) * p.lat_rand;
}

inline std::size_t ivf_nlist(std::size_t n, std::size_t nlist_max) {
  const auto root = static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(n))));
  return std::max<std::size_t>(4, std::min(root, nlist_max));
}

inline double hop_count(const HardwareProfile& p, std::size_t n) {
  return std::max(1.0, p.a * std::log(static_cast<double>(n)) + p.b);
}

inline double ivf_scanned(const HardwareProfile& p, std::size_t n) {
  const auto nlist = ivf_nlist(n, p.nlist_max);
  const auto probes = std::min<std::size_t>(p.local_nprobe, nlist);
  return static_cast<double>(n) / static_cast<double>(nlist) * static_cast<double>(probes);
}

inline double predict_latency(const HardwareProfile& p, IndexType t, std::size_t n, std::size_t d) {
  require(n >= 1 && d >= 1, ErrorCode::kInvalidArgument, "predict_latency: N and d must be positive");
  const double nd = static_cast<double>(n), dd = static_cast<double>(d);
  switch (t) {
    case IndexType::kFlat:
      return tr(p, 4.0 * nd * dd) + p.alpha_flat * nd * p.c_vec;
    case IndexType::kGraph:
      return hop_count(p, n) * (rd(p, p.b_node) + p.deg * p.c_vec);
    case IndexType::kIvfFlat: {
      const double scanned = ivf_scanned(p, n);
      return p.beta_scan * tr(p, 4.0 * dd * scanned) + scanned * p.c_vec;
    }
  }
  fail(ErrorCode::kInvalidArgument, "predict_latency: unknown index type");
}

inline std::uint64_t predict_memory(const HardwareProfile& p, IndexType t, std::size_t n, std::size_t d) {
  require(n >= 1 && d >= 1, ErrorCode::kInvalidArgument, "predict_memory: N and d must be positive");
  switch (t) {
    case IndexType::kFlat:
      return static_cast<std::uint64_t>(std::ceil(p.b_buf));
    case IndexType::kGraph:
      return static_cast<std::uint64_t>(std::ceil(p.rho_cache * static_cast<double>(n) * p.b_node));
    case IndexType::kIvfFlat:
      return 4ull * d * ivf_nlist(n, p.nlist_max);
  }
  fail(ErrorCode::kInvalidArgument, "predict_memory: unknown index type");
}

// Plan solver ----------------------------------------------------------------

inline constexpr std::uint64_t kUnlimitedBudget = std::numeric_limits<std::uint64_t>::max();
inline constexpr std::string_view kPlanMagic = "ORPL";

struct IndexPlan {
  std::vector<IndexType> choice;
  std::vector<double> predicted_latency;
  std::vector<std::uint64_t> predicted_memory;
  std::vector<double> weights;
  std::uint64_t total_memory = 0;
  std::uint64_t budget = kUnlimitedBudget;
  double objective = 0.0;

  std::size_t size() const { return choice.size(); }
};

struct PlanOptions {
  std::uint64_t budget = kUnlimitedBudget;
  /// Index types the solver may pick from; empty means all.
  std::vector<IndexType> allowed;
  /// Frontier size above which states are merged per 64 KiB memory bucket.
  std::size_t max_frontier = 1 << 16;
};

namespace detail {

struct PlanState {
  std::uint64_t mem;
  double lat;
  std::uint32_t parent;
  std::uint8_t choice;
};

}  // namespace detail

/// Multiple-choice knapsack over clusters: one index type per cluster,
/// minimising the weighted predicted latency under the memory budget.
/// Solved by dynamic programming over Pareto-optimal (memory, latency)
/// states keyed by exact byte counts; when a frontier grows past
/// max_frontier it is thinned to one state per 64 KiB bucket.
inline IndexPlan solve_plan(const HardwareProfile& profile, std::span<const std::size_t> sizes, std::size_t dim,
                            std::span<const double> weights, const PlanOptions& opts = {}) {
  validate(profile);
  const std::size_t k = sizes.size();
  require(weights.empty() || weights.size() == k, ErrorCode::kMismatch, "solve_plan: weight count mismatch");
  std::vector<IndexType> types = opts.allowed.empty()
                                     ? std::vector<IndexType>(kAllIndexTypes.begin(), kAllIndexTypes.end())
                                     : opts.allowed;
  std::sort(types.begin(), types.end());
  types.erase(std::unique(types.begin(), types.end()), types.end());

  IndexPlan plan;
  plan.budget = opts.budget;
  plan.weights.assign(k, 1.0);
  if (!weights.empty()) std::copy(weights.begin(), weights.end(), plan.weights.begin());

  std::vector<std::array<double, 3>> lat(k);
  std::vector<std::array<std::uint64_t, 3>> mem(k);
  std::uint64_t min_total = 0;
  for (std::size_t i = 0; i < k; ++i) {
    std::uint64_t lo = kUnlimitedBudget;
    for (auto t : types) {
      const auto ti = static_cast<std::size_t>(t);
      lat[i][ti] = predict_latency(profile, t, sizes[i], dim);
      mem[i][ti] = predict_memory(profile, t, sizes[i], dim);
      lo = std::min(lo, mem[i][ti]);
    }
    min_total += lo;
  }
  if (min_total > opts.budget) {
    fail(ErrorCode::kInfeasible, "solve_plan: budget " + std::to_string(opts.budget) +
                                     " bytes is below the minimal achievable memory " + std::to_string(min_total) +
                                     " bytes");
  }

  std::vector<std::vector<detail::PlanState>> layers;
  layers.reserve(k + 1);
  layers.push_back({{0, 0.0, 0, 0}});
  std::vector<detail::PlanState> cand;
  for (std::size_t i = 0; i < k; ++i) {
    const auto& prev = layers.back();
    cand.clear();
    cand.reserve(prev.size() * types.size());
    for (std::uint32_t s = 0; s < prev.size(); ++s) {
      for (auto t : types) {
        const auto ti = static_cast<std::size_t>(t);
        const std::uint64_t m = prev[s].mem + mem[i][ti];
        if (m > opts.budget) continue;
        cand.push_back({m, prev[s].lat + plan.weights[i] * lat[i][ti], s, static_cast<std::uint8_t>(ti)});
      }
    }
    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
      if (a.mem != b.mem) return a.mem < b.mem;
      if (a.lat != b.lat) return a.lat < b.lat;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.choice < b.choice;
    });
    std::vector<detail::PlanState> next;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& c : cand) {
      if (c.lat < best) {
        next.push_back(c);
        best = c.lat;
      }
    }
    if (next.size() > opts.max_frontier) {
      constexpr std::uint64_t kBucket = 64 * 1024;
      std::vector<detail::PlanState> thinned;
      for (std::size_t j = 0; j < next.size(); ++j) {
        const bool last_in_bucket = j + 1 == next.size() || next[j + 1].mem / kBucket != next[j].mem / kBucket;
        if (last_in_bucket) thinned.push_back(next[j]);
      }
      next = std::move(thinned);
    }
    layers.push_back(std::move(next));
  }

  // Latency strictly decreases along the frontier, so the last state is the optimum.
  std::uint32_t at = static_cast<std::uint32_t>(layers.back().size() - 1);
  plan.choice.resize(k);
  plan.predicted_latency.resize(k);
  plan.predicted_memory.resize(k);
  plan.objective = layers.back()[at].lat;
  plan.total_memory = layers.back()[at].mem;
  for (std::size_t i = k; i-- > 0;) {
    const auto& st = layers[i + 1][at];
    plan.choice[i] = static_cast<IndexType>(st.choice);
    plan.predicted_latency[i] = lat[i][st.choice];
    plan.predicted_memory[i] = mem[i][st.choice];
    at = st.parent;
  }
  return plan;
}

inline IndexPlan solve_plan(const HardwareProfile& profile, const ClusterPartition& partition,
                            std::span<const double> weights, const PlanOptions& opts = {}) {
  const auto sizes = partition.sizes();
  return solve_plan(profile, sizes, partition.dim, weights, opts);
}

/// Plan that assigns a single type everywhere, for ablations.
inline IndexPlan uniform_plan(const HardwareProfile& profile, std::span<const std::size_t> sizes, std::size_t dim,
                              IndexType t) {
  IndexPlan plan;
  for (auto n : sizes) {
    plan.choice.push_back(t);
    plan.predicted_latency.push_back(predict_latency(profile, t, n, dim));
    plan.predicted_memory.push_back(predict_memory(profile, t, n, dim));
    plan.weights.push_back(1.0);
    plan.total_memory += plan.predicted_memory.back();
    plan.objective += plan.predicted_latency.back();
  }
  return plan;
}

inline void save_plan(const std::string& path, const IndexPlan& plan) {
  io::Writer w(path);
  w.put_bytes(kPlanMagic);
  w.put(static_cast<std::uint64_t>(plan.size()));
  w.put(plan.budget);
  for (std::size_t i = 0; i < plan.size(); ++i) {
    w.put(static_cast<std::uint8_t>(plan.choice[i]));
    w.put(plan.predicted_latency[i]);
    w.put(plan.predicted_memory[i]);
  }
  w.close();
}

inline IndexPlan load_plan(const std::string& path) {
  io::Reader r(path);
  r.expect_magic(kPlanMagic);
  IndexPlan plan;
  const auto k = r.get<std::uint64_t>();
  plan.budget = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < k; ++i) {
    plan.choice.push_back(index_type_from_u8(r.get<std::uint8_t>()));
    plan.predicted_latency.push_back(r.get<double>());
    plan.predicted_memory.push_back(r.get<std::uint64_t>());
    plan.weights.push_back(1.0);
    plan.total_memory += plan.predicted_memory.back();
    plan.objective += plan.predicted_latency.back();
  }
  return plan;
}

// Profile file: key=value, one field per line --------------------------------

inline std::string format_profile(const HardwareProfile& p) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "bw_seq=" << p.bw_seq << "\n"
     << "lat_rand=" << p.lat_rand << "\n"
     << "c_vec=" << p.c_vec << "\n"
     << "alpha_flat=" << p.alpha_flat << "\n"
     << "beta_scan=" << p.beta_scan << "\n"
     << "rho_cache=" << p.rho_cache << "\n"
     << "b_buf=" << p.b_buf << "\n"
     << "b_node=" << p.b_node << "\n"
     << "deg=" << p.deg << "\n"
     << "a=" << p.a << "\n"
     << "b=" << p.b << "\n"
     << "nlist_max=" << p.nlist_max << "\n"
     << "local_nprobe=" << p.local_nprobe << "\n";
  return os.str();
}

inline std::map<std::string, std::string> parse_key_values(std::istream& in, const std::string& what) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::kFormat, what + ": expected key=value, got '" + line + "'");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline HardwareProfile parse_profile(std::istream& in) {
  auto kv = parse_key_values(in, "profile");
  HardwareProfile p;
  auto take = [&](const char* key) -> std::string {
    auto it = kv.find(key);
    require(it != kv.end(), ErrorCode::kFormat, std::string("profile: missing field ") + key);
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto num = [&](const char* key) {
    const auto s = take(key);
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      require(used == s.size(), ErrorCode::kFormat, std::string("profile: bad number for ") + key);
      return v;
    } catch (const std::logic_error&) {
      fail(ErrorCode::kFormat, std::string("profile: bad number for ") + key);
    }
  };
  p.bw_seq = num("bw_seq");
  p.lat_rand = num("lat_rand");
  p.c_vec = num("c_vec");
  p.alpha_flat = num("alpha_flat");
  p.beta_scan = num("beta_scan");
  p.rho_cache = num("rho_cache");
  p.b_buf = num("b_buf");
  p.b_node = num("b_node");
  p.deg = num("deg");
  p.a = num("a");
  p.b = num("b");
  p.nlist_max = static_cast<std::uint32_t>(num("nlist_max"));
  p.local_nprobe = static_cast<std::uint32_t>(num("local_nprobe"));
  require(kv.empty(), ErrorCode::kFormat, "profile: unknown field " + (kv.empty() ? "" : kv.begin()->first));
  validate(p);
  return p;
}

inline HardwareProfile load_profile(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot open profile " + path);
  return parse_profile(in);
}

inline void save_profile(const std::string& path, const HardwareProfile& p) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), ErrorCode::kIo, "cannot write profile " + path);
  out << format_profile(p);
  require(out.good(), ErrorCode::kIo, "cannot write profile " + path);
}

// Calibration -----------------------------------------------------------------

struct CalibrationOptions {
  std::string scratch_dir = std::filesystem::temp_directory_path().string();
  std::uint64_t scratch_bytes = 64ull << 20;
  std::size_t trials = 256;
  std::size_t dim = 128;
  std::size_t max_degree = 32;
  double rho_cache = 0.1;
  double b_buf = 1 << 20;
  std::uint32_t nlist_max = 1024;
  std::uint32_t local_nprobe = 8;
  /// Fit alpha_flat, beta_scan, a, b from micro-benchmarks; otherwise keep 1/1/1/0.
  bool fit_coefficients = true;
  std::uint64_t seed = 42;
};

/// Least-squares slope through the origin, clamped away from zero.
inline double fit_slope(std::span<const double> x, std::span<const double> y) {
  double xy = 0.0, xx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xy += x[i] * y[i];
    xx += x[i] * x[i];
  }
  if (xx <= 0.0) return 1.0;
  return std::max(0.05, xy / xx);
}

/// Ordinary least squares y = a x + b.
inline std::pair<double, double> fit_line(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const double den = n * sxx - sx * sx;
  if (std::abs(den) < 1e-12) return {0.0, sy / n};
  const double a = (n * sxy - sx * sy) / den;
  return {a, (sy - a * sx) / n};
}

namespace detail {

class ScratchFile {
 public:
  ScratchFile(const std::string& dir, std::uint64_t bytes, std::uint64_t seed)
      : path_((std::filesystem::path(dir) / ("skewann_scratch_" + std::to_string(::getpid()) + ".bin")).string()),
        bytes_(bytes) {
    std::ofstream out(path_, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorCode::kIo, "calibrate: scratch directory not writable: " + dir);
    std::mt19937_64 rng(seed);
    std::vector<std::uint64_t> block(1 << 17);
    for (std::uint64_t written = 0; written < bytes;) {
      for (auto& x : block) x = rng();
      const auto n = std::min<std::uint64_t>(bytes - written, block.size() * 8);
      out.write(reinterpret_cast<const char*>(block.data()), static_cast<std::streamsize>(n));
      written += n;
    }
    out.flush();
    require(out.good(), ErrorCode::kIo, "calibrate: failed writing scratch file");
    out.close();
    fd_ = ::open(path_.c_str(), O_RDONLY);
    require(fd_ >= 0, ErrorCode::kIo, "calibrate: cannot reopen scratch file");
    ::fsync(fd_);
  }
  ~ScratchFile() {
    if (fd_ >= 0) ::close(fd_);
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  ScratchFile(const ScratchFile&) = delete;
  ScratchFile& operator=(const ScratchFile&) = delete;

  void drop_cache() const { ::posix_fadvise(fd_, 0, 0, POSIX_FADV_DONTNEED); }
  void read_at(std::uint64_t off, std::span<std::byte> buf) const {
    std::size_t done = 0;
    while (done < buf.size()) {
      const auto n = ::pread(fd_, buf.data() + done, buf.size() - done, static_cast<off_t>(off + done));
      require(n > 0, ErrorCode::kIo, "calibrate: read failed");
      done += static_cast<std::size_t>(n);
    }
  }
  std::uint64_t bytes() const { return bytes_; }

 private:
  std::string path_;
  std::uint64_t bytes_;
  int fd_ = -1;
};

inline void check_resolution(double seconds) {
  require(seconds > 0.0, ErrorCode::kInvalidArgument, "calibrate: timer resolution insufficient for trial batch");
}

}  // namespace detail

/// Seconds per distance computation at `dim`, amortised over `count` calls.
inline double measure_c_vec(std::size_t dim, std::size_t count = 1'000'000, std::uint64_t seed = 42) {
  constexpr std::size_t kRows = 1024;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g;
  std::vector<float> data(kRows * dim), q(dim);
  for (auto& x : data) x = g(rng);
  for (auto& x : q) x = g(rng);
  volatile float sink = 0.0f;
  Stopwatch sw;
  float acc = 0.0f;
  for (std::size_t i = 0; i < count; ++i) acc += l2_sq(q.data(), data.data() + (i % kRows) * dim, dim);
  sink = acc;
  (void)sink;
  const double t = sw.seconds();
  detail::check_resolution(t);
  return t / static_cast<double>(count);
}

inline HardwareProfile calibrate(const CalibrationOptions& opt) {
  require(opt.scratch_bytes >= (64ull << 20), ErrorCode::kInvalidArgument, "calibrate: scratch file must be >= 64 MiB");
  require(opt.trials > 0, ErrorCode::kInvalidArgument, "calibrate: trials must be positive");
  require(opt.dim > 0, ErrorCode::kInvalidArgument, "calibrate: dim must be positive");
  HardwareProfile p;
  p.rho_cache = opt.rho_cache;
  p.b_buf = opt.b_buf;
  p.nlist_max = opt.nlist_max;
  p.local_nprobe = opt.local_nprobe;
  p.b_node = default_node_bytes(opt.dim, opt.max_degree);
  p.deg = static_cast<double>(opt.max_degree);

  detail::ScratchFile scratch(opt.scratch_dir, opt.scratch_bytes, opt.seed);
  std::vector<std::byte> buf(1 << 20);

  // sequential bandwidth
  scratch.drop_cache();
  {
    Stopwatch sw;
    for (std::uint64_t off = 0; off < scratch.bytes(); off += buf.size()) {
      const auto n = std::min<std::uint64_t>(buf.size(), scratch.bytes() - off);
      scratch.read_at(off, std::span(buf.data(), n));
    }
    const double t = sw.seconds();
    detail::check_resolution(t);
    p.bw_seq = static_cast<double>(scratch.bytes()) / t;
  }

  // random 4 KiB latency, median of trials
  std::mt19937_64 rng(opt.seed);
  const std::uint64_t pages = scratch.bytes() / kPageSize;
  {
    scratch.drop_cache();
    std::vector<double> samples;
    samples.reserve(opt.trials);
    std::uniform_int_distribution<std::uint64_t> pick(0, pages - 1);
    for (std::size_t i = 0; i < opt.trials; ++i) {
      const auto off = pick(rng) * kPageSize;
      Stopwatch sw;
      scratch.read_at(off, std::span(buf.data(), kPageSize));
      samples.push_back(sw.seconds());
    }
    std::nth_element(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(samples.size() / 2),
                     samples.end());
    p.lat_rand = samples[samples.size() / 2];
    if (p.lat_rand <= 0.0) p.lat_rand = 1e-9;
  }

  p.c_vec = measure_c_vec(opt.dim, 1'000'000, opt.seed);
  if (!opt.fit_coefficients) return p;

  const std::size_t rec = 4 * opt.dim;
  const std::uint64_t max_vecs = scratch.bytes() / rec;
  std::vector<float> q(opt.dim, 0.5f), row(opt.dim);
  volatile float sink = 0.0f;

  // alpha_flat: timed flat scans of three sizes
  {
    std::vector<double> xs, ys;
    for (std::size_t n : {2048ul, 8192ul, 32768ul}) {
      n = std::min<std::size_t>(n, max_vecs);
      scratch.drop_cache();
      Stopwatch sw;
      float acc = 0.0f;
      std::vector<std::byte> chunk(n * rec);
      scratch.read_at(0, chunk);
      for (std::size_t i = 0; i < n; ++i) {
        std::memcpy(row.data(), chunk.data() + i * rec, rec);
        acc += l2_sq(q.data(), row.data(), opt.dim);
      }
      sink = acc;
      const double t = sw.seconds();
      xs.push_back(static_cast<double>(n) * p.c_vec);
      ys.push_back(std::max(0.0, t - tr(p, static_cast<double>(n * rec))));
    }
    p.alpha_flat = fit_slope(xs, ys);
  }

  // beta_scan: probes of scattered posting lists
  {
    std::vector<double> xs, ys;
    for (std::size_t n : {4096ul, 16384ul, 65536ul}) {
      const auto nlist = ivf_nlist(n, p.nlist_max);
      const std::size_t list_len = std::max<std::size_t>(1, n / nlist);
      const std::size_t probes = std::min<std::size_t>(p.local_nprobe, nlist);
      std::vector<std::byte> chunk(list_len * rec);
      std::uniform_int_distribution<std::uint64_t> start(0, max_vecs - list_len);
      scratch.drop_cache();
      Stopwatch sw;
      float acc = 0.0f;
      for (std::size_t pr = 0; pr < probes; ++pr) {
        scratch.read_at(start(rng) * rec, chunk);
        for (std::size_t i = 0; i < list_len; ++i) {
          std::memcpy(row.data(), chunk.data() + i * rec, rec);
          acc += l2_sq(q.data(), row.data(), opt.dim);
        }
      }
      sink = acc;
      const double t = sw.seconds();
      const double scanned = static_cast<double>(list_len * probes);
      xs.push_back(tr(p, 4.0 * static_cast<double>(opt.dim) * scanned));
      ys.push_back(std::max(0.0, t - scanned * p.c_vec));
    }
    p.beta_scan = fit_slope(xs, ys);
  }

  // hop-count coefficients from beam searches on three graph sizes
  {
    std::vector<double> xs, ys;
    std::normal_distribution<float> g;
    const std::size_t gdim = std::min<std::size_t>(opt.dim, 32);
    GraphParams gp;
    gp.max_degree = static_cast<std::uint32_t>(opt.max_degree);
    gp.build_beam = 48;
    gp.seed = opt.seed;
    double degree_sum = 0.0, degree_cnt = 0.0;
    for (std::size_t n : {256ul, 1024ul, 4096ul}) {
      Matrix<float> pts{n, gdim, std::vector<float>(n * gdim)};
      for (auto& x : pts.data) x = g(rng);
      auto graph = build_vamana(std::move(pts), gp);
      for (const auto& a : graph.adj) degree_sum += static_cast<double>(a.size());
      degree_cnt += static_cast<double>(n);
      VisitedSet vis;
      double hops = 0.0;
      constexpr int kQueries = 32;
      std::vector<float> qq(gdim);
      for (int t = 0; t < kQueries; ++t) {
        for (auto& x : qq) x = g(rng);
        hops += static_cast<double>(beam_search(graph, qq.data(), graph.entry, 16, vis).expanded.size());
      }
      xs.push_back(std::log(static_cast<double>(n)));
      ys.push_back(hops / kQueries);
    }
    auto [a, b] = fit_line(xs, ys);
    p.a = a;
    p.b = b;
    p.deg = std::max(1.0, degree_sum / degree_cnt);
  }
  (void)sink;
  validate(p);
  return p;
}

}  // namespace skewann
