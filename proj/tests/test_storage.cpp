#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <thread>

#include "skewann/storage.hpp"
#include "skewann/topk.hpp"
#include "test_util.hpp"

using namespace skewann;
using skewann::testing::TempDir;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double scalar_l2_sq(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  return s;
}

}  // namespace

TEST(Storage, OpenFvecsCountAndDim) {
  TempDir dir;
  auto store = skewann::testing::store_of(dir, "a.fvecs", skewann::testing::random_matrix(10, 4, 1));
  EXPECT_EQ(store.count(), 10u);
  EXPECT_EQ(store.dim(), 4u);
  EXPECT_EQ(store.fetch_counter(), 0u);
  EXPECT_EQ(store.page_counter(), 0u);
}

TEST(Storage, RaggedFileIsFormatError) {
  TempDir dir;
  const auto path = dir.file("bad.fvecs");
  write_fvecs(path, skewann::testing::random_matrix(3, 4, 1));
  {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out.put('x');
  }
  try {
    VectorStore::open(path, ElemKind::kFloat32, 4);
    FAIL() << "expected format error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kFormat);
  }
}

TEST(Storage, WrongDeclaredDimIsFormatError) {
  TempDir dir;
  const auto path = dir.file("d.fvecs");
  write_fvecs(path, skewann::testing::random_matrix(6, 4, 1));
  // 6 records of stride 20 = 120 bytes is also 5 records of stride 24 (dim 5)
  try {
    VectorStore::open(path, ElemKind::kFloat32, 5);
    FAIL() << "expected format error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kFormat);
  }
}

TEST(Storage, MissingFileIsIoError) {
  try {
    VectorStore::open("/nonexistent/none.fvecs", ElemKind::kFloat32, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIo);
  }
}

TEST(Storage, EmptyFileHasZeroCount) {
  TempDir dir;
  const auto path = dir.file("empty.fvecs");
  std::ofstream(path, std::ios::binary).close();
  auto store = VectorStore::open(path, ElemKind::kFloat32, 4);
  EXPECT_EQ(store.count(), 0u);
  EXPECT_THROW(store.fetch_vector(0), Error);
}

TEST(Storage, FetchReturnsRowAndCounts) {
  TempDir dir;
  Matrix<float> m{3, 2, {1, 2, 3, 4, 5, 6}};
  auto store = skewann::testing::store_of(dir, "three.fvecs", m);
  const auto v = store.fetch_vector(1);
  EXPECT_EQ(v, (std::vector<float>{3, 4}));
  EXPECT_EQ(store.fetch_counter(), 1u);
}

TEST(Storage, SamePageCountedOnce) {
  TempDir dir;
  auto store = skewann::testing::store_of(dir, "p.fvecs", skewann::testing::random_matrix(8, 4, 2));
  store.fetch_vector(2);
  store.fetch_vector(2);
  EXPECT_EQ(store.fetch_counter(), 2u);
  EXPECT_EQ(store.page_counter(), 1u);

  FetchContext ctx;
  store.fetch_vector(3, &ctx);
  store.fetch_vector(3, &ctx);
  EXPECT_EQ(ctx.fetches(), 2u);
  EXPECT_EQ(ctx.pages(), 1u);
}

TEST(Storage, RecordSpanningPagesCountsBoth) {
  TempDir dir;
  // stride 4 + 4*1000 = 4004 bytes: record 1 spans bytes [4004, 8008) -> pages 0 and 1
  auto store = skewann::testing::store_of(dir, "wide.fvecs", skewann::testing::random_matrix(3, 1000, 3));
  FetchContext ctx;
  store.fetch_vector(1, &ctx);
  EXPECT_EQ(ctx.pages(), 2u);
  store.fetch_vector(0, &ctx);  // page 0 already seen
  EXPECT_EQ(ctx.pages(), 2u);
  ctx.reset();
  store.fetch_vector(0, &ctx);
  EXPECT_EQ(ctx.pages(), 1u);
}

TEST(Storage, OutOfRangeNeverWraps) {
  TempDir dir;
  auto store = skewann::testing::store_of(dir, "r.fvecs", skewann::testing::random_matrix(5, 3, 4));
  try {
    store.fetch_vector(5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kOutOfRange);
  }
  EXPECT_EQ(store.fetch_counter(), 0u);
}

TEST(Storage, UncountedReadLeavesCountersAlone) {
  TempDir dir;
  const auto m = skewann::testing::random_matrix(20, 8, 5);
  auto store = skewann::testing::store_of(dir, "u.fvecs", m);
  for (std::size_t i = 0; i < m.rows; ++i) EXPECT_EQ(store.read_vector(i), std::vector<float>(m.row(i).begin(), m.row(i).end()));
  EXPECT_EQ(store.fetch_counter(), 0u);
  store.fetch_vector(0);
  store.reset_counters();
  EXPECT_EQ(store.fetch_counter(), 0u);
  EXPECT_EQ(store.page_counter(), 0u);
}

TEST(Storage, CountersAreMonotoneUnderConcurrency) {
  TempDir dir;
  auto store = skewann::testing::store_of(dir, "c.fvecs", skewann::testing::random_matrix(500, 16, 6));
  std::vector<std::thread> pool;
  for (int t = 0; t < 4; ++t)
    pool.emplace_back([&, t] {
      FetchContext ctx;
      for (std::size_t i = 0; i < 500; ++i) store.fetch_vector((i * 7 + t) % 500, &ctx);
    });
  for (auto& t : pool) t.join();
  EXPECT_EQ(store.fetch_counter(), 2000u);
}

TEST(Storage, FvecsRoundTripIsByteIdentical) {
  TempDir dir;
  const auto a = dir.file("a.fvecs");
  const auto b = dir.file("b.fvecs");
  write_fvecs(a, skewann::testing::random_matrix(37, 13, 7));
  write_fvecs(b, read_fvecs(a));
  EXPECT_EQ(slurp(a), slurp(b));
}

TEST(Storage, BvecsRoundTripAndWidening) {
  TempDir dir;
  Matrix<std::uint8_t> m{4, 3, {0, 1, 255, 7, 8, 9, 10, 11, 12, 200, 100, 50}};
  const auto a = dir.file("a.bvecs");
  const auto b = dir.file("b.bvecs");
  write_bvecs(a, m);
  write_bvecs(b, read_bvecs(a));
  EXPECT_EQ(slurp(a), slurp(b));
  auto store = VectorStore::open(a, ElemKind::kUInt8, 3);
  EXPECT_EQ(store.count(), 4u);
  EXPECT_EQ(store.fetch_vector(0), (std::vector<float>{0, 1, 255}));
  EXPECT_EQ(store.fetch_vector(3), (std::vector<float>{200, 100, 50}));
}

TEST(Storage, IvecsRoundTrip) {
  TempDir dir;
  Matrix<std::int32_t> m{2, 3, {1, -2, 3, 4, 5, 2147483647}};
  const auto path = dir.file("g.ivecs");
  write_ivecs(path, m);
  const auto back = read_ivecs(path);
  EXPECT_EQ(back.rows, 2u);
  EXPECT_EQ(back.data, m.data);
}

TEST(Storage, RawStoreRoundTrip) {
  TempDir dir;
  const auto m = skewann::testing::random_matrix(11, 5, 8);
  const auto path = dir.file("x.orcv");
  write_raw_store(path, m);
  auto store = VectorStore::open(path, ElemKind::kFloat32, 5);
  EXPECT_EQ(store.count(), 11u);
  EXPECT_EQ(store.stride(), 20u);
  for (std::size_t i = 0; i < m.rows; ++i) EXPECT_EQ(store.read_vector(i), std::vector<float>(m.row(i).begin(), m.row(i).end()));
  EXPECT_THROW(VectorStore::open(path, ElemKind::kFloat32, 6), Error);
  EXPECT_THROW(VectorStore::open(path, ElemKind::kUInt8, 5), Error);
}

TEST(Storage, BufferedBackingMatchesMmap) {
  TempDir dir;
  const auto m = skewann::testing::random_matrix(30, 6, 9);
  auto mm = skewann::testing::store_of(dir, "m.fvecs", m);
  auto buf = VectorStore::open(dir.file("m.fvecs"), ElemKind::kFloat32, 6, StoreFormat::kVecs, Backing::kBuffered);
  for (std::size_t i = 0; i < m.rows; ++i) EXPECT_EQ(mm.fetch_vector(i), buf.fetch_vector(i));
}

TEST(Storage, ReorderedLayoutKeepsIds) {
  TempDir dir;
  const auto m = skewann::testing::random_matrix(64, 8, 10);
  auto src = skewann::testing::store_of(dir, "src.fvecs", m);
  std::vector<std::uint32_t> order(64);
  for (std::uint32_t j = 0; j < 64; ++j) order[j] = (j * 37) % 64;
  const auto slot_of = write_reordered_store(dir.file("re.orcv"), src, order);
  save_layout(dir.file("re.layout"), slot_of);
  auto re = VectorStore::open(dir.file("re.orcv"), ElemKind::kFloat32, 8);
  re.set_layout(load_layout(dir.file("re.layout")));
  for (std::uint32_t i = 0; i < 64; ++i) EXPECT_EQ(re.fetch_vector(i), src.read_vector(i));

  std::vector<std::uint32_t> bad(64, 0);
  EXPECT_THROW(re.set_layout(bad), Error);
  EXPECT_THROW(write_reordered_store(dir.file("bad.orcv"), src, bad), Error);
}

TEST(Storage, ContiguousLayoutTouchesFewerPages) {
  TempDir dir;
  // rows of 256 bytes -> 16 per page; a "cluster" of every 16th row
  const auto m = skewann::testing::random_matrix(256, 64, 11);
  auto src = VectorStore::open((write_raw_store(dir.file("s.orcv"), m), dir.file("s.orcv")), ElemKind::kFloat32, 64);
  std::vector<std::uint32_t> cluster;
  for (std::uint32_t i = 0; i < 256; i += 16) cluster.push_back(i);
  FetchContext scattered;
  for (auto id : cluster) src.fetch_vector(id, &scattered);

  std::vector<std::uint32_t> order(cluster);
  for (std::uint32_t i = 0; i < 256; ++i)
    if (i % 16 != 0) order.push_back(i);
  auto re = VectorStore::open((write_reordered_store(dir.file("r.orcv"), src, order), dir.file("r.orcv")),
                              ElemKind::kFloat32, 64);
  std::vector<std::uint32_t> slot_of(256);
  for (std::uint32_t j = 0; j < 256; ++j) slot_of[order[j]] = j;
  re.set_layout(slot_of);
  FetchContext contiguous;
  for (auto id : cluster) re.fetch_vector(id, &contiguous);
  EXPECT_EQ(scattered.pages(), 16u);
  EXPECT_LE(contiguous.pages(), 2u);
}

TEST(Storage, DirectBackingMatchesMmap) {
  TempDir dir;
  if (!skewann::testing::direct_io_supported(dir)) GTEST_SKIP() << "O_DIRECT unavailable on this filesystem";
  const auto m = skewann::testing::random_matrix(3000, 24, 12);
  auto mm = skewann::testing::store_of(dir, "m.fvecs", m);
  auto direct = VectorStore::open(dir.file("m.fvecs"), ElemKind::kFloat32, 24, StoreFormat::kVecs, Backing::kDirect);
  EXPECT_EQ(direct.backing(), Backing::kDirect);
  FetchContext ctx;
  std::mt19937 rng(1);
  for (int t = 0; t < 500; ++t) {
    const auto i = rng() % 3000;
    ASSERT_EQ(direct.fetch_vector(i, &ctx), mm.read_vector(i)) << i;
    ASSERT_EQ(direct.fetch_vector(i), mm.read_vector(i)) << i;
  }
  EXPECT_GT(ctx.device_reads(), 0u);
}

TEST(Storage, DirectSequentialScanGrowsWindow) {
  TempDir dir;
  if (!skewann::testing::direct_io_supported(dir)) GTEST_SKIP() << "O_DIRECT unavailable on this filesystem";
  const auto m = skewann::testing::random_matrix(4096, 32, 13);  // 128 B rows, 512 KiB
  write_raw_store(dir.file("s.orcv"), m);
  auto store = VectorStore::open(dir.file("s.orcv"), ElemKind::kFloat32, 32, StoreFormat::kRaw, Backing::kDirect);
  FetchContext ctx;
  for (std::size_t i = 0; i < m.rows; ++i) ASSERT_EQ(store.fetch_vector(i, &ctx)[5], m.row(i)[5]);
  EXPECT_EQ(ctx.fetches(), 4096u);
  // one read per page would be 129; doubling windows need far fewer
  EXPECT_LT(ctx.device_reads(), 20u);
  EXPECT_GE(ctx.device_bytes(), 4096u * 128u);
}

TEST(Distance, IdentityAndPythagoras) {
  const std::vector<float> a{0, 0}, b{3, 4};
  EXPECT_EQ(l2_sq(a, a), 0.0f);
  EXPECT_EQ(l2_sq(a, b), 25.0f);
  EXPECT_EQ(l2(a, b), 5.0f);
  EXPECT_EQ(distance(Metric::kL2, a, b), 25.0f);
  EXPECT_EQ(distance(Metric::kInnerProduct, b, b), -25.0f);
  EXPECT_TRUE(is_metric(Metric::kL2));
  EXPECT_FALSE(is_metric(Metric::kInnerProduct));
}

TEST(Distance, DimensionMismatchThrows) {
  const std::vector<float> a{1, 2}, b{1, 2, 3};
  EXPECT_THROW(l2_sq(a, b), Error);
  EXPECT_THROW(distance(Metric::kInnerProduct, a, b), Error);
}

TEST(Distance, MatchesScalarOracle) {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> g(0.0f, 3.0f);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t d = 1 + rng() % 200;
    std::vector<float> a(d), b(d);
    for (auto& x : a) x = g(rng);
    for (auto& x : b) x = g(rng);
    const double oracle = scalar_l2_sq(a, b);
    EXPECT_NEAR(l2_sq(a, b), oracle, 1e-5 * std::max(1.0, oracle));
  }
}

TEST(Distance, TriangleInequalityOnBoundMetric) {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> g(0.0f, 5.0f);
  for (int t = 0; t < 1000; ++t) {
    std::vector<float> q(16), p(16), v(16);
    for (auto* vec : {&q, &p, &v})
      for (auto& x : *vec) x = g(rng);
    const double lb = pivot_lower_bound(l2(q, p), l2(v, p));
    EXPECT_LE(lb, l2(q, v) + 1e-6 * std::max(1.0f, l2(q, v)) + 1e-6);
  }
}

TEST(Distance, PivotBoundExample) {
  // Dis = 5, Dist(q, p) = 10: a vector 6 from the pivot may be close, 4 cannot be
  EXPECT_FALSE(bound_exceeds(pivot_lower_bound(10.0, 6.0), 5.0));
  EXPECT_TRUE(bound_exceeds(pivot_lower_bound(10.0, 4.0), 5.0));
  EXPECT_FALSE(bound_exceeds(5.0, 5.0));
}

TEST(TopK, KeepsBestKWithLowerIdOnTies) {
  TopKQueue q(3);
  EXPECT_TRUE(std::isinf(q.threshold()));
  q.push(5, 4.0f);
  q.push(1, 1.0f);
  q.push(9, 4.0f);
  EXPECT_EQ(q.threshold(), 4.0f);
  EXPECT_FALSE(q.push(10, 4.0f));  // tie with worse id
  EXPECT_TRUE(q.push(2, 4.0f));   // tie with better id evicts 9
  ASSERT_EQ(q.size(), 3u);
  EXPECT_EQ(q.entries()[0].id, 1u);
  EXPECT_EQ(q.entries()[1].id, 2u);
  EXPECT_EQ(q.entries()[2].id, 5u);
  EXPECT_FALSE(q.push(1, 1.0f));  // duplicate
  EXPECT_DOUBLE_EQ(q.threshold_l2(), 2.0);
  EXPECT_THROW(TopKQueue(0), Error);
}

TEST(TopK, VersionCountsChanges) {
  TopKQueue q(2);
  q.push(1, 3.0f);
  q.push(2, 2.0f);
  const auto v = q.version();
  q.push(3, 10.0f);
  EXPECT_EQ(q.version(), v);
  q.push(4, 0.5f);
  EXPECT_EQ(q.version(), v + 1);
}

TEST(TopK, MatchesSortOracle) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.0f, 100.0f);
  for (int t = 0; t < 50; ++t) {
    TopKQueue q(10);
    std::vector<Neighbor> all;
    for (std::uint32_t i = 0; i < 300; ++i) {
      const float d = std::floor(u(rng));  // plenty of ties
      q.push(i, d);
      all.push_back({i, d});
    }
    std::sort(all.begin(), all.end());
    all.resize(10);
    EXPECT_EQ(q.entries(), all);
  }
}
