#pragma once

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <mutex>
#include <unordered_set>

#include "skewann/common.hpp"
#include "skewann/distance.hpp"

namespace skewann {

enum class ElemKind : std::uint8_t { kFloat32 = 0, kUInt8 = 1 };

inline std::size_t elem_width(ElemKind k) { return k == ElemKind::kFloat32 ? 4 : 1; }

/// kVecs: fvecs/bvecs records (4-byte dim prefix per record).
/// kRaw: "ORCV" header followed by packed rows.
enum class StoreFormat { kAuto, kVecs, kRaw };

/// kDirect serves counted fetches with O_DIRECT reads so they reach the
/// device instead of the page cache; uncounted reads stay buffered.
enum class Backing { kMmap, kBuffered, kDirect };

inline constexpr std::string_view kRawMagic = "ORCV";
inline constexpr std::uint32_t kRawVersion = 1;
inline constexpr std::size_t kRawHeaderBytes = 4 + 4 + 8 + 4 + 1;

/// Per-query page bookkeeping. The store only counts a page once per context
/// until the context is reset. With direct I/O the context also owns the
/// query's read window: a miss that continues the previous window doubles
/// the next read (up to kMaxWindow), any other miss reads just the pages it
/// needs.
class FetchContext {
 public:
  static constexpr std::size_t kMaxWindow = 128 * 1024;

  void reset() {
    pages_.clear();
    fetches_ = 0;
    new_pages_ = 0;
    device_reads_ = 0;
    device_bytes_ = 0;
    win_len_ = 0;
    last_read_ = 0;
  }
  std::uint64_t fetches() const { return fetches_; }
  std::uint64_t pages() const { return new_pages_; }
  /// Physical reads issued in direct mode, and their total size.
  std::uint64_t device_reads() const { return device_reads_; }
  std::uint64_t device_bytes() const { return device_bytes_; }

 private:
  friend class VectorStore;
  struct FreeAligned {
    void operator()(std::byte* p) const { std::free(p); }
  };

  std::unordered_set<std::uint64_t> pages_;
  std::uint64_t fetches_ = 0;
  std::uint64_t new_pages_ = 0;
  std::uint64_t device_reads_ = 0;
  std::uint64_t device_bytes_ = 0;
  std::unique_ptr<std::byte, FreeAligned> window_;
  std::uint64_t win_start_ = 0;
  std::size_t win_len_ = 0;
  std::size_t last_read_ = 0;
};

/// Disk-resident row store. Raw vectors are only reached through fetch(),
/// which is what the counters measure; read() is the uncounted build-time
/// path.
class VectorStore {
 public:
  static VectorStore open(const std::string& path, ElemKind kind, std::size_t dim,
                          StoreFormat format = StoreFormat::kAuto, Backing backing = Backing::kMmap) {
    require(dim > 0, ErrorCode::kInvalidArgument, "open_store: dim must be positive");
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    require(!ec, ErrorCode::kIo, "open_store: cannot stat " + path);

    if (format == StoreFormat::kAuto) format = io::has_magic(path, kRawMagic) ? StoreFormat::kRaw : StoreFormat::kVecs;

    auto impl = std::make_unique<Impl>();
    impl->path = path;
    impl->kind = kind;
    impl->dim = dim;
    impl->payload = dim * elem_width(kind);
    impl->backing = backing;
    impl->file_size = size;

    if (format == StoreFormat::kVecs) {
      impl->stride = impl->payload + 4;
      impl->header = 0;
      impl->record_prefix = 4;
      require(size % impl->stride == 0, ErrorCode::kFormat,
              "open_store: size of " + path + " is not a multiple of the record stride");
      impl->count = size / impl->stride;
    } else {
      io::Reader r(path);
      r.expect_magic(kRawMagic);
      const auto version = r.get<std::uint32_t>();
      require(version == kRawVersion, ErrorCode::kFormat, "open_store: unsupported raw store version");
      const auto count = r.get<std::uint64_t>();
      const auto fdim = r.get<std::uint32_t>();
      const auto fkind = r.get<std::uint8_t>();
      require(fdim == dim && fkind == static_cast<std::uint8_t>(kind), ErrorCode::kFormat,
              "open_store: raw header does not match requested dim/kind");
      impl->stride = impl->payload;
      impl->header = kRawHeaderBytes;
      impl->record_prefix = 0;
      require(size == kRawHeaderBytes + count * impl->stride, ErrorCode::kFormat,
              "open_store: raw store size does not match header");
      impl->count = count;
    }

    impl->fd = ::open(path.c_str(), O_RDONLY);
    require(impl->fd >= 0, ErrorCode::kIo, "open_store: cannot open " + path);
    if (backing == Backing::kDirect) {
      impl->direct_fd = ::open(path.c_str(), O_RDONLY | O_DIRECT);
      require(impl->direct_fd >= 0, ErrorCode::kIo, "open_store: O_DIRECT is not supported for " + path);
    }
    if (backing == Backing::kMmap && size > 0) {
      void* p = ::mmap(nullptr, size, PROT_READ, MAP_SHARED, impl->fd, 0);
      require(p != MAP_FAILED, ErrorCode::kIo, "open_store: mmap failed for " + path);
      impl->map = static_cast<const std::byte*>(p);
    }

    VectorStore store(std::move(impl));
    if (format == StoreFormat::kVecs) store.validate_vecs_headers();
    return store;
  }

  std::size_t count() const { return impl_->count; }
  std::size_t dim() const { return impl_->dim; }
  ElemKind elem_kind() const { return impl_->kind; }
  const std::string& path() const { return impl_->path; }
  /// Bytes of one record including any per-record prefix.
  std::size_t stride() const { return impl_->stride; }
  std::size_t payload_bytes() const { return impl_->payload; }

  /// Counted fetch of row i, widened into `out`.
  void fetch(std::size_t i, std::span<float> out, FetchContext* ctx = nullptr) const {
    check_index(i);
    account(i, ctx);
    if (impl_->direct_fd < 0) {
      read(i, out);
      return;
    }
    require(out.size() == dim(), ErrorCode::kMismatch, "fetch: output span has wrong dim");
    const std::byte* src = direct_payload(i, ctx);
    widen(src, out);
  }

  Backing backing() const { return impl_->backing; }

  /// Places row i at record slot slot_of[i] of the file. Used with stores
  /// written in cluster order so that a cluster's rows are contiguous.
  void set_layout(std::vector<std::uint32_t> slot_of) {
    require(slot_of.size() == impl_->count, ErrorCode::kMismatch, "set_layout: size does not match store");
    std::vector<bool> seen(slot_of.size(), false);
    for (auto s : slot_of) {
      require(s < slot_of.size() && !seen[s], ErrorCode::kInvalidArgument, "set_layout: not a permutation");
      seen[s] = true;
    }
    impl_->slot_of = std::move(slot_of);
  }
  const std::vector<std::uint32_t>& layout() const { return impl_->slot_of; }

  std::vector<float> fetch_vector(std::size_t i, FetchContext* ctx = nullptr) const {
    std::vector<float> v(dim());
    fetch(i, v, ctx);
    return v;
  }

  /// Uncounted read of row i (build paths, verification).
  void read(std::size_t i, std::span<float> out) const {
    check_index(i);
    require(out.size() == dim(), ErrorCode::kMismatch, "fetch: output span has wrong dim");
    if (impl_->kind == ElemKind::kFloat32) {
      read_payload(i, std::as_writable_bytes(out));
    } else {
      std::vector<std::byte> buf(impl_->payload);
      read_payload(i, buf);
      widen(buf.data(), out);
    }
  }

  std::vector<float> read_vector(std::size_t i) const {
    std::vector<float> v(dim());
    read(i, v);
    return v;
  }

  /// Uncounted copy of the stored payload bytes of row i.
  std::vector<std::byte> read_record(std::size_t i) const {
    check_index(i);
    std::vector<std::byte> b(impl_->payload);
    read_payload(i, b);
    return b;
  }

  /// Loads all rows as float32, row-major. Uncounted.
  std::vector<float> read_all() const {
    std::vector<float> m(count() * dim());
    for (std::size_t i = 0; i < count(); ++i) read(i, std::span<float>(m.data() + i * dim(), dim()));
    return m;
  }

  std::uint64_t fetch_counter() const { return impl_->fetch_counter.load(std::memory_order_relaxed); }
  std::uint64_t page_counter() const { return impl_->page_counter.load(std::memory_order_relaxed); }

  void reset_counters() {
    std::lock_guard lock(impl_->page_mu);
    impl_->pages.clear();
    impl_->fetch_counter.store(0);
    impl_->page_counter.store(0);
  }

 private:
  struct Impl {
    std::string path;
    ElemKind kind = ElemKind::kFloat32;
    std::size_t dim = 0;
    std::size_t count = 0;
    std::size_t payload = 0;
    std::size_t stride = 0;
    std::size_t header = 0;
    std::size_t record_prefix = 0;
    std::uint64_t file_size = 0;
    Backing backing = Backing::kMmap;
    int fd = -1;
    int direct_fd = -1;
    std::vector<std::uint32_t> slot_of;  // empty means identity
    const std::byte* map = nullptr;
    std::atomic<std::uint64_t> fetch_counter{0};
    std::atomic<std::uint64_t> page_counter{0};
    std::mutex page_mu;
    std::unordered_set<std::uint64_t> pages;

    ~Impl() {
      if (map != nullptr) ::munmap(const_cast<std::byte*>(map), file_size);
      if (fd >= 0) ::close(fd);
      if (direct_fd >= 0) ::close(direct_fd);
    }
  };

  explicit VectorStore(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}

  void check_index(std::size_t i) const {
    require(i < impl_->count, ErrorCode::kOutOfRange,
            "fetch: index " + std::to_string(i) + " out of range (count " + std::to_string(impl_->count) + ")");
  }

  std::uint64_t record_offset(std::size_t i) const {
    const std::size_t slot = impl_->slot_of.empty() ? i : impl_->slot_of[i];
    return impl_->header + slot * impl_->stride;
  }

  void widen(const std::byte* src, std::span<float> out) const {
    if (impl_->kind == ElemKind::kFloat32) {
      std::memcpy(out.data(), src, impl_->payload);
    } else {
      for (std::size_t j = 0; j < dim(); ++j) out[j] = static_cast<float>(std::to_integer<std::uint8_t>(src[j]));
    }
  }

  static std::byte* aligned_buffer(std::size_t bytes) {
    void* p = std::aligned_alloc(kPageSize, bytes);
    require(p != nullptr, ErrorCode::kIo, "fetch: cannot allocate aligned buffer");
    return static_cast<std::byte*>(p);
  }

  /// Reads [start, start + len) with O_DIRECT; start and len page aligned.
  /// Returns the number of valid bytes (short at end of file).
  std::size_t direct_read(std::byte* dst, std::uint64_t start, std::size_t len) const {
    std::size_t done = 0;
    while (done < len) {
      const auto n = ::pread(impl_->direct_fd, dst + done, len - done, static_cast<off_t>(start + done));
      require(n >= 0, ErrorCode::kIo, "fetch: direct read failed on " + impl_->path);
      if (n == 0) break;
      done += static_cast<std::size_t>(n);
    }
    return done;
  }

  const std::byte* direct_payload(std::size_t i, FetchContext* ctx) const {
    const std::uint64_t off = record_offset(i) + impl_->record_prefix;
    const std::uint64_t first = off / kPageSize * kPageSize;
    const std::uint64_t end = (off + impl_->payload + kPageSize - 1) / kPageSize * kPageSize;
    const std::size_t need = static_cast<std::size_t>(end - first);
    if (ctx == nullptr) {
      thread_local std::unique_ptr<std::byte, FetchContext::FreeAligned> scratch;
      thread_local std::size_t scratch_len = 0;
      if (scratch_len < need) {
        scratch.reset(aligned_buffer(need));
        scratch_len = need;
      }
      const auto got = direct_read(scratch.get(), first, need);
      require(got >= off + impl_->payload - first, ErrorCode::kIo, "fetch: short direct read");
      return scratch.get() + (off - first);
    }
    if (ctx->win_len_ > 0 && off >= ctx->win_start_ && off + impl_->payload <= ctx->win_start_ + ctx->win_len_)
      return ctx->window_.get() + (off - ctx->win_start_);
    if (!ctx->window_) ctx->window_.reset(aligned_buffer(FetchContext::kMaxWindow));
    // a miss starting inside or right after the last window continues it
    const bool sequential =
        ctx->win_len_ > 0 && first >= ctx->win_start_ && first <= ctx->win_start_ + ctx->last_read_;
    std::size_t len = sequential ? std::min(ctx->last_read_ * 2, FetchContext::kMaxWindow) : kPageSize;
    len = std::max(len, need);
    require(len <= FetchContext::kMaxWindow, ErrorCode::kIo, "fetch: record larger than read window");
    const auto got = direct_read(ctx->window_.get(), first, len);
    require(got >= off + impl_->payload - first, ErrorCode::kIo, "fetch: short direct read");
    ctx->win_start_ = first;
    ctx->win_len_ = got;
    ctx->last_read_ = len;
    ++ctx->device_reads_;
    ctx->device_bytes_ += len;
    return ctx->window_.get() + (off - first);
  }

  void read_payload(std::size_t i, std::span<std::byte> dst) const {
    const std::uint64_t off = record_offset(i) + impl_->record_prefix;
    if (impl_->map != nullptr) {
      std::memcpy(dst.data(), impl_->map + off, dst.size());
      return;
    }
    std::size_t done = 0;
    while (done < dst.size()) {
      const auto n = ::pread(impl_->fd, dst.data() + done, dst.size() - done, static_cast<off_t>(off + done));
      require(n > 0, ErrorCode::kIo, "fetch: pread failed on " + impl_->path);
      done += static_cast<std::size_t>(n);
    }
  }

  void account(std::size_t i, FetchContext* ctx) const {
    impl_->fetch_counter.fetch_add(1, std::memory_order_relaxed);
    const std::uint64_t first = record_offset(i) / kPageSize;
    const std::uint64_t last = (record_offset(i) + impl_->stride - 1) / kPageSize;
    std::uint64_t fresh = 0;
    if (ctx != nullptr) {
      ++ctx->fetches_;
      for (auto p = first; p <= last; ++p) fresh += ctx->pages_.insert(p).second ? 1 : 0;
      ctx->new_pages_ += fresh;
    } else {
      std::lock_guard lock(impl_->page_mu);
      for (auto p = first; p <= last; ++p) fresh += impl_->pages.insert(p).second ? 1 : 0;
    }
    impl_->page_counter.fetch_add(fresh, std::memory_order_relaxed);
  }

  void validate_vecs_headers() const {
    for (std::size_t i = 0; i < impl_->count; ++i) {
      std::int32_t d = 0;
      const std::uint64_t off = record_offset(i);
      if (impl_->map != nullptr) {
        std::memcpy(&d, impl_->map + off, 4);
      } else {
        require(::pread(impl_->fd, &d, 4, static_cast<off_t>(off)) == 4, ErrorCode::kIo, "open_store: read failed");
      }
      require(d == static_cast<std::int32_t>(impl_->dim), ErrorCode::kFormat,
              "open_store: record " + std::to_string(i) + " declares dim " + std::to_string(d));
      if (impl_->map == nullptr) break;  // buffered backing checks the first record only
    }
  }

  std::unique_ptr<Impl> impl_;
};

// ---------------------------------------------------------------------------
// Dataset files. fvecs / bvecs / ivecs: int32 dim followed by dim elements.

/// Dense row-major matrix loaded into memory.
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  std::span<const T> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  std::span<T> row(std::size_t i) { return {data.data() + i * cols, cols}; }
};

template <typename T>
Matrix<T> read_vecs(const std::string& path) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  require(!ec, ErrorCode::kIo, "read_vecs: cannot stat " + path);
  Matrix<T> m;
  if (size == 0) return m;
  io::Reader r(path);
  const auto d = r.get<std::int32_t>();
  require(d > 0, ErrorCode::kFormat, "read_vecs: non-positive dim in " + path);
  const std::size_t stride = 4 + static_cast<std::size_t>(d) * sizeof(T);
  require(size % stride == 0, ErrorCode::kFormat, "read_vecs: size is not a multiple of the record stride: " + path);
  m.rows = size / stride;
  m.cols = static_cast<std::size_t>(d);
  m.data.resize(m.rows * m.cols);
  io::Reader again(path);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const auto di = again.get<std::int32_t>();
    require(di == d, ErrorCode::kFormat, "read_vecs: inconsistent record dim in " + path);
    auto row = again.get_vec<T>(m.cols);
    std::copy(row.begin(), row.end(), m.data.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
  }
  return m;
}

template <typename T>
void write_vecs(const std::string& path, const Matrix<T>& m) {
  io::Writer w(path);
  for (std::size_t i = 0; i < m.rows; ++i) {
    w.put(static_cast<std::int32_t>(m.cols));
    w.put_span(m.row(i));
  }
  w.close();
}

inline Matrix<float> read_fvecs(const std::string& path) { return read_vecs<float>(path); }
inline Matrix<std::uint8_t> read_bvecs(const std::string& path) { return read_vecs<std::uint8_t>(path); }
inline Matrix<std::int32_t> read_ivecs(const std::string& path) { return read_vecs<std::int32_t>(path); }
inline void write_fvecs(const std::string& path, const Matrix<float>& m) { write_vecs(path, m); }
inline void write_bvecs(const std::string& path, const Matrix<std::uint8_t>& m) { write_vecs(path, m); }
inline void write_ivecs(const std::string& path, const Matrix<std::int32_t>& m) { write_vecs(path, m); }

/// Writes the internal "ORCV" raw store.
template <typename T>
void write_raw_store(const std::string& path, const Matrix<T>& m) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, std::uint8_t>);
  io::Writer w(path);
  w.put_bytes(kRawMagic);
  w.put(kRawVersion);
  w.put(static_cast<std::uint64_t>(m.rows));
  w.put(static_cast<std::uint32_t>(m.cols));
  w.put(static_cast<std::uint8_t>(std::is_same_v<T, float> ? ElemKind::kFloat32 : ElemKind::kUInt8));
  w.put_span(std::span<const T>(m.data));
  w.close();
}

inline constexpr std::string_view kLayoutMagic = "ORLY";

/// Rewrites `src` as a raw store whose slot j holds row order[j], and
/// returns the row -> slot map to pass to set_layout() on the new file.
inline std::vector<std::uint32_t> write_reordered_store(const std::string& path, const VectorStore& src,
                                                        std::span<const std::uint32_t> order) {
  require(order.size() == src.count(), ErrorCode::kMismatch, "write_reordered_store: order size mismatch");
  std::vector<std::uint32_t> slot_of(src.count(), kNone);
  for (std::uint32_t j = 0; j < order.size(); ++j) {
    require(order[j] < src.count() && slot_of[order[j]] == kNone, ErrorCode::kInvalidArgument,
            "write_reordered_store: order is not a permutation");
    slot_of[order[j]] = j;
  }
  io::Writer w(path);
  w.put_bytes(kRawMagic);
  w.put(kRawVersion);
  w.put(static_cast<std::uint64_t>(src.count()));
  w.put(static_cast<std::uint32_t>(src.dim()));
  w.put(static_cast<std::uint8_t>(src.elem_kind()));
  for (auto id : order) {
    const auto rec = src.read_record(id);
    w.put_span(std::span<const std::byte>(rec));
  }
  w.close();
  return slot_of;
}

inline void save_layout(const std::string& path, std::span<const std::uint32_t> slot_of) {
  io::Writer w(path);
  w.put_bytes(kLayoutMagic);
  w.put(static_cast<std::uint64_t>(slot_of.size()));
  w.put_span(slot_of);
  w.close();
}

inline std::vector<std::uint32_t> load_layout(const std::string& path) {
  io::Reader r(path);
  r.expect_magic(kLayoutMagic);
  auto v = r.get_vec<std::uint32_t>(r.get<std::uint64_t>());
  require(r.at_end(), ErrorCode::kFormat, "layout: trailing bytes in " + path);
  return v;
}

}  // namespace skewann
