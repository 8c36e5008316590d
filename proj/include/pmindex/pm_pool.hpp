#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace pmindex {

// Byte offset into the pool. Word operations require 8-byte alignment.
using PmAddr = std::uint64_t;

inline constexpr PmAddr kNullAddr = 0;
inline constexpr std::size_t kCacheLineSize = 64;
inline constexpr std::size_t kWordSize = 8;
inline constexpr std::size_t kWordsPerLine = kCacheLineSize / kWordSize;

inline constexpr std::uint64_t line_of(PmAddr addr) { return addr / kCacheLineSize; }
inline constexpr std::uint64_t word_in_line(PmAddr addr) { return (addr / kWordSize) % kWordsPerLine; }

class PoolFault : public std::logic_error {
 public:
  explicit PoolFault(const std::string& what) : std::logic_error(what) {}
};

enum class EventKind : std::uint8_t { Store, Flush, Fence, Alloc, OpBegin, OpEnd };

// Operation tags carried on OpBegin events; the harness keys crash-site
// coverage and durability attribution off these.
enum class OpTag : std::uint32_t {
  None = 0,
  ClhtInsert,
  ClhtDelete,
  ClhtRehash,
  BwInsert,
  BwDelete,
  BwConsolidate,
  BwSplit,
  BwMerge,
  ArtInsert,
  ArtDelete,
  ArtPathSplit,
  ArtFix,
  Init,
  Other,
};

struct PmEvent {
  std::uint64_t seq = 0;
  PmAddr addr = 0;            // Store: word addr; Flush: line base; Alloc: region start
  std::uint64_t arg0 = 0;     // Store: old word; Alloc: len; OpBegin/OpEnd: op id
  std::uint64_t arg1 = 0;     // Store: new word; OpBegin: tag
  EventKind kind = EventKind::Store;
  std::uint16_t thread = 0;
};

struct CrashPolicy {
  enum class Mode : std::uint8_t { Strict, Adversarial };
  Mode mode = Mode::Strict;
  std::uint64_t seed = 0;

  static CrashPolicy strict() { return {Mode::Strict, 0}; }
  static CrashPolicy adversarial(std::uint64_t seed) { return {Mode::Adversarial, seed}; }
};

// Verdict returned by a crash hook after each Store event.
//   Continue - keep running.
//   AbortOp  - unwind the in-flight index operation, pool keeps running
//              (models a thread that stopped mid-operation without cleanup).
//   Crash    - freeze the pool; all later stores/flushes are discarded until
//              crash_in_place() derives the post-crash state.
enum class HookVerdict : std::uint8_t { Continue, AbortOp, Crash };

using CrashHook = std::function<HookVerdict(const PmEvent&)>;

// Thrown out of store8/cas8 when the hook votes Crash. Index code must let it
// propagate; the harness catches it at the operation boundary.
struct CrashUnwind {};
// Same, for the AbortOp verdict.
struct OpAbort {};

struct Counters {
  std::uint64_t stores = 0;
  std::uint64_t clwbs = 0;
  std::uint64_t mfences = 0;

  Counters operator-(const Counters& o) const {
    return {stores - o.stores, clwbs - o.clwbs, mfences - o.mfences};
  }
  bool operator==(const Counters&) const = default;
};

// Process-wide small thread slot (0..kMaxPoolThreads), reused after thread exit.
inline constexpr unsigned kMaxPoolThreads = 64;
unsigned pm_thread_slot();

// Simulated persistent memory with x86-like persistence semantics: 8-byte
// failure-atomic stores land in a volatile image; flush_line captures a line's
// volatile contents; a later fence makes captured lines durable. Crash states
// are derived from the durable image plus (Adversarial) a seeded word-granular
// subset of not-yet-durable stores. Stores/flushes/fences are traced into an
// append-only event log when tracing is enabled.
class PmemPool {
 public:
  static constexpr std::uint64_t kDefaultSize = 4ull << 30;  // sparse, demand-backed

  explicit PmemPool(std::uint64_t size = kDefaultSize);
  ~PmemPool();
  PmemPool(const PmemPool&) = delete;
  PmemPool& operator=(const PmemPool&) = delete;

  std::uint64_t size() const { return size_; }

  // --- word operations ------------------------------------------------
  void store8(PmAddr addr, std::uint64_t value);
  std::uint64_t load8(PmAddr addr) const;
  // Atomic with respect to all other word operations on the pool.
  bool cas8(PmAddr addr, std::uint64_t expected, std::uint64_t desired);
  // Word-aligned bulk helpers; issue one store/load per word.
  void store_bytes(PmAddr addr, std::span<const std::uint8_t> data);
  void load_bytes(PmAddr addr, std::span<std::uint8_t> out) const;
  std::uint64_t fetch_add8(PmAddr addr, std::uint64_t delta);

  // --- persistence ----------------------------------------------------
  void flush_line(PmAddr addr);
  void fence();

  // --- tracing & counters ----------------------------------------------
  void set_tracing(bool on) { tracing_.store(on, std::memory_order_relaxed); }
  bool tracing() const { return tracing_.load(std::memory_order_relaxed); }
  Counters counters() const;
  Counters thread_counters() const;  // calling thread only

  std::uint64_t begin_op(OpTag tag);   // returns op id, logs OpBegin
  void end_op(std::uint64_t op_id);    // logs OpEnd (the acknowledgment point)
  void drop_op(std::uint64_t op_id);   // pops scope without OpEnd (aborted op)
  OpTag current_op_tag() const;        // innermost scope of calling thread
  std::uint64_t store_ordinal_in_op() const;

  // RAII scope: logs OpEnd only if complete() was called.
  class OpScope {
   public:
    OpScope(PmemPool& pool, OpTag tag)
        : pool_(pool), begin_(pool.thread_counters()), op_id_(pool.begin_op(tag)) {}
    ~OpScope() {
      if (!done_) pool_.drop_op(op_id_);
    }
    OpScope(const OpScope&) = delete;
    OpScope& operator=(const OpScope&) = delete;
    Counters complete() {
      pool_.end_op(op_id_);
      done_ = true;
      return pool_.thread_counters() - begin_;
    }
    std::uint64_t op_id() const { return op_id_; }

   private:
    PmemPool& pool_;
    Counters begin_;
    std::uint64_t op_id_;
    bool done_ = false;
  };

  // --- crash machinery --------------------------------------------------
  void set_crash_hook(CrashHook hook);
  void clear_crash_hook();
  bool crashed() const { return crashed_.load(std::memory_order_acquire); }

  // Deterministic snapshot of the pool under the given policy. Copies the
  // whole address space; intended for small pools and failure dumps.
  std::vector<std::uint8_t> persisted_view(const CrashPolicy& policy) const;

  // Replace the volatile image with the persisted view, make it durable, and
  // reset all transient state (line tracking, event log, pending flushes,
  // open scopes, hook). Equivalent to power loss + reboot, without copying
  // the untouched part of the pool.
  void crash_in_place(const CrashPolicy& policy);

  // Reset the event log and line tracking without changing contents.
  void reset_trace();

  // Allocation events are logged on behalf of pm_alloc.
  void log_alloc(PmAddr addr, std::uint64_t len);
  // Non-traced initialization write: sets both images, leaves no dirt.
  // Used for boot-time scrubbing (lock words, recycled allocations).
  void scrub(PmAddr addr, std::uint64_t len);

  // --- event access -----------------------------------------------------
  // Events merged across shards in seq order.
  std::vector<PmEvent> events() const;
  std::uint64_t event_count() const;

  // --- snapshot files ----------------------------------------------------
  // Format: magic "PMPOOL01", u64 pool_size little-endian, raw bytes.
  void snapshot_to_file(const std::filesystem::path& path, const CrashPolicy& policy) const;
  static std::unique_ptr<PmemPool> open_from_file(const std::filesystem::path& path);
  static std::unique_ptr<PmemPool> from_image(std::span<const std::uint8_t> image);

 private:
  struct LineState {
    std::array<std::uint64_t, kWordsPerLine> word_seq{};  // last store seq per word
    std::uint64_t durable_seq = 0;                        // seq of last fenced flush
    bool divergent() const {
      for (auto s : word_seq)
        if (s > durable_seq) return true;
      return false;
    }
  };
  struct Shard {
    mutable std::mutex mu;
    std::unordered_map<std::uint64_t, LineState> lines;
    std::vector<PmEvent> log;
  };
  struct PendingFlush {
    std::uint64_t line;
    std::uint64_t flush_seq;
    std::array<std::uint8_t, kCacheLineSize> bytes;
  };
  struct alignas(64) ThreadState {
    Counters counts;
    std::vector<std::pair<std::uint64_t, OpTag>> scope_stack;  // (op_id, tag)
    std::uint64_t stores_in_op = 0;
  };

  static constexpr unsigned kShards = 64;

  Shard& shard_for_line(std::uint64_t line) { return shards_[line % kShards]; }
  const Shard& shard_for_line(std::uint64_t line) const { return shards_[line % kShards]; }
  void check_word_addr(PmAddr addr) const;
  void append_event(Shard& sh, PmEvent ev);
  HookVerdict run_hook(const PmEvent& ev);
  void apply_crash_words(const CrashPolicy& policy,
                         const std::function<void(PmAddr, std::uint64_t)>& emit) const;

  std::uint8_t* vol_ = nullptr;
  std::uint8_t* dur_ = nullptr;
  std::uint64_t size_ = 0;

  std::atomic<std::uint64_t> seq_{1};
  std::atomic<std::uint64_t> next_op_id_{1};
  std::array<Shard, kShards> shards_;

  mutable std::mutex flush_mu_;  // ordered before shard mutexes
  std::vector<PendingFlush> pending_;

  std::atomic<std::uint64_t> g_stores_{0}, g_clwbs_{0}, g_mfences_{0};
  std::array<ThreadState, kMaxPoolThreads> threads_{};

  std::atomic<bool> tracing_{true};
  std::atomic<bool> crashed_{false};
  std::atomic<bool> hook_armed_{false};
  CrashHook hook_;
  mutable std::mutex hook_mu_;
};

// Deterministic 64-bit mix (splitmix64 finalizer).
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace pmindex
