#include "pmindex/pm_pool.hpp"

#include <sys/mman.h>

#include <algorithm>
#include <cassert>
#include <cstdio>
#include <fstream>
#include <map>

namespace pmindex {

namespace {

struct SlotRegistry {
  std::mutex mu;
  std::vector<unsigned> free_slots;
  unsigned next = 0;

  unsigned acquire() {
    std::lock_guard g(mu);
    if (!free_slots.empty()) {
      unsigned s = free_slots.back();
      free_slots.pop_back();
      return s;
    }
    if (next >= kMaxPoolThreads) throw PoolFault("pm_thread_slot: too many concurrent threads");
    return next++;
  }
  void release(unsigned s) {
    std::lock_guard g(mu);
    free_slots.push_back(s);
  }
};

SlotRegistry& slot_registry() {
  static SlotRegistry reg;
  return reg;
}

struct SlotGuard {
  unsigned slot;
  SlotGuard() : slot(slot_registry().acquire()) {}
  ~SlotGuard() { slot_registry().release(slot); }
};

std::uint8_t* map_zeroed(std::uint64_t size) {
  void* p = ::mmap(nullptr, size, PROT_READ | PROT_WRITE,
                   MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
  if (p == MAP_FAILED) throw std::bad_alloc();
  return static_cast<std::uint8_t*>(p);
}

}  // namespace

unsigned pm_thread_slot() {
  thread_local SlotGuard guard;
  return guard.slot;
}

PmemPool::PmemPool(std::uint64_t size) : size_(size) {
  if (size_ == 0 || size_ % kCacheLineSize != 0)
    throw PoolFault("pool size must be a positive multiple of 64");
  vol_ = map_zeroed(size_);
  dur_ = map_zeroed(size_);
  for (auto& sh : shards_) sh.log.reserve(1024);
}

PmemPool::~PmemPool() {
  if (vol_) ::munmap(vol_, size_);
  if (dur_) ::munmap(dur_, size_);
}

void PmemPool::check_word_addr(PmAddr addr) const {
  if (addr % kWordSize != 0) throw PoolFault("unaligned word address");
  if (addr + kWordSize > size_) throw PoolFault("word address out of bounds");
}

void PmemPool::append_event(Shard& sh, PmEvent ev) {
  if (tracing_.load(std::memory_order_relaxed)) sh.log.push_back(ev);
}

HookVerdict PmemPool::run_hook(const PmEvent& ev) {
  if (!hook_armed_.load(std::memory_order_relaxed)) return HookVerdict::Continue;
  CrashHook hook;
  {
    std::lock_guard g(hook_mu_);
    hook = hook_;
  }
  if (!hook) return HookVerdict::Continue;
  return hook(ev);
}

void PmemPool::store8(PmAddr addr, std::uint64_t value) {
  check_word_addr(addr);
  if (crashed_.load(std::memory_order_acquire)) return;
  const std::uint64_t line = line_of(addr);
  Shard& sh = shard_for_line(line);
  PmEvent ev;
  {
    std::lock_guard g(sh.mu);
    auto ref = std::atomic_ref<std::uint64_t>(*reinterpret_cast<std::uint64_t*>(vol_ + addr));
    const std::uint64_t old = ref.load(std::memory_order_relaxed);
    const std::uint64_t seq = seq_.fetch_add(1, std::memory_order_relaxed);
    ref.store(value, std::memory_order_release);
    sh.lines[line].word_seq[word_in_line(addr)] = seq;
    const unsigned tid = pm_thread_slot();
    ev = PmEvent{seq, addr, old, value, EventKind::Store, static_cast<std::uint16_t>(tid)};
    append_event(sh, ev);
    g_stores_.fetch_add(1, std::memory_order_relaxed);
    threads_[tid].counts.stores++;
    threads_[tid].stores_in_op++;
  }
  switch (run_hook(ev)) {
    case HookVerdict::Continue:
      return;
    case HookVerdict::AbortOp:
      throw OpAbort{};
    case HookVerdict::Crash:
      crashed_.store(true, std::memory_order_release);
      throw CrashUnwind{};
  }
}

std::uint64_t PmemPool::load8(PmAddr addr) const {
  check_word_addr(addr);
  auto ref = std::atomic_ref<const std::uint64_t>(*reinterpret_cast<const std::uint64_t*>(vol_ + addr));
  return ref.load(std::memory_order_acquire);
}

bool PmemPool::cas8(PmAddr addr, std::uint64_t expected, std::uint64_t desired) {
  check_word_addr(addr);
  if (crashed_.load(std::memory_order_acquire)) return false;
  const std::uint64_t line = line_of(addr);
  Shard& sh = shard_for_line(line);
  PmEvent ev;
  bool ok;
  {
    std::lock_guard g(sh.mu);
    auto ref = std::atomic_ref<std::uint64_t>(*reinterpret_cast<std::uint64_t*>(vol_ + addr));
    std::uint64_t exp = expected;
    ok = ref.compare_exchange_strong(exp, desired, std::memory_order_acq_rel);
    if (ok) {
      const std::uint64_t seq = seq_.fetch_add(1, std::memory_order_relaxed);
      sh.lines[line].word_seq[word_in_line(addr)] = seq;
      const unsigned tid = pm_thread_slot();
      ev = PmEvent{seq, addr, expected, desired, EventKind::Store, static_cast<std::uint16_t>(tid)};
      append_event(sh, ev);
      g_stores_.fetch_add(1, std::memory_order_relaxed);
      threads_[tid].counts.stores++;
      threads_[tid].stores_in_op++;
    }
  }
  if (!ok) return false;
  switch (run_hook(ev)) {
    case HookVerdict::Continue:
      return true;
    case HookVerdict::AbortOp:
      throw OpAbort{};
    case HookVerdict::Crash:
      crashed_.store(true, std::memory_order_release);
      throw CrashUnwind{};
  }
  return true;
}

std::uint64_t PmemPool::fetch_add8(PmAddr addr, std::uint64_t delta) {
  for (;;) {
    std::uint64_t cur = load8(addr);
    if (cas8(addr, cur, cur + delta)) return cur;
  }
}

void PmemPool::store_bytes(PmAddr addr, std::span<const std::uint8_t> data) {
  if (addr % kWordSize != 0 || data.size() % kWordSize != 0)
    throw PoolFault("store_bytes requires word alignment");
  for (std::size_t i = 0; i < data.size(); i += kWordSize) {
    std::uint64_t w;
    std::memcpy(&w, data.data() + i, kWordSize);
    store8(addr + i, w);
  }
}

void PmemPool::load_bytes(PmAddr addr, std::span<std::uint8_t> out) const {
  if (addr % kWordSize != 0 || out.size() % kWordSize != 0)
    throw PoolFault("load_bytes requires word alignment");
  for (std::size_t i = 0; i < out.size(); i += kWordSize) {
    std::uint64_t w = load8(addr + i);
    std::memcpy(out.data() + i, &w, kWordSize);
  }
}

void PmemPool::flush_line(PmAddr addr) {
  if (addr >= size_) throw PoolFault("flush_line out of bounds");
  if (crashed_.load(std::memory_order_acquire)) return;
  const std::uint64_t line = line_of(addr);
  std::lock_guard fg(flush_mu_);
  Shard& sh = shard_for_line(line);
  PendingFlush pf;
  pf.line = line;
  {
    std::lock_guard g(sh.mu);
    const std::uint64_t seq = seq_.fetch_add(1, std::memory_order_relaxed);
    pf.flush_seq = seq;
    std::memcpy(pf.bytes.data(), vol_ + line * kCacheLineSize, kCacheLineSize);
    const unsigned tid = pm_thread_slot();
    append_event(sh, PmEvent{seq, line * kCacheLineSize, 0, 0, EventKind::Flush,
                             static_cast<std::uint16_t>(tid)});
    g_clwbs_.fetch_add(1, std::memory_order_relaxed);
    threads_[tid].counts.clwbs++;
  }
  pending_.push_back(pf);
}

void PmemPool::fence() {
  if (crashed_.load(std::memory_order_acquire)) return;
  std::lock_guard fg(flush_mu_);
  for (const PendingFlush& pf : pending_) {
    Shard& sh = shard_for_line(pf.line);
    std::lock_guard g(sh.mu);
    std::memcpy(dur_ + pf.line * kCacheLineSize, pf.bytes.data(), kCacheLineSize);
    auto& ls = sh.lines[pf.line];
    ls.durable_seq = std::max(ls.durable_seq, pf.flush_seq);
  }
  pending_.clear();
  const std::uint64_t seq = seq_.fetch_add(1, std::memory_order_relaxed);
  const unsigned tid = pm_thread_slot();
  Shard& sh = shards_[seq % kShards];
  {
    std::lock_guard g(sh.mu);
    append_event(sh, PmEvent{seq, 0, 0, 0, EventKind::Fence, static_cast<std::uint16_t>(tid)});
  }
  g_mfences_.fetch_add(1, std::memory_order_relaxed);
  threads_[tid].counts.mfences++;
}

Counters PmemPool::counters() const {
  return {g_stores_.load(std::memory_order_relaxed), g_clwbs_.load(std::memory_order_relaxed),
          g_mfences_.load(std::memory_order_relaxed)};
}

Counters PmemPool::thread_counters() const { return threads_[pm_thread_slot()].counts; }

std::uint64_t PmemPool::begin_op(OpTag tag) {
  const std::uint64_t id = next_op_id_.fetch_add(1, std::memory_order_relaxed);
  const unsigned tid = pm_thread_slot();
  ThreadState& ts = threads_[tid];
  ts.scope_stack.emplace_back(id, tag);
  ts.stores_in_op = 0;
  const std::uint64_t seq = seq_.fetch_add(1, std::memory_order_relaxed);
  Shard& sh = shards_[seq % kShards];
  std::lock_guard g(sh.mu);
  append_event(sh, PmEvent{seq, 0, id, static_cast<std::uint64_t>(tag), EventKind::OpBegin,
                           static_cast<std::uint16_t>(tid)});
  return id;
}

void PmemPool::end_op(std::uint64_t op_id) {
  const unsigned tid = pm_thread_slot();
  ThreadState& ts = threads_[tid];
  if (ts.scope_stack.empty() || ts.scope_stack.back().first != op_id)
    throw PoolFault("unbalanced op scope");
  ts.scope_stack.pop_back();
  const std::uint64_t seq = seq_.fetch_add(1, std::memory_order_relaxed);
  Shard& sh = shards_[seq % kShards];
  std::lock_guard g(sh.mu);
  append_event(sh, PmEvent{seq, 0, op_id, 0, EventKind::OpEnd, static_cast<std::uint16_t>(tid)});
}

void PmemPool::drop_op(std::uint64_t op_id) {
  ThreadState& ts = threads_[pm_thread_slot()];
  // Aborted ops may unwind through several nested scopes.
  while (!ts.scope_stack.empty()) {
    bool hit = ts.scope_stack.back().first == op_id;
    ts.scope_stack.pop_back();
    if (hit) return;
  }
}

OpTag PmemPool::current_op_tag() const {
  const ThreadState& ts = threads_[pm_thread_slot()];
  return ts.scope_stack.empty() ? OpTag::None : ts.scope_stack.back().second;
}

std::uint64_t PmemPool::store_ordinal_in_op() const { return threads_[pm_thread_slot()].stores_in_op; }

void PmemPool::set_crash_hook(CrashHook hook) {
  std::lock_guard g(hook_mu_);
  hook_ = std::move(hook);
  hook_armed_.store(static_cast<bool>(hook_), std::memory_order_relaxed);
}

void PmemPool::clear_crash_hook() { set_crash_hook(nullptr); }

void PmemPool::apply_crash_words(const CrashPolicy& policy,
                                 const std::function<void(PmAddr, std::uint64_t)>& emit) const {
  // Adversarial: per word, walk not-yet-durable stores in seq order and keep
  // each with independent probability 1/2; last kept store wins. Word values
  // are taken from the event log, so Adversarial derivation requires tracing.
  if (policy.mode != CrashPolicy::Mode::Adversarial) return;
  std::map<PmAddr, std::vector<std::pair<std::uint64_t, std::uint64_t>>> cand;  // addr -> (seq,value)
  for (const Shard& sh : shards_) {
    std::lock_guard g(sh.mu);
    for (const PmEvent& ev : sh.log) {
      if (ev.kind != EventKind::Store) continue;
      auto it = sh.lines.find(line_of(ev.addr));
      const std::uint64_t durable = it == sh.lines.end() ? 0 : it->second.durable_seq;
      if (ev.seq > durable) cand[ev.addr].emplace_back(ev.seq, ev.arg1);
    }
  }
  for (auto& [addr, stores] : cand) {
    std::sort(stores.begin(), stores.end());
    bool chosen = false;
    std::uint64_t value = 0;
    for (auto& [seq, v] : stores) {
      if (mix64(policy.seed ^ mix64(seq) ^ addr) & 1) {
        chosen = true;
        value = v;
      }
    }
    if (chosen) emit(addr, value);
  }
}

std::vector<std::uint8_t> PmemPool::persisted_view(const CrashPolicy& policy) const {
  std::vector<std::uint8_t> out(size_);
  {
    std::lock_guard fg(flush_mu_);
    std::memcpy(out.data(), dur_, size_);
  }
  apply_crash_words(policy, [&](PmAddr addr, std::uint64_t value) {
    std::memcpy(out.data() + addr, &value, kWordSize);
  });
  return out;
}

void PmemPool::crash_in_place(const CrashPolicy& policy) {
  std::lock_guard fg(flush_mu_);
  // Restore divergent lines from the durable image.
  for (Shard& sh : shards_) {
    std::lock_guard g(sh.mu);
    for (auto& [line, ls] : sh.lines) {
      if (ls.divergent())
        std::memcpy(vol_ + line * kCacheLineSize, dur_ + line * kCacheLineSize, kCacheLineSize);
    }
  }
  apply_crash_words(policy, [&](PmAddr addr, std::uint64_t value) {
    std::memcpy(vol_ + addr, &value, kWordSize);
    std::memcpy(dur_ + addr, &value, kWordSize);
  });
  for (Shard& sh : shards_) {
    std::lock_guard g(sh.mu);
    sh.lines.clear();
    sh.log.clear();
  }
  pending_.clear();
  for (ThreadState& ts : threads_) {
    ts.scope_stack.clear();
    ts.stores_in_op = 0;
  }
  {
    std::lock_guard g(hook_mu_);
    hook_ = nullptr;
    hook_armed_.store(false, std::memory_order_relaxed);
  }
  crashed_.store(false, std::memory_order_release);
}

void PmemPool::reset_trace() {
  std::lock_guard fg(flush_mu_);
  for (Shard& sh : shards_) {
    std::lock_guard g(sh.mu);
    sh.log.clear();
  }
}

void PmemPool::log_alloc(PmAddr addr, std::uint64_t len) {
  const std::uint64_t seq = seq_.fetch_add(1, std::memory_order_relaxed);
  const unsigned tid = pm_thread_slot();
  Shard& sh = shards_[seq % kShards];
  std::lock_guard g(sh.mu);
  append_event(sh, PmEvent{seq, addr, len, 0, EventKind::Alloc, static_cast<std::uint16_t>(tid)});
}

void PmemPool::scrub(PmAddr addr, std::uint64_t len) {
  if (addr + len > size_) throw PoolFault("scrub out of bounds");
  std::memset(vol_ + addr, 0, len);
  std::memset(dur_ + addr, 0, len);
}

std::vector<PmEvent> PmemPool::events() const {
  std::vector<PmEvent> all;
  for (const Shard& sh : shards_) {
    std::lock_guard g(sh.mu);
    all.insert(all.end(), sh.log.begin(), sh.log.end());
  }
  std::sort(all.begin(), all.end(), [](const PmEvent& a, const PmEvent& b) { return a.seq < b.seq; });
  return all;
}

std::uint64_t PmemPool::event_count() const {
  std::uint64_t n = 0;
  for (const Shard& sh : shards_) {
    std::lock_guard g(sh.mu);
    n += sh.log.size();
  }
  return n;
}

void PmemPool::snapshot_to_file(const std::filesystem::path& path, const CrashPolicy& policy) const {
  std::vector<std::uint8_t> view = persisted_view(policy);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("snapshot_to_file: cannot open " + path.string());
  out.write("PMPOOL01", 8);
  std::uint64_t sz = view.size();
  std::uint8_t szle[8];
  for (int i = 0; i < 8; i++) szle[i] = static_cast<std::uint8_t>(sz >> (8 * i));
  out.write(reinterpret_cast<const char*>(szle), 8);
  out.write(reinterpret_cast<const char*>(view.data()), static_cast<std::streamsize>(view.size()));
  if (!out) throw std::runtime_error("snapshot_to_file: write failed");
}

std::unique_ptr<PmemPool> PmemPool::open_from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("open_from_file: cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "PMPOOL01", 8) != 0)
    throw std::runtime_error("open_from_file: bad magic");
  std::uint8_t szle[8];
  in.read(reinterpret_cast<char*>(szle), 8);
  if (!in) throw std::runtime_error("open_from_file: truncated header");
  std::uint64_t sz = 0;
  for (int i = 0; i < 8; i++) sz |= static_cast<std::uint64_t>(szle[i]) << (8 * i);
  if (sz == 0 || sz % kCacheLineSize != 0) throw std::runtime_error("open_from_file: bad size");
  auto pool = std::make_unique<PmemPool>(sz);
  in.read(reinterpret_cast<char*>(pool->vol_), static_cast<std::streamsize>(sz));
  if (static_cast<std::uint64_t>(in.gcount()) != sz)
    throw std::runtime_error("open_from_file: truncated image");
  std::memcpy(pool->dur_, pool->vol_, sz);
  return pool;
}

std::unique_ptr<PmemPool> PmemPool::from_image(std::span<const std::uint8_t> image) {
  if (image.empty() || image.size() % kCacheLineSize != 0)
    throw PoolFault("from_image: bad image size");
  auto pool = std::make_unique<PmemPool>(image.size());
  std::memcpy(pool->vol_, image.data(), image.size());
  std::memcpy(pool->dur_, image.data(), image.size());
  return pool;
}

}  // namespace pmindex
