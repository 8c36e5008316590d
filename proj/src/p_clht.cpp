#include "pmindex/p_clht.hpp"

#include <thread>

namespace pmindex {

namespace {

constexpr std::uint64_t magic_u64(const char (&s)[9]) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; i--) v = (v << 8) | static_cast<std::uint8_t>(s[i]);
  return v;
}

constexpr std::uint64_t kMagic = magic_u64("PCLHT001");
constexpr PmAddr kMagicAddr = 0;
constexpr PmAddr kRootLinkAddr = 8;

// Bucket layout, exactly one cache line.
constexpr std::uint64_t kOffLock = 0;
constexpr std::uint64_t kOffKey0 = 8;
constexpr std::uint64_t kOffVal0 = 32;
constexpr std::uint64_t kOffNext = 56;
constexpr unsigned kSlots = 3;

// TableMeta layout (one line).
constexpr std::uint64_t kMetaNumBuckets = 0;
constexpr std::uint64_t kMetaBuckets = 8;
constexpr std::uint64_t kMetaSeed = 16;

constexpr const char* kTagMeta = "clht/meta";
constexpr const char* kTagBuckets = "clht/buckets";
constexpr const char* kTagBucket = "clht/bucket";

}  // namespace

std::unique_ptr<PClht> PClht::open(PmemPool& pool, PmAllocator& alloc, LockTable& locks,
                                   Options opts, FaultInjection faults) {
  locks.reset_all();
  auto ht = std::unique_ptr<PClht>(new PClht(pool, alloc, opts, faults));
  const std::uint64_t magic = pool.load8(kMagicAddr);
  if (magic == 0) {
    PmemPool::OpScope scope(pool, OpTag::Init);
    const std::uint64_t nb = std::max<std::uint64_t>(1, opts.initial_table_bytes / kCacheLineSize);
    PmAddr buckets = alloc.alloc(nb * kCacheLineSize, kCacheLineSize, kTagBuckets);
    PmAddr meta = alloc.alloc(kCacheLineSize, kCacheLineSize, kTagMeta);
    if (buckets == kNullAddr || meta == kNullAddr) throw std::runtime_error("clht: pool too small");
    pool.store8(meta + kMetaNumBuckets, nb);
    pool.store8(meta + kMetaBuckets, buckets);
    pool.store8(meta + kMetaSeed, opts.hash_seed);
    persist(pool, meta, kCacheLineSize);
    pool.store8(kRootLinkAddr, meta);
    pool.store8(kMagicAddr, kMagic);  // commit point of initialization
    persist(pool, kMagicAddr, kCacheLineSize);
    scope.complete();
  } else if (magic != kMagic) {
    throw std::runtime_error("clht: unrecognized root magic");
  } else {
    // In-bucket lock words are persisted bytes with volatile meaning; zero
    // them all so a lock held at crash time cannot block recovery.
    TableRef t = ht->table();
    ht->opts_.hash_seed = pool.load8(t.meta + kMetaSeed);
    for (std::uint64_t i = 0; i < t.num_buckets; i++) {
      PmAddr b = t.buckets + i * kCacheLineSize;
      while (b != kNullAddr) {
        pool.scrub(b + kOffLock, kWordSize);
        b = pool.load8(b + kOffNext);
      }
    }
  }
  return ht;
}

PClht::TableRef PClht::table() const {
  TableRef t;
  t.meta = pool_.load8(kRootLinkAddr);
  t.num_buckets = pool_.load8(t.meta + kMetaNumBuckets);
  t.buckets = pool_.load8(t.meta + kMetaBuckets);
  return t;
}

PmAddr PClht::bucket_addr(const TableRef& t, std::uint64_t key) const {
  return t.buckets + (mix64(key ^ opts_.hash_seed) % t.num_buckets) * kCacheLineSize;
}

void PClht::lock_bucket(PmAddr bucket) {
  while (!pool_.cas8(bucket + kOffLock, 0, 1)) std::this_thread::yield();
}

void PClht::unlock_bucket(PmAddr bucket) { pool_.store8(bucket + kOffLock, 0); }

Ack PClht::insert(const Key& key, Value value) {
  if (key.size() != kIntKeyLen) return Ack::BadArgument;
  const std::uint64_t k = key.as_u64();
  if (k == 0 || value == 0) return Ack::BadArgument;

  PmemPool::OpScope scope(pool_, OpTag::ClhtInsert);
  std::shared_lock gate(resize_gate_);
  TableRef t = table();
  PmAddr head = bucket_addr(t, k);
  lock_bucket(head);

  PmAddr free_bucket = 0;
  unsigned free_slot = 0;
  PmAddr tail = head;
  std::uint32_t chain_len = 1;
  for (PmAddr b = head;;) {
    for (unsigned i = 0; i < kSlots; i++) {
      const std::uint64_t ki = pool_.load8(b + kOffKey0 + i * kWordSize);
      if (ki == k) {
        if (pool_.load8(b + kOffVal0 + i * kWordSize) != 0) {
          unlock_bucket(head);
          return Ack::Exists;
        }
        // Crash remnant: key word persisted without its value. The value
        // store is the commit point for this re-insert.
        pool_.store8(b + kOffVal0 + i * kWordSize, value);
        if (!faults_.clht_skip_insert_persist) persist(pool_, b, kCacheLineSize);
        unlock_bucket(head);
        scope.complete();
        return Ack::Ok;
      }
      if (ki == 0 && free_bucket == 0) {
        free_bucket = b;
        free_slot = i;
      }
    }
    PmAddr next = pool_.load8(b + kOffNext);
    if (next == kNullAddr) {
      tail = b;
      break;
    }
    b = next;
    chain_len++;
  }

  if (free_bucket != 0) {
    // Value first, then the 8-byte key as the single atomic commit point,
    // then one flush of the bucket line.
    pool_.store8(free_bucket + kOffVal0 + free_slot * kWordSize, value);
    pool_.fence();
    pool_.store8(free_bucket + kOffKey0 + free_slot * kWordSize, k);
    if (!faults_.clht_skip_insert_persist) persist(pool_, free_bucket, kCacheLineSize);
    unlock_bucket(head);
  } else {
    PmAddr nb = alloc_.alloc(kCacheLineSize, kCacheLineSize, kTagBucket);
    if (nb == kNullAddr) {
      unlock_bucket(head);
      return Ack::PoolFull;
    }
    pool_.store8(nb + kOffVal0, value);
    pool_.store8(nb + kOffKey0, k);
    persist(pool_, nb, kCacheLineSize);       // chained bucket fully durable first
    pool_.store8(tail + kOffNext, nb);        // atomic link commit
    if (!faults_.clht_skip_insert_persist) persist(pool_, tail, kCacheLineSize);
    unlock_bucket(head);
    chain_len++;
    if (chain_len >= opts_.chain_rehash_threshold)
      rehash_pending_.store(true, std::memory_order_relaxed);
  }
  gate.unlock();
  Ack ack = Ack::Ok;
  scope.complete();
  if (rehash_pending_.load(std::memory_order_relaxed)) maybe_rehash();
  return ack;
}

std::optional<Value> PClht::lookup(const Key& key) const {
  if (key.size() != kIntKeyLen) return std::nullopt;
  const std::uint64_t k = key.as_u64();
  if (k == 0) return std::nullopt;
  TableRef t = table();
  for (PmAddr b = bucket_addr(t, k); b != kNullAddr; b = pool_.load8(b + kOffNext)) {
    for (unsigned i = 0; i < kSlots; i++) {
      // Atomic snapshot: key, value, key re-read. On mismatch keep scanning;
      // never restart the operation.
      const std::uint64_t k1 = pool_.load8(b + kOffKey0 + i * kWordSize);
      if (k1 != k) continue;
      const std::uint64_t v = pool_.load8(b + kOffVal0 + i * kWordSize);
      const std::uint64_t k2 = pool_.load8(b + kOffKey0 + i * kWordSize);
      if (k2 == k && v != 0) return v;
    }
  }
  return std::nullopt;
}

Ack PClht::erase(const Key& key) {
  if (key.size() != kIntKeyLen) return Ack::BadArgument;
  const std::uint64_t k = key.as_u64();
  if (k == 0) return Ack::BadArgument;

  PmemPool::OpScope scope(pool_, OpTag::ClhtDelete);
  std::shared_lock gate(resize_gate_);
  TableRef t = table();
  PmAddr head = bucket_addr(t, k);
  lock_bucket(head);
  for (PmAddr b = head; b != kNullAddr; b = pool_.load8(b + kOffNext)) {
    for (unsigned i = 0; i < kSlots; i++) {
      if (pool_.load8(b + kOffKey0 + i * kWordSize) == k) {
        pool_.store8(b + kOffKey0 + i * kWordSize, 0);  // single atomic commit
        persist(pool_, b, kCacheLineSize);
        unlock_bucket(head);
        scope.complete();
        return Ack::Ok;
      }
    }
  }
  unlock_bucket(head);
  scope.complete();
  return Ack::Ok;  // idempotent on absent keys
}

bool PClht::rehash_insert(TableRef t, std::uint64_t key, std::uint64_t value,
                          std::vector<PmAddr>& touched) {
  PmAddr b = bucket_addr(t, key);
  for (;;) {
    for (unsigned i = 0; i < kSlots; i++) {
      if (pool_.load8(b + kOffKey0 + i * kWordSize) == 0) {
        pool_.store8(b + kOffVal0 + i * kWordSize, value);
        pool_.store8(b + kOffKey0 + i * kWordSize, key);
        touched.push_back(b);
        return true;
      }
    }
    PmAddr next = pool_.load8(b + kOffNext);
    if (next == kNullAddr) {
      PmAddr nb = alloc_.alloc(kCacheLineSize, kCacheLineSize, kTagBucket);
      if (nb == kNullAddr) return false;
      pool_.store8(nb + kOffVal0, value);
      pool_.store8(nb + kOffKey0, key);
      pool_.store8(b + kOffNext, nb);
      touched.push_back(nb);
      touched.push_back(b);
      return true;
    }
    b = next;
  }
}

void PClht::maybe_rehash() {
  std::unique_lock gate(resize_gate_);
  if (!rehash_pending_.exchange(false)) return;

  PmemPool::OpScope scope(pool_, OpTag::ClhtRehash);
  TableRef old = table();
  TableRef fresh;
  fresh.num_buckets = old.num_buckets * 2;
  fresh.buckets = alloc_.alloc(fresh.num_buckets * kCacheLineSize, kCacheLineSize, kTagBuckets);
  fresh.meta = alloc_.alloc(kCacheLineSize, kCacheLineSize, kTagMeta);
  if (fresh.buckets == kNullAddr || fresh.meta == kNullAddr) return;  // table unchanged
  pool_.store8(fresh.meta + kMetaNumBuckets, fresh.num_buckets);
  pool_.store8(fresh.meta + kMetaBuckets, fresh.buckets);
  pool_.store8(fresh.meta + kMetaSeed, opts_.hash_seed);

  std::vector<PmAddr> touched;
  std::vector<PmAddr> old_chain_buckets;
  for (std::uint64_t i = 0; i < old.num_buckets; i++) {
    for (PmAddr b = old.buckets + i * kCacheLineSize; b != kNullAddr;
         b = pool_.load8(b + kOffNext)) {
      if (b != old.buckets + i * kCacheLineSize) old_chain_buckets.push_back(b);
      for (unsigned s = 0; s < kSlots; s++) {
        const std::uint64_t k = pool_.load8(b + kOffKey0 + s * kWordSize);
        const std::uint64_t v = pool_.load8(b + kOffVal0 + s * kWordSize);
        if (k == 0 || v == 0) continue;
        if (!rehash_insert(fresh, k, v, touched)) return;  // PoolFull: abort, old table stays
      }
    }
  }
  // Every new line durable before the root swing.
  for (PmAddr b : touched) persist_no_fence(pool_, b, kCacheLineSize);
  persist_no_fence(pool_, fresh.meta, kCacheLineSize);
  pool_.fence();
  pool_.store8(kRootLinkAddr, fresh.meta);  // atomic table swap
  persist(pool_, kRootLinkAddr, kWordSize);
  scope.complete();
  rehashes_.fetch_add(1, std::memory_order_relaxed);

  alloc_.defer_free(old.meta);
  alloc_.defer_free(old.buckets);
  for (PmAddr b : old_chain_buckets) alloc_.defer_free(b);
}

std::uint64_t PClht::num_buckets() const { return table().num_buckets; }

bool PClht::is_volatile_word(PmAddr addr) const {
  if (addr % kCacheLineSize != 0) return false;
  Allocation a;
  if (!alloc_.lookup(addr, a)) return false;
  // Lock words sit at offset 0 of every bucket line.
  return std::string_view(a.tag) == kTagBuckets || std::string_view(a.tag) == kTagBucket;
}

std::vector<PmAddr> PClht::reachability_roots() const { return {pool_.load8(kRootLinkAddr)}; }

ChildWalker PClht::reachability_walker() const {
  PmemPool* pool = &pool_;
  return [pool](const Allocation& a, const std::function<void(PmAddr)>& emit) {
    std::string_view tag(a.tag);
    if (tag == kTagMeta) {
      emit(pool->load8(a.addr + kMetaBuckets));
    } else if (tag == kTagBuckets) {
      for (PmAddr b = a.addr; b < a.addr + a.len; b += kCacheLineSize)
        emit(pool->load8(b + kOffNext));
    } else if (tag == kTagBucket) {
      emit(pool->load8(a.addr + kOffNext));
    }
  };
}

std::vector<std::string> PClht::validate() const {
  std::vector<std::string> problems;
  TableRef t = table();
  if (t.num_buckets == 0) problems.push_back("zero bucket count");
  for (std::uint64_t i = 0; i < t.num_buckets; i++) {
    std::uint32_t len = 0;
    for (PmAddr b = t.buckets + i * kCacheLineSize; b != kNullAddr;
         b = pool_.load8(b + kOffNext)) {
      if (b % kCacheLineSize != 0) {
        problems.push_back("misaligned bucket in chain " + std::to_string(i));
        break;
      }
      if (++len > 1000) {
        problems.push_back("chain cycle suspected at bucket " + std::to_string(i));
        break;
      }
    }
  }
  return problems;
}

}  // namespace pmindex
