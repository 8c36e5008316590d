#pragma once

#include <memory>
#include <shared_mutex>

#include "pmindex/index_core.hpp"

namespace pmindex {

// Persistent cache-line hash table. Buckets are exactly one cache line: an
// 8-byte lock word (semantically volatile, zeroed on open), three 8-byte key
// slots, three 8-byte value slots, and a chain link. Inserts and deletes
// commit with a single atomic key-word store followed by one line flush;
// rehashing is copy-on-write committed by a single root-link swap. Readers
// are lock-free and use the key/value/key atomic-snapshot protocol. Integer
// keys only; key 0 marks an empty slot and value 0 marks an unwritten value.
class PClht final : public IndexOps {
 public:
  struct Options {
    std::uint64_t initial_table_bytes = 48 * 1024;
    std::uint32_t chain_rehash_threshold = 3;  // buckets per chain
    std::uint64_t hash_seed = 0x9d8a1a4bd4595a31ull;
  };

  static std::unique_ptr<PClht> open(PmemPool& pool, PmAllocator& alloc, LockTable& locks,
                                     Options opts, FaultInjection faults);
  static std::unique_ptr<PClht> open(PmemPool& pool, PmAllocator& alloc, LockTable& locks);

  Ack insert(const Key& key, Value value) override;
  std::optional<Value> lookup(const Key& key) const override;
  Ack erase(const Key& key) override;

  bool ordered() const override { return false; }
  bool upsert() const override { return false; }
  bool is_volatile_word(PmAddr addr) const override;
  std::vector<PmAddr> reachability_roots() const override;
  ChildWalker reachability_walker() const override;
  std::vector<std::string> validate() const override;

  std::uint64_t num_buckets() const;
  std::uint64_t rehash_count() const { return rehashes_; }

 private:
  PClht(PmemPool& pool, PmAllocator& alloc, Options opts, FaultInjection faults)
      : pool_(pool), alloc_(alloc), opts_(opts), faults_(faults) {}

  struct TableRef {
    PmAddr meta = 0;
    std::uint64_t buckets = 0;
    std::uint64_t num_buckets = 0;
  };
  TableRef table() const;
  PmAddr bucket_addr(const TableRef& t, std::uint64_t key) const;
  void lock_bucket(PmAddr bucket);
  void unlock_bucket(PmAddr bucket);
  void maybe_rehash();
  bool rehash_insert(TableRef t, std::uint64_t key, std::uint64_t value,
                     std::vector<PmAddr>& touched);

  PmemPool& pool_;
  PmAllocator& alloc_;
  Options opts_;
  FaultInjection faults_;
  // Writers hold this shared; rehashing holds it exclusive (the globally
  // locked rehashing scheme). Readers take nothing.
  mutable std::shared_mutex resize_gate_;
  std::atomic<bool> rehash_pending_{false};
  std::atomic<std::uint64_t> rehashes_{0};
};

inline std::unique_ptr<PClht> PClht::open(PmemPool& pool, PmAllocator& alloc, LockTable& locks) {
  return open(pool, alloc, locks, Options{}, FaultInjection{});
}

}  // namespace pmindex
