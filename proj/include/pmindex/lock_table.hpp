#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <shared_mutex>
#include <unordered_map>

#include "pmindex/pm_pool.hpp"

namespace pmindex {

// Volatile lock registry keyed by node address / bucket index. Lock state is
// never part of any persisted view; reset_all() runs on every index open so a
// lock held at crash time can never deadlock recovery. Entries are plain
// atomic flags rather than std::mutex so that an operation unwound by a
// simulated crash may leave its lock set without invoking UB.
class LockTable {
 public:
  void lock(std::uint64_t id);
  bool try_lock(std::uint64_t id);  // wait-free
  void unlock(std::uint64_t id);    // faults if not held
  void reset_all();

 private:
  std::atomic<std::uint32_t>* entry(std::uint64_t id);

  mutable std::shared_mutex map_mu_;
  std::unordered_map<std::uint64_t, std::unique_ptr<std::atomic<std::uint32_t>>> map_;
};

// Scoped lock for the common single-node case. Does not unlock if the scope
// unwinds through a simulated crash (the pool froze; reopen resets locks).
class NodeLockGuard {
 public:
  NodeLockGuard(LockTable& table, const PmemPool& pool, std::uint64_t id)
      : table_(table), pool_(pool), id_(id) {
    table_.lock(id_);
  }
  ~NodeLockGuard() {
    if (!pool_.crashed()) table_.unlock(id_);
  }
  NodeLockGuard(const NodeLockGuard&) = delete;
  NodeLockGuard& operator=(const NodeLockGuard&) = delete;

 private:
  LockTable& table_;
  const PmemPool& pool_;
  std::uint64_t id_;
};

}  // namespace pmindex
