#include "pmindex/lock_table.hpp"

#include <thread>

namespace pmindex {

std::atomic<std::uint32_t>* LockTable::entry(std::uint64_t id) {
  {
    std::shared_lock g(map_mu_);
    auto it = map_.find(id);
    if (it != map_.end()) return it->second.get();
  }
  std::unique_lock g(map_mu_);
  auto& slot = map_[id];
  if (!slot) slot = std::make_unique<std::atomic<std::uint32_t>>(0);
  return slot.get();
}

void LockTable::lock(std::uint64_t id) {
  std::atomic<std::uint32_t>* e = entry(id);
  std::uint32_t expected = 0;
  while (!e->compare_exchange_weak(expected, 1, std::memory_order_acquire,
                                   std::memory_order_relaxed)) {
    expected = 0;
    std::this_thread::yield();
  }
}

bool LockTable::try_lock(std::uint64_t id) {
  std::atomic<std::uint32_t>* e = entry(id);
  std::uint32_t expected = 0;
  return e->compare_exchange_strong(expected, 1, std::memory_order_acquire,
                                    std::memory_order_relaxed);
}

void LockTable::unlock(std::uint64_t id) {
  std::atomic<std::uint32_t>* e = entry(id);
  if (e->exchange(0, std::memory_order_release) != 1)
    throw PoolFault("unlock of a lock that is not held");
}

void LockTable::reset_all() {
  std::unique_lock g(map_mu_);
  for (auto& [id, e] : map_) e->store(0, std::memory_order_release);
}

}  // namespace pmindex
