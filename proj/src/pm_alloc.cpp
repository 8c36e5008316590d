#include "pmindex/pm_alloc.hpp"

#include <algorithm>
#include <deque>
#include <sstream>

namespace pmindex {

namespace {
bool is_pow2(std::uint64_t x) { return x != 0 && (x & (x - 1)) == 0; }
}  // namespace

PmAllocator::PmAllocator(PmemPool& pool, PmAddr base) : pool_(pool), cursor_(base) {}

PmAddr PmAllocator::alloc(std::uint64_t len, std::uint64_t align, const char* tag) {
  if (len == 0) throw PoolFault("alloc: zero length");
  if (!is_pow2(align) || align > 4096) throw PoolFault("alloc: bad alignment");
  std::lock_guard g(mu_);
  PmAddr addr = 0;
  auto fl = free_lists_.find(len);
  if (!pinned_ && fl != free_lists_.end() && !fl->second.empty()) {
    // Size-class hits keep the original alignment; recycled space is scrubbed
    // so allocations always come back zeroed, like virgin pool space.
    for (auto it = fl->second.begin(); it != fl->second.end(); ++it) {
      if (*it % align == 0) {
        addr = *it;
        fl->second.erase(it);
        pool_.scrub(addr, len);
        break;
      }
    }
  }
  if (addr == 0) {
    PmAddr start = (cursor_ + align - 1) & ~(align - 1);
    if (start + len > pool_.size()) return kNullAddr;
    addr = start;
    cursor_ = start + len;
  }
  allocs_[addr] = Allocation{addr, len, align, tag};
  pool_.log_alloc(addr, len);
  return addr;
}

void PmAllocator::defer_free(PmAddr addr) {
  std::lock_guard g(mu_);
  auto it = allocs_.find(addr);
  if (it == allocs_.end()) throw PoolFault("defer_free: not an allocation");
  deferred_.emplace_back(epoch_, it->second);
  allocs_.erase(it);
}

void PmAllocator::quiesce_reclaim() {
  std::lock_guard g(mu_);
  epoch_++;
  auto keep = std::remove_if(deferred_.begin(), deferred_.end(), [&](const auto& e) {
    if (e.first < epoch_) {
      free_lists_[e.second.len].push_back(e.second.addr);
      return true;
    }
    return false;
  });
  deferred_.erase(keep, deferred_.end());
}

std::uint64_t PmAllocator::high_water_mark() const {
  std::lock_guard g(mu_);
  return cursor_;
}

std::vector<Allocation> PmAllocator::allocations() const {
  std::lock_guard g(mu_);
  std::vector<Allocation> out;
  out.reserve(allocs_.size());
  for (const auto& [addr, a] : allocs_) out.push_back(a);
  return out;
}

bool PmAllocator::lookup(PmAddr addr, Allocation& out) const {
  std::lock_guard g(mu_);
  auto it = allocs_.upper_bound(addr);
  if (it == allocs_.begin()) return false;
  --it;
  if (addr >= it->second.addr + it->second.len) return false;
  out = it->second;
  return true;
}

ReachabilityReport PmAllocator::reachability_report(const std::vector<PmAddr>& roots,
                                                    const ChildWalker& walker) const {
  std::map<PmAddr, Allocation> live;
  {
    std::lock_guard g(mu_);
    live = allocs_;
  }
  auto find_alloc = [&](PmAddr addr) -> const Allocation* {
    auto it = live.upper_bound(addr);
    if (it == live.begin()) return nullptr;
    --it;
    if (addr >= it->second.addr + it->second.len) return nullptr;
    return &it->second;
  };

  ReachabilityReport report;
  std::unordered_set<PmAddr> seen;
  std::deque<PmAddr> queue;
  for (PmAddr r : roots)
    if (r != kNullAddr) queue.push_back(r);
  while (!queue.empty()) {
    PmAddr addr = queue.front();
    queue.pop_front();
    const Allocation* a = find_alloc(addr);
    if (a == nullptr) {
      report.corrupt.push_back(addr);
      continue;
    }
    if (!seen.insert(a->addr).second) continue;
    walker(*a, [&](PmAddr child) {
      if (child != kNullAddr) queue.push_back(child);
    });
  }
  for (const auto& [addr, a] : live) {
    if (seen.count(addr))
      report.reachable.push_back(a);
    else
      report.leaked.push_back(a);
  }
  return report;
}

std::string ReachabilityReport::to_json() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < leaked.size(); i++) {
    if (i) os << ",";
    os << "{\"addr\":" << leaked[i].addr << ",\"len\":" << leaked[i].len << ",\"tag\":\""
       << leaked[i].tag << "\"}";
  }
  os << "]";
  return os.str();
}

}  // namespace pmindex
