#pragma once

#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "pmindex/pm_pool.hpp"

namespace pmindex {

struct Allocation {
  PmAddr addr = 0;
  std::uint64_t len = 0;
  std::uint64_t align = 0;
  const char* tag = "";
};

struct ReachabilityReport {
  std::vector<Allocation> reachable;
  std::vector<Allocation> leaked;
  std::vector<PmAddr> corrupt;  // walker emitted an address outside any allocation
  std::string to_json() const;  // leaked set as [{addr,len,tag}]
};

// Enumerates the child object addresses of one allocated object. The walker
// dispatches on the allocation tag it registered objects under.
using ChildWalker = std::function<void(const Allocation&, const std::function<void(PmAddr)>& emit)>;

// Pool-backed bump allocator with per-size-class free lists. Frees are
// deferred with an epoch stamp and recycled only at explicit quiesce points,
// so non-blocking readers never observe reuse. Addresses stay stable across
// crash_in_place(): the cursor and allocation map survive, standing in for a
// restart-time re-scan of allocator metadata.
class PmAllocator {
 public:
  // base: first usable offset (the root record line is reserved below it).
  PmAllocator(PmemPool& pool, PmAddr base = kCacheLineSize);

  // Returns kNullAddr when the pool is exhausted.
  PmAddr alloc(std::uint64_t len, std::uint64_t align, const char* tag);
  // Defers the region; it is recycled at the next quiesce_reclaim().
  void defer_free(PmAddr addr);
  // Recycles deferred frees from previous epochs. Quiesced-only.
  void quiesce_reclaim();
  // Freed regions are withheld from reuse entirely while pinned (crash
  // campaigns need address stability across replays).
  void pin_addresses(bool pinned) { pinned_ = pinned; }

  std::uint64_t high_water_mark() const;
  std::vector<Allocation> allocations() const;
  bool lookup(PmAddr addr, Allocation& out) const;

  // Partitions live allocations into reachable/leaked by graph walk from the
  // roots. Quiesced-only.
  ReachabilityReport reachability_report(const std::vector<PmAddr>& roots,
                                         const ChildWalker& walker) const;

 private:
  PmemPool& pool_;
  mutable std::mutex mu_;
  PmAddr cursor_;
  std::uint64_t epoch_ = 1;
  bool pinned_ = false;
  std::map<PmAddr, Allocation> allocs_;                      // live, by address
  std::unordered_map<std::uint64_t, std::vector<PmAddr>> free_lists_;  // size -> regions
  std::vector<std::pair<std::uint64_t, Allocation>> deferred_;         // (epoch, region)
};

}  // namespace pmindex
