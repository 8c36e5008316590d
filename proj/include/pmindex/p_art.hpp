#pragma once

#include <memory>
#include <mutex>
#include <unordered_set>

#include "pmindex/index_core.hpp"

namespace pmindex {

// Persistent adaptive radix tree with N4/N16/N48/N256 nodes. Entry inserts
// become visible through a single count bump (or child-slot store); node
// grow/shrink is copy-on-write committed by one parent-link swap; splitting a
// compressed prefix is the two-step SMO: install the new intermediate node,
// then rewrite the old node's header to the residual suffix. Readers track
// their depth, compare it against each node's immutable level, and simply
// branch at the node's level when the header is stale; writers distinguish a
// crash remnant from a concurrent writer with try_lock and persist the
// corrected prefix. Keys are fixed-length binary-comparable byte strings.
class PArt final : public IndexOps {
 public:
  struct SmoStats {
    std::uint64_t count = 0;
    std::uint64_t min_visibility_stores = ~0ull;
    std::uint64_t max_visibility_stores = 0;
  };

  static std::unique_ptr<PArt> open(PmemPool& pool, PmAllocator& alloc, LockTable& locks,
                                    std::size_t key_len, FaultInjection faults = {});

  Ack insert(const Key& key, Value value) override;
  std::optional<Value> lookup(const Key& key) const override;
  Ack erase(const Key& key) override;

  bool ordered() const override { return true; }
  bool upsert() const override { return true; }
  void range_query(const Key& lo, const Key& hi,
                   std::vector<std::pair<Key, Value>>& out) const override;
  void scan(const Key& start, std::size_t count,
            std::vector<std::pair<Key, Value>>& out) const override;

  std::vector<PmAddr> reachability_roots() const override;
  ChildWalker reachability_walker() const override;
  std::vector<std::string> validate() const override;

  enum class FixResult { Fixed, AlreadyConsistent, Transient, Corrupt };
  // Writer-side helper: try_lock failure means the mismatch may be a
  // concurrent writer (tolerate); success means it is a crash remnant, so the
  // correct prefix is recomputed from the subtree and persisted.
  FixResult detect_and_fix(PmAddr node, std::uint32_t depth);
  // Writer traversal over the whole tree, fixing every stale header it meets.
  // Returns the number of headers repaired.
  std::uint64_t fix_sweep();

  SmoStats path_split_stats() const;
  std::uint64_t fixes_applied() const { return fixes_applied_.load(std::memory_order_relaxed); }
  std::uint64_t transient_mismatches() const {
    return transient_.load(std::memory_order_relaxed);
  }
  std::size_t key_len() const { return key_len_; }

 private:
  PArt(PmemPool& pool, PmAllocator& alloc, LockTable& locks, std::size_t key_len,
       FaultInjection faults)
      : pool_(pool), alloc_(alloc), locks_(locks), key_len_(key_len), faults_(faults) {}

  struct Meta;          // decoded header word
  struct DescentStep;   // result of one attempt

  Meta meta_of(PmAddr node) const;
  bool is_leaf(PmAddr node) const;
  PmAddr make_leaf(const Key& key, Value value);
  Key leaf_key(PmAddr leaf) const;
  Value leaf_value(PmAddr leaf) const;

  PmAddr child_slot(PmAddr node, const Meta& m, std::uint8_t byte) const;
  bool node_full(PmAddr node, const Meta& m) const;
  unsigned live_children(PmAddr node, const Meta& m) const;
  void collect_children(PmAddr node, const Meta& m,
                        std::vector<std::pair<std::uint8_t, PmAddr>>& out) const;

  Ack insert_attempt(const Key& key, Value value, bool& retry);
  Ack add_entry(PmAddr parent, PmAddr parent_slot, PmAddr node, std::uint32_t depth,
                std::uint8_t byte, const Key& key, Value value, bool& retry);
  Ack path_split(PmAddr parent, PmAddr parent_slot, PmAddr node, std::uint32_t depth,
                 std::uint32_t diverge, const Key& key, Value value, bool& retry);
  Ack leaf_split(PmAddr node, PmAddr slot, PmAddr leaf, std::uint32_t depth, const Key& key,
                 Value value, bool& retry);
  void maybe_shrink(PmAddr parent, PmAddr parent_slot, PmAddr node);

  // Full prefix byte [0, prefix_len) of a node; reads beyond the 8 stored
  // bytes are reconstructed from the leftmost leaf.
  std::uint8_t prefix_byte(PmAddr node, const Meta& m, std::uint32_t depth, std::uint32_t i) const;
  PmAddr leftmost_leaf(PmAddr node) const;

  bool dead(PmAddr node) const;
  void mark_dead(PmAddr node);
  void record_split(std::uint64_t vis_stores);
  void range_walk(PmAddr node, std::uint32_t depth, std::array<std::uint8_t, kMaxKeyLen>& path,
                  const Key* lo, const Key* hi, std::size_t limit,
                  std::vector<std::pair<Key, Value>>& out) const;
  void validate_walk(PmAddr node, std::uint32_t depth, std::vector<std::string>& problems,
                     unsigned depth_guard) const;

  PmemPool& pool_;
  PmAllocator& alloc_;
  LockTable& locks_;
  std::size_t key_len_;
  FaultInjection faults_;

  mutable std::mutex dead_mu_;
  std::unordered_set<PmAddr> dead_;  // volatile: COW-replaced nodes, reset by reopen

  mutable std::mutex stats_mu_;
  SmoStats split_stats_;
  std::atomic<std::uint64_t> fixes_applied_{0};
  std::atomic<std::uint64_t> transient_{0};
};

}  // namespace pmindex
