#pragma once

#include <map>
#include <memory>

#include "pmindex/index_core.hpp"

namespace pmindex {

// Simplified persistent Bw-tree. Every node is a delta chain reachable
// through a mapping-table slot; updates prepend a persisted record and swing
// the slot with one CAS, flushing the slot word only when the CAS succeeds.
// Splits and merges are the two-step B-link SMOs: step one publishes the
// sibling/merge delta on the child, step two posts the separator change to
// the parent. Writers that encounter an unfinished SMO complete it first; in
// that helping path every loaded word step two depends on is flushed and
// fenced before acting, so a later state can never be durable before the
// state it was derived from. Readers tolerate every intermediate state via
// separator side links and never restart from the root. No locks anywhere.
class PBwTree final : public IndexOps {
 public:
  struct Options {
    std::uint64_t mapping_slots = 1ull << 20;
    std::uint32_t consolidate_depth = 8;  // delta-chain length trigger
    std::uint32_t max_pairs = 64;
    std::uint32_t min_pairs = 16;
  };

  struct SmoStats {
    std::uint64_t splits = 0;
    std::uint64_t merges = 0;
    std::uint64_t consolidations = 0;
    std::uint64_t max_visibility_stores = 0;  // per SMO, across all kinds
    std::uint64_t helper_completions = 0;
    std::uint64_t reader_root_restarts = 0;   // must stay zero
  };

  static std::unique_ptr<PBwTree> open(PmemPool& pool, PmAllocator& alloc, LockTable& locks,
                                       std::size_t key_len, Options opts, FaultInjection faults);
  static std::unique_ptr<PBwTree> open(PmemPool& pool, PmAllocator& alloc, LockTable& locks,
                                       std::size_t key_len);

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

  SmoStats smo_stats() const;
  std::size_t key_len() const { return key_len_; }

  // Structural audit of a reopened crash state: every parent-side SMO delta
  // still sitting on a chain must have its child-side prerequisite persisted
  // (the ordered-steps contract the helper flushes exist to keep).
  std::vector<std::string> check_persist_order() const;

 private:
  PBwTree(PmemPool& pool, PmAllocator& alloc, std::size_t key_len, Options opts,
          FaultInjection faults)
      : pool_(pool), alloc_(alloc), key_len_(key_len), opts_(opts), faults_(faults) {}

  struct Bound;       // -inf / finite / +inf
  struct Record;      // decoded delta or base header
  struct NodeView;    // replayed logical node

  // raw slot helpers
  PmAddr slot_addr(std::uint64_t id) const;
  std::uint64_t slot_raw(std::uint64_t id) const;
  std::uint64_t alloc_node_id();

  Record decode(PmAddr addr) const;
  Key rec_key(PmAddr addr) const;
  void write_key(PmAddr addr, const Key& k);

  PmAddr make_delta(std::uint8_t kind, bool leaf, const Key& key, std::uint64_t aux, PmAddr next,
                    std::uint64_t depth);
  PmAddr build_base(const NodeView& view);

  NodeView replay(std::uint64_t id, unsigned guard = 0) const;
  std::uint64_t resolve_child(std::uint64_t& id, const Key& key) const;
  std::optional<Value> resolve_leaf(std::uint64_t id, const Key& key) const;
  std::optional<std::uint64_t> leaf_route(std::uint64_t id, const Key& key) const;

  // descent for writers: completes encountered SMOs, returns leaf id
  std::uint64_t find_leaf_for_write(const Key& key);
  std::uint64_t find_leaf_for_read(const Key& key) const;

  void help_if_needed(std::uint64_t id);
  void complete_split(std::uint64_t child_id, PmAddr split_rec, std::uint64_t& vis);
  void complete_merge(std::uint64_t left_id, PmAddr merge_rec, std::uint64_t& vis);
  std::uint64_t locate_parent(std::uint64_t child_id, const Key& sep) const;

  Ack upsert_delta(std::uint8_t kind, const Key& key, Value value, OpTag tag);
  void maintain(std::uint64_t id);
  bool consolidate(std::uint64_t id);
  void split_smo(std::uint64_t id);
  void merge_smo(std::uint64_t victim_id);
  void retire_chain(PmAddr head);
  void record_smo_vis(std::uint64_t vis);

  PmemPool& pool_;
  PmAllocator& alloc_;
  std::size_t key_len_;
  Options opts_;
  FaultInjection faults_;

  mutable std::mutex stats_mu_;
  SmoStats stats_;
};

}  // namespace pmindex
