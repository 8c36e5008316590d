#pragma once

#include <map>
#include <memory>
#include <string>

#include "pmindex/index_core.hpp"
#include "pmindex/p_art.hpp"
#include "pmindex/p_bwtree.hpp"
#include "pmindex/p_clht.hpp"

namespace pmindex {

enum class IndexKind : std::uint8_t { Clht, Art, BwTree };

const char* index_kind_name(IndexKind kind);
std::optional<IndexKind> parse_index_kind(std::string_view name);

// One pool + allocator + lock table + index handle. Reopening after a crash
// keeps the pool and allocator (addresses are stable) and rebuilds the handle.
struct IndexRuntime {
  std::unique_ptr<PmemPool> pool;
  std::unique_ptr<PmAllocator> alloc;
  std::unique_ptr<LockTable> locks;
  std::unique_ptr<IndexOps> index;
  IndexKind kind;
  KeyType key_type;
  FaultInjection faults;

  static IndexRuntime create(IndexKind kind, KeyType key_type, std::uint64_t pool_bytes,
                             FaultInjection faults = FaultInjection());
  void reopen();  // after pool->crash_in_place
};

std::unique_ptr<IndexOps> open_index(IndexKind kind, PmemPool& pool, PmAllocator& alloc,
                                     LockTable& locks, KeyType key_type, FaultInjection faults);

// --- reports ---------------------------------------------------------------

struct CrashPoint {
  OpTag op = OpTag::None;
  std::uint64_t store_ordinal = 0;  // store index within the innermost op
  std::uint64_t global_store = 0;   // store index within the load phase
  bool fired = false;
};

struct ConsistencyReport {
  std::vector<std::pair<Key, Value>> lost_keys;
  std::vector<std::pair<Key, Value>> wrong_values;
  std::vector<std::string> post_crash_op_failures;
  std::vector<std::string> persist_order_violations;
  std::vector<std::string> structure_problems;
  bool pass() const {
    return lost_keys.empty() && wrong_values.empty() && post_crash_op_failures.empty() &&
           persist_order_violations.empty() && structure_problems.empty();
  }
};

struct DurabilityReport {
  // (op id, line index) pairs dirtied inside traced allocations but not
  // covered by a fenced flush before the op acknowledged.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> unflushed_dirty_lines;
  std::uint64_t ops_checked = 0;
  bool pass() const { return unflushed_dirty_lines.empty(); }
};

struct CampaignConfig {
  IndexKind kind = IndexKind::Clht;
  KeyType key_type = KeyType::RandInt;
  std::uint64_t n_states = 10000;
  std::uint64_t load_n = 10000;
  std::uint64_t test_ops = 10000;
  unsigned threads = 4;
  CrashPolicy::Mode policy = CrashPolicy::Mode::Strict;
  std::uint64_t seed = 1;
  std::uint64_t pool_bytes = 256ull << 20;
  FaultInjection faults;
  // Fraction of the load at which the expected crash lands (sets the
  // per-store crash probability).
  double crash_mean_fraction = 0.5;
  // Fraction of crash verdicts turned into AbortOp (return from the operation
  // mid-way, keep running) instead of a full crash. Only meaningful for the
  // lock-free index; staged aborts are what put unfinished SMOs in front of
  // helping writers before the real crash.
  double abort_fraction = 0.0;
  bool stop_on_first_failure = false;
  std::string failure_dir;  // when set, failing states dump snapshot bundles
};

struct StateResult {
  std::uint64_t state_index = 0;
  std::uint64_t state_seed = 0;
  CrashPoint crash_point;
  ConsistencyReport consistency;
  std::uint64_t acked_keys = 0;
  std::uint64_t aborts = 0;
  std::uint64_t smo_max_visibility_stores = 0;
  std::uint64_t reader_root_restarts = 0;
  bool pass() const { return consistency.pass(); }
};

struct CampaignReport {
  CampaignConfig config;
  std::uint64_t states_run = 0;
  std::uint64_t crashes_fired = 0;
  std::uint64_t aborts_fired = 0;
  std::vector<StateResult> failures;
  // crash-site coverage: (op tag, store ordinal) -> times a crash fired there
  std::map<std::pair<OpTag, std::uint64_t>, std::uint64_t> coverage;
  double total_seconds = 0;
  std::uint64_t smo_max_visibility_stores = 0;
  std::uint64_t reader_root_restarts = 0;
  bool pass() const { return states_run > 0 && failures.empty(); }
  std::string to_json() const;
};

struct MinimizeResult {
  bool reproduced = false;     // false flags a nondeterministic failure
  std::uint64_t load_n = 0;
  std::uint64_t test_ops = 0;
  std::uint64_t state_seed = 0;
  CrashPoint crash_point;
};

// --- harness entry points ----------------------------------------------------

// Deterministic key/value streams shared by the harness and its tests.
Key campaign_key(KeyType type, std::uint64_t seed, std::uint64_t ordinal);
Value campaign_value(std::uint64_t seed, std::uint64_t ordinal);

StateResult run_one_state(const CampaignConfig& cfg, std::uint64_t state_index);
CampaignReport run_campaign(const CampaignConfig& cfg);

// Post-crash checks against the acknowledged-key ledger; runs the mixed
// multi-threaded phase and the full read-back.
ConsistencyReport check_consistency(IndexRuntime& rt, const CampaignConfig& cfg,
                                    std::uint64_t state_seed,
                                    std::vector<std::pair<Key, Value>>& acked);

// Offline trace analysis over the pool event log: every op that acknowledged
// must have all its dirtied lines inside traced allocations flushed+fenced
// first (volatile words excluded per index).
DurabilityReport check_durability(const PmemPool& pool, const IndexOps& index);

// Replays a failing state and shrinks the workload prefix by bisection.
MinimizeResult minimize(const CampaignConfig& cfg, std::uint64_t state_index);

}  // namespace pmindex
