#include <filesystem>
#include <set>

#include "doctest.h"
#include "pmindex/crash_harness.hpp"
#include "support/fixtures.hpp"

using namespace pmindex;

namespace {

CampaignConfig small_campaign(IndexKind kind, CrashPolicy::Mode policy, std::uint64_t states) {
  CampaignConfig cfg;
  cfg.kind = kind;
  cfg.key_type = KeyType::RandInt;
  cfg.n_states = states;
  cfg.load_n = 600;
  cfg.test_ops = 400;
  cfg.threads = 2;
  cfg.policy = policy;
  cfg.seed = 11;
  cfg.pool_bytes = 128ull << 20;
  if (kind == IndexKind::BwTree) cfg.abort_fraction = 0.25;
  return cfg;
}

}  // namespace

TEST_SUITE("crash_harness") {

TEST_CASE("small campaigns pass for every index under both policies") {
  for (IndexKind kind : {IndexKind::Clht, IndexKind::Art, IndexKind::BwTree}) {
    for (auto policy : {CrashPolicy::Mode::Strict, CrashPolicy::Mode::Adversarial}) {
      CAPTURE(index_kind_name(kind));
      CAPTURE(policy == CrashPolicy::Mode::Strict ? "strict" : "adversarial");
      CampaignReport report = run_campaign(small_campaign(kind, policy, 25));
      CHECK(report.states_run == 25);
      CHECK(report.crashes_fired > 0);
      for (auto& f : report.failures) {
        CAPTURE(f.state_index);
        CAPTURE(f.consistency.lost_keys.size());
        CAPTURE(f.consistency.wrong_values.size());
        CAPTURE(f.consistency.post_crash_op_failures.size());
        CAPTURE(f.consistency.persist_order_violations.size());
        CAPTURE(f.consistency.structure_problems.size());
        CHECK(false);
      }
    }
  }
}

TEST_CASE("campaigns are deterministic: same config, identical outcomes") {
  CampaignConfig cfg = small_campaign(IndexKind::Clht, CrashPolicy::Mode::Adversarial, 10);
  cfg.threads = 1;
  CampaignReport a = run_campaign(cfg);
  CampaignReport b = run_campaign(cfg);
  CHECK(a.states_run == b.states_run);
  CHECK(a.crashes_fired == b.crashes_fired);
  CHECK(a.aborts_fired == b.aborts_fired);
  CHECK(a.failures.size() == b.failures.size());
  CHECK(a.coverage == b.coverage);
  CHECK(a.to_json().find("\"states_run\": 10") != std::string::npos);
}

TEST_CASE("state with the crash hook disabled trivially passes") {
  CampaignConfig cfg = small_campaign(IndexKind::Clht, CrashPolicy::Mode::Strict, 1);
  cfg.crash_mean_fraction = 1e9;  // probability ~0: no crash fires
  StateResult r = run_one_state(cfg, 0);
  CHECK_FALSE(r.crash_point.fired);
  CHECK(r.pass());
  CHECK(r.acked_keys >= cfg.load_n);  // plus however many mixed ops were writes
  CHECK(r.acked_keys <= cfg.load_n + cfg.test_ops);
}

TEST_CASE("campaign coverage spans the insert commit points") {
  CampaignConfig cfg = small_campaign(IndexKind::Clht, CrashPolicy::Mode::Strict, 60);
  CampaignReport report = run_campaign(cfg);
  // Steady-state P-CLHT inserts store lock, value, key, unlock: with enough
  // states the crash must have fired on several distinct ordinals.
  std::set<std::uint64_t> ordinals;
  for (auto& [site, hits] : report.coverage)
    if (site.first == OpTag::ClhtInsert) ordinals.insert(site.second);
  CHECK(ordinals.size() >= 3);
}

TEST_CASE("mutation: P-CLHT insert without its persist loses acknowledged keys") {
  CampaignConfig cfg = small_campaign(IndexKind::Clht, CrashPolicy::Mode::Strict, 2000);
  cfg.faults.clht_skip_insert_persist = true;
  cfg.stop_on_first_failure = true;
  CampaignReport report = run_campaign(cfg);
  REQUIRE_FALSE(report.failures.empty());
  CHECK_FALSE(report.failures[0].consistency.lost_keys.empty());
  CHECK(report.states_run < 50);  // the defect surfaces almost immediately
}

TEST_CASE("mutation: P-ART with detect_and_fix disabled is caught after writer traffic") {
  CampaignConfig cfg = small_campaign(IndexKind::Art, CrashPolicy::Mode::Strict, 2000);
  cfg.key_type = KeyType::Str;  // shared prefixes make path splits frequent
  cfg.faults.art_disable_fix = true;
  cfg.stop_on_first_failure = true;
  CampaignReport report = run_campaign(cfg);
  REQUIRE_FALSE(report.failures.empty());
  CHECK_FALSE(report.failures[0].consistency.structure_problems.empty());
}

TEST_CASE("mutation: P-BwTree helper without flush-after-load breaks persist order") {
  // Deterministically staged version of the campaign scenario: a writer
  // aborts between its split CAS and the slot flush, a helper (with the
  // flush-after-load mutated out) completes step 2, then the crash hits.
  PBwTree::Options opts;
  opts.consolidate_depth = 4;
  opts.max_pairs = 16;
  opts.min_pairs = 2;
  opts.mapping_slots = 1 << 16;
  FaultInjection mutant;
  mutant.bwtree_skip_helper_load_flush = true;

  auto stage = [&](FaultInjection faults) {
    for (std::uint64_t at = 1; at <= 60; at++) {
      auto pool = std::make_unique<PmemPool>(256ull << 20);
      PmAllocator alloc(*pool);
      LockTable locks;
      auto tree = PBwTree::open(*pool, alloc, locks, kIntKeyLen, opts, faults);
      bool aborted = false;
      pool->set_crash_hook([&](const PmEvent&) {
        if (pool->current_op_tag() == OpTag::BwSplit && pool->store_ordinal_in_op() == at)
          return HookVerdict::AbortOp;
        return HookVerdict::Continue;
      });
      for (std::uint64_t k = 1; !aborted && k < 500; k++) {
        try {
          tree->insert(Key::from_u64(k * 3), k);
        } catch (const OpAbort&) {
          aborted = true;
        }
      }
      pool->clear_crash_hook();
      if (!aborted) continue;
      // Drive a single writer across the interrupted node: descending keys,
      // one at a time, stopping the moment a helper completes step 2. Any
      // further traffic could prepend to the child slot and transitively
      // flush the unpersisted swing, masking the defect.
      bool helped = false;
      for (std::uint64_t k = 500; k >= 1 && !helped; k--) {
        tree->insert(Key::from_u64(k * 3 + 1), k);
        helped = tree->smo_stats().helper_completions > 0;
      }
      if (!helped) continue;
      pool->crash_in_place(CrashPolicy::strict());
      tree.reset();
      tree = PBwTree::open(*pool, alloc, locks, kIntKeyLen, opts, faults);
      auto probs = tree->check_persist_order();
      if (!probs.empty()) return probs;
    }
    return std::vector<std::string>{};
  };

  CHECK_FALSE(stage(mutant).empty());       // the defect is detected
  CHECK(stage(FaultInjection{}).empty());   // the correct helper is never flagged
}

TEST_CASE("check_consistency: empty ledger passes vacuously; corrupted value is flagged") {
  CampaignConfig cfg = small_campaign(IndexKind::Clht, CrashPolicy::Mode::Strict, 1);
  IndexRuntime rt = IndexRuntime::create(cfg.kind, cfg.key_type, cfg.pool_bytes);

  std::vector<std::pair<Key, Value>> empty_ledger;
  ConsistencyReport vacuous = check_consistency(rt, cfg, 1, empty_ledger);
  CHECK(vacuous.pass());

  // fixture-forced failures: the ledger disagrees with the index
  REQUIRE(rt.index->insert(Key::from_u64(5), 100) == Ack::Ok);
  std::vector<std::pair<Key, Value>> ledger = {{Key::from_u64(5), 101},
                                               {Key::from_u64(77), 1}};
  ConsistencyReport bad = check_consistency(rt, cfg, 2, ledger);
  CHECK_FALSE(bad.wrong_values.empty());
  CHECK_FALSE(bad.lost_keys.empty());
}

TEST_CASE("durability: clean traces pass, a store without persist is reported") {
  PmemPool pool(64ull << 20);
  PmAllocator alloc(pool);
  LockTable locks;
  auto index = open_index(IndexKind::Clht, pool, alloc, locks, KeyType::RandInt, {});
  for (std::uint64_t k = 1; k <= 500; k++)
    REQUIRE(index->insert(Key::from_u64(k), k) == Ack::Ok);
  DurabilityReport clean = check_durability(pool, *index);
  CHECK(clean.ops_checked >= 500);
  CHECK(clean.unflushed_dirty_lines.empty());

  // fixture op: dirty an allocated line inside a scope and never flush it
  PmAddr hole = alloc.alloc(64, 64, "fixture");
  {
    PmemPool::OpScope scope(pool, OpTag::Other);
    pool.store8(hole, 42);
    scope.complete();
  }
  DurabilityReport dirty = check_durability(pool, *index);
  REQUIRE(dirty.unflushed_dirty_lines.size() == 1);
  CHECK(dirty.unflushed_dirty_lines[0].second == line_of(hole));
}

TEST_CASE("durability: the mutated P-CLHT insert is caught by the trace check") {
  PmemPool pool(64ull << 20);
  PmAllocator alloc(pool);
  LockTable locks;
  FaultInjection faults;
  faults.clht_skip_insert_persist = true;
  auto index = open_index(IndexKind::Clht, pool, alloc, locks, KeyType::RandInt, faults);
  for (std::uint64_t k = 1; k <= 50; k++)
    REQUIRE(index->insert(Key::from_u64(k), k) == Ack::Ok);
  DurabilityReport report = check_durability(pool, *index);
  CHECK_FALSE(report.unflushed_dirty_lines.empty());
}

TEST_CASE("minimize shrinks a failing state to a small prefix and stays deterministic") {
  CampaignConfig cfg = small_campaign(IndexKind::Clht, CrashPolicy::Mode::Strict, 50);
  cfg.faults.clht_skip_insert_persist = true;
  cfg.stop_on_first_failure = true;
  CampaignReport report = run_campaign(cfg);
  REQUIRE_FALSE(report.failures.empty());
  const std::uint64_t failing_state = report.failures[0].state_index;

  MinimizeResult shrunk = minimize(cfg, failing_state);
  CHECK(shrunk.reproduced);
  CHECK(shrunk.load_n <= 10);  // a lost insert plus a crash need almost nothing
  CampaignConfig probe = cfg;
  probe.load_n = shrunk.load_n;
  probe.test_ops = shrunk.test_ops;
  CHECK_FALSE(run_one_state(probe, failing_state).pass());
}

TEST_CASE("minimize flags a passing state instead of shrinking it") {
  CampaignConfig cfg = small_campaign(IndexKind::Clht, CrashPolicy::Mode::Strict, 1);
  MinimizeResult out = minimize(cfg, 0);
  CHECK_FALSE(out.reproduced);
}

TEST_CASE("failure bundles include a replayable crash point") {
  CampaignConfig cfg = small_campaign(IndexKind::Clht, CrashPolicy::Mode::Strict, 20);
  cfg.faults.clht_skip_insert_persist = true;
  cfg.stop_on_first_failure = true;
  cfg.failure_dir = (std::filesystem::temp_directory_path() / "pmindex_failures").string();
  std::filesystem::remove_all(cfg.failure_dir);
  CampaignReport report = run_campaign(cfg);
  REQUIRE_FALSE(report.failures.empty());
  bool bundle = false;
  for (auto& e : std::filesystem::directory_iterator(cfg.failure_dir))
    if (e.path().extension() == ".json") bundle = true;
  CHECK(bundle);
}

}  // TEST_SUITE
