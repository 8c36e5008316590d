#include <map>
#include <set>
#include <thread>

#include "doctest.h"
#include "pmindex/p_bwtree.hpp"
#include "support/fixtures.hpp"

using namespace pmindex;
using pmindex::testing::crash_at;
using pmindex::testing::expect_crash;

namespace {

struct BwFixture {
  PmemPool pool;
  PmAllocator alloc;
  LockTable locks;
  std::unique_ptr<PBwTree> tree;
  std::size_t key_len;
  PBwTree::Options opts;

  explicit BwFixture(PBwTree::Options o = PBwTree::Options(), std::size_t klen = kIntKeyLen,
                     FaultInjection f = FaultInjection())
      : pool(512ull << 20), alloc(pool), key_len(klen), opts(o) {
    opts.mapping_slots = 1 << 16;  // desk-scale mapping table for tests
    tree = PBwTree::open(pool, alloc, locks, klen, opts, f);
  }
  void reopen(CrashPolicy policy = CrashPolicy::strict(), FaultInjection f = FaultInjection()) {
    tree.reset();
    pool.crash_in_place(policy);
    tree = PBwTree::open(pool, alloc, locks, key_len, opts, f);
  }
  Ack put(std::uint64_t k, Value v) { return tree->insert(Key::from_u64(k), v); }
  std::optional<Value> get(std::uint64_t k) const { return tree->lookup(Key::from_u64(k)); }
  Ack del(std::uint64_t k) { return tree->erase(Key::from_u64(k)); }
};

template <typename Fn>
std::uint64_t count_stores_in(PmemPool& pool, OpTag tag, Fn&& fn) {
  std::uint64_t count = 0;
  pool.set_crash_hook([&pool, tag, &count](const PmEvent&) {
    if (pool.current_op_tag() == tag) count++;
    return HookVerdict::Continue;
  });
  fn();
  pool.clear_crash_hook();
  return count;
}

PBwTree::Options small_nodes() {
  PBwTree::Options opts;
  opts.consolidate_depth = 4;
  opts.max_pairs = 16;
  opts.min_pairs = 6;
  return opts;
}

}  // namespace

TEST_SUITE("p_bwtree") {

TEST_CASE("insert, lookup, upsert, delete on an empty tree") {
  BwFixture fx;
  CHECK(fx.get(1) == std::nullopt);
  CHECK(fx.put(1, 10) == Ack::Ok);
  CHECK(fx.put(2, 20) == Ack::Ok);
  CHECK(fx.get(1) == 10);
  CHECK(fx.get(2) == 20);
  CHECK(fx.put(1, 11) == Ack::Ok);  // delta upsert
  CHECK(fx.get(1) == 11);
  CHECK(fx.del(1) == Ack::Ok);
  CHECK(fx.get(1) == std::nullopt);
  CHECK(fx.get(2) == 20);
  CHECK(fx.del(99) == Ack::Ok);  // delete of an absent key still acks
}

TEST_CASE("consolidation preserves replay equivalence") {
  PBwTree::Options opts;
  opts.consolidate_depth = 6;
  BwFixture fx(opts);
  std::map<std::uint64_t, Value> ref;
  std::uint64_t s = 3;
  for (int i = 0; i < 500; i++) {
    s = mix64(s);
    std::uint64_t k = 1 + s % 64;  // heavy churn on few keys
    if (s % 5 == 0) {
      REQUIRE(fx.del(k) == Ack::Ok);
      ref.erase(k);
    } else {
      REQUIRE(fx.put(k, s) == Ack::Ok);
      ref[k] = s;
    }
  }
  CHECK(fx.tree->smo_stats().consolidations > 0);
  for (std::uint64_t k = 1; k <= 64; k++) {
    auto it = ref.find(k);
    if (it == ref.end())
      CHECK(fx.get(k) == std::nullopt);
    else
      CHECK(fx.get(k) == it->second);
  }
  CHECK(fx.tree->validate().empty());
}

TEST_CASE("splits cascade and keep every key; reopen preserves them") {
  BwFixture fx;
  for (std::uint64_t k = 1; k <= 2000; k++) REQUIRE(fx.put(k * 7, k) == Ack::Ok);
  auto stats = fx.tree->smo_stats();
  CHECK(stats.splits > 0);
  CHECK(stats.max_visibility_stores <= 5);  // fewer than five atomic steps per SMO
  CHECK(stats.reader_root_restarts == 0);
  for (std::uint64_t k = 1; k <= 2000; k++) REQUIRE(fx.get(k * 7) == k);
  CHECK(fx.tree->validate().empty());
  CHECK(fx.tree->check_persist_order().empty());
  fx.reopen();
  for (std::uint64_t k = 1; k <= 2000; k++) REQUIRE(fx.get(k * 7) == k);
}

TEST_CASE("range query and scan match the oracle") {
  BwFixture fx(small_nodes());
  std::map<Key, Value> ref;
  std::uint64_t s = 17;
  for (int i = 0; i < 3000; i++) {
    s = mix64(s);
    REQUIRE(fx.put(s, s ^ 5) == Ack::Ok);
    ref[Key::from_u64(s)] = s ^ 5;
  }
  std::uint64_t q = 55;
  for (int round = 0; round < 100; round++) {
    q = mix64(q);
    std::uint64_t a = q, b = mix64(q ^ 9);
    if (b < a) std::swap(a, b);
    std::vector<std::pair<Key, Value>> got;
    fx.tree->range_query(Key::from_u64(a), Key::from_u64(b), got);
    std::vector<std::pair<Key, Value>> expect;
    for (auto it = ref.lower_bound(Key::from_u64(a));
         it != ref.end() && !(Key::from_u64(b) < it->first); ++it)
      expect.emplace_back(it->first, it->second);
    REQUIRE(got == expect);
  }
  std::vector<std::pair<Key, Value>> got;
  fx.tree->scan(Key::from_u64(1ull << 61), 40, got);
  std::vector<std::pair<Key, Value>> expect;
  for (auto it = ref.lower_bound(Key::from_u64(1ull << 61)); it != ref.end() && expect.size() < 40;
       ++it)
    expect.emplace_back(it->first, it->second);
  CHECK(got == expect);
}

TEST_CASE("crash after the delta CAS but before the slot flush: unacknowledged, absent") {
  BwFixture fx;
  REQUIRE(fx.put(10, 1) == Ack::Ok);
  const std::uint64_t total = count_stores_in(fx.pool, OpTag::BwInsert, [&] { fx.put(11, 2); });
  REQUIRE(total >= 6);  // five delta words then the slot CAS

  BwFixture fx2;
  REQUIRE(fx2.put(10, 1) == Ack::Ok);
  crash_at(fx2.pool, OpTag::BwInsert, total);  // the CAS store; its flush never runs
  CHECK(expect_crash([&] { fx2.put(11, 2); }));
  fx2.reopen();
  CHECK(fx2.get(11) == std::nullopt);  // never acknowledged
  CHECK(fx2.get(10) == 1);
  CHECK(fx2.put(11, 2) == Ack::Ok);
  CHECK(fx2.get(11) == 2);
}

TEST_CASE("threads racing the same slots: losers restart, every key lands") {
  BwFixture fx;
  constexpr unsigned kThreads = 4;
  constexpr std::uint64_t kPer = 1500;
  std::vector<std::thread> workers;
  for (unsigned t = 0; t < kThreads; t++) {
    workers.emplace_back([&, t] {
      for (std::uint64_t i = 0; i < kPer; i++)
        REQUIRE(fx.tree->insert(Key::from_u64(i * kThreads + t), i + 1) == Ack::Ok);
    });
  }
  for (auto& w : workers) w.join();
  for (unsigned t = 0; t < kThreads; t++)
    for (std::uint64_t i = 0; i < kPer; i++)
      REQUIRE(fx.tree->lookup(Key::from_u64(i * kThreads + t)) == i + 1);
  CHECK(fx.tree->smo_stats().reader_root_restarts == 0);
  CHECK(fx.tree->validate().empty());
}

TEST_CASE("systematic crash sweep across the split SMO") {
  auto opts = small_nodes();
  // measure the store count of the first split
  std::uint64_t total = 0;
  {
    BwFixture fx(opts);
    std::uint64_t split_stores = 0;
    fx.pool.set_crash_hook([&](const PmEvent&) {
      if (fx.pool.current_op_tag() == OpTag::BwSplit) split_stores++;
      return HookVerdict::Continue;
    });
    std::uint64_t k = 1;
    while (fx.tree->smo_stats().splits == 0) {
      REQUIRE(fx.put(k * 3, k) == Ack::Ok);
      k++;
      REQUIRE(k < 1000);
    }
    fx.pool.clear_crash_hook();
    total = split_stores;
    REQUIRE(total > 4);
  }

  for (std::uint64_t at = 1; at <= total; at++) {
    CAPTURE(at);
    BwFixture fx(opts);
    std::vector<std::uint64_t> acked;
    bool crashed = false;
    fx.pool.set_crash_hook([&](const PmEvent&) {
      if (fx.pool.current_op_tag() == OpTag::BwSplit && fx.pool.store_ordinal_in_op() == at)
        return HookVerdict::Crash;
      return HookVerdict::Continue;
    });
    for (std::uint64_t k = 1; !crashed && k < 1000; k++) {
      try {
        if (fx.put(k * 3, k) == Ack::Ok) acked.push_back(k);
      } catch (const CrashUnwind&) {
        crashed = true;
      }
    }
    REQUIRE(crashed);
    fx.reopen();
    // every acknowledged key remains readable, no recovery pass required
    for (std::uint64_t a : acked) REQUIRE(fx.get(a * 3) == a);
    CHECK(fx.tree->check_persist_order().empty());
    // the next writer completes whatever the crash interrupted
    REQUIRE(fx.put(5000, 42) == Ack::Ok);
    CHECK(fx.get(5000) == 42);
    for (std::uint64_t a : acked) REQUIRE(fx.get(a * 3) == a);
    CHECK(fx.tree->validate().empty());
  }
}

TEST_CASE("aborted split mid-SMO: readers tolerate, the next writer helps") {
  // Abort the split at each store in turn (a thread stopping mid-operation
  // without cleanup). Reads must still resolve every acknowledged key via the
  // side link; the next insert must first complete the interrupted SMO.
  auto opts = small_nodes();
  std::uint64_t total = 0;
  {
    BwFixture fx(opts);
    total = 0;
    fx.pool.set_crash_hook([&](const PmEvent&) {
      if (fx.pool.current_op_tag() == OpTag::BwSplit) total++;
      return HookVerdict::Continue;
    });
    std::uint64_t k = 1;
    while (fx.tree->smo_stats().splits == 0) {
      REQUIRE(fx.put(k * 3, k) == Ack::Ok);
      k++;
    }
    fx.pool.clear_crash_hook();
  }

  bool helper_ran = false;
  for (std::uint64_t at = 1; at <= total; at++) {
    CAPTURE(at);
    BwFixture fx(opts);
    std::vector<std::uint64_t> acked;
    bool aborted = false;
    fx.pool.set_crash_hook([&](const PmEvent&) {
      if (fx.pool.current_op_tag() == OpTag::BwSplit && fx.pool.store_ordinal_in_op() == at)
        return HookVerdict::AbortOp;
      return HookVerdict::Continue;
    });
    for (std::uint64_t k = 1; !aborted && k < 1000; k++) {
      try {
        if (fx.put(k * 3, k) == Ack::Ok) acked.push_back(k);
      } catch (const OpAbort&) {
        aborted = true;
      }
    }
    fx.pool.clear_crash_hook();
    REQUIRE(aborted);
    // lock-free reads across the partial SMO state
    for (std::uint64_t a : acked) REQUIRE(fx.get(a * 3) == a);
    // writer traffic completes the SMO and proceeds
    REQUIRE(fx.put(7001, 7) == Ack::Ok);
    REQUIRE(fx.put(7002, 8) == Ack::Ok);
    CHECK(fx.get(7001) == 7);
    for (std::uint64_t a : acked) REQUIRE(fx.get(a * 3) == a);
    CHECK(fx.tree->validate().empty());
    CHECK(fx.tree->check_persist_order().empty());
    if (fx.tree->smo_stats().helper_completions > 0) helper_ran = true;
  }
  CHECK(helper_ran);  // some abort point left a split for the helper to finish
}

TEST_CASE("merge keeps the victim's keys reachable through the left sibling") {
  BwFixture fx(small_nodes());
  for (std::uint64_t k = 1; k <= 200; k++) REQUIRE(fx.put(k, k) == Ack::Ok);
  REQUIRE(fx.tree->smo_stats().splits > 0);
  for (std::uint64_t k = 40; k <= 120; k++) REQUIRE(fx.del(k) == Ack::Ok);
  // churn triggers consolidations that notice the underflow and merge
  for (int round = 0; round < 60; round++) {
    REQUIRE(fx.put(10000 + round, round) == Ack::Ok);
    REQUIRE(fx.put(35, 35) == Ack::Ok);
  }
  CHECK(fx.tree->smo_stats().merges > 0);
  for (std::uint64_t k = 1; k <= 200; k++) {
    if (k >= 40 && k <= 120)
      CHECK(fx.get(k) == std::nullopt);
    else
      CHECK(fx.get(k) == k);
  }
  auto stats = fx.tree->smo_stats();
  CHECK(stats.max_visibility_stores <= 5);
  CHECK(fx.tree->validate().empty());
  CHECK(fx.tree->check_persist_order().empty());
  fx.reopen();
  for (std::uint64_t k = 1; k <= 39; k++) CHECK(fx.get(k) == k);
  for (std::uint64_t k = 121; k <= 200; k++) CHECK(fx.get(k) == k);
}

TEST_CASE("systematic crash sweep across the merge SMO") {
  auto opts = small_nodes();
  // A crash can land in the maintenance that runs after an op acknowledged,
  // so the key an op was touching when the crash hit is ambiguous: drop it
  // from the ledger instead of guessing.
  auto drive = [&](BwFixture& fx, std::set<std::uint64_t>& acked, bool& crashed) {
    auto step = [&](std::uint64_t key, auto&& op) {
      if (crashed) return;
      try {
        op();
      } catch (const CrashUnwind&) {
        crashed = true;
        acked.erase(key);
      }
    };
    for (std::uint64_t k = 1; k <= 120 && !crashed; k++)
      step(k, [&] {
        if (fx.put(k, k) == Ack::Ok) acked.insert(k);
      });
    for (std::uint64_t d = 30; d <= 90 && !crashed; d++)
      step(d, [&] {
        if (fx.del(d) == Ack::Ok) acked.erase(d);
      });
    for (int round = 0; round < 60 && !crashed; round++) {
      step(20000 + round, [&] {
        if (fx.put(20000 + round, round) == Ack::Ok) acked.insert(20000 + round);
      });
      step(25, [&] {
        if (fx.put(25, 25) == Ack::Ok) acked.insert(25);
      });
    }
  };

  std::uint64_t total = 0;
  {
    BwFixture fx(opts);
    std::set<std::uint64_t> acked;
    bool crashed = false;
    fx.pool.set_crash_hook([&](const PmEvent&) {
      if (fx.pool.current_op_tag() == OpTag::BwMerge) total++;
      return HookVerdict::Continue;
    });
    drive(fx, acked, crashed);
    fx.pool.clear_crash_hook();
    if (fx.tree->smo_stats().merges == 0) return;  // layout never merged; nothing to sweep
    REQUIRE(total > 0);
  }

  for (std::uint64_t at = 1; at <= std::min<std::uint64_t>(total, 16); at++) {
    CAPTURE(at);
    BwFixture fx(opts);
    std::set<std::uint64_t> acked;
    bool crashed = false;
    fx.pool.set_crash_hook([&](const PmEvent&) {
      if (fx.pool.current_op_tag() == OpTag::BwMerge && fx.pool.store_ordinal_in_op() == at)
        return HookVerdict::Crash;
      return HookVerdict::Continue;
    });
    drive(fx, acked, crashed);
    fx.pool.clear_crash_hook();
    if (!crashed) continue;  // ordinal beyond this merge's stores
    fx.reopen();
    for (std::uint64_t a : acked) REQUIRE(fx.get(a) == (a >= 20000 ? a - 20000 : a));
    // helpers finish the merge on the next writes
    REQUIRE(fx.put(90001, 1) == Ack::Ok);
    REQUIRE(fx.put(90002, 2) == Ack::Ok);
    for (std::uint64_t a : acked) REQUIRE(fx.get(a) == (a >= 20000 ? a - 20000 : a));
    CHECK(fx.tree->validate().empty());
    CHECK(fx.tree->check_persist_order().empty());
  }
}

TEST_CASE("merging an emptied victim leaves the key set unchanged") {
  BwFixture fx(small_nodes());
  std::set<std::uint64_t> expect;
  for (std::uint64_t k = 1; k <= 120; k++) {
    REQUIRE(fx.put(k, k) == Ack::Ok);
    expect.insert(k);
  }
  for (std::uint64_t k = 50; k <= 70; k++) {
    REQUIRE(fx.del(k) == Ack::Ok);
    expect.erase(k);
  }
  for (int round = 0; round < 80; round++) REQUIRE(fx.put(40, 40) == Ack::Ok);
  std::vector<std::pair<Key, Value>> all;
  fx.tree->range_query(Key::from_u64(0), Key::from_u64(~0ull), all);
  std::set<std::uint64_t> got;
  for (auto& [kk, vv] : all) got.insert(kk.as_u64());
  CHECK(got == expect);
}

TEST_CASE("oracle equivalence across mixed operations") {
  PBwTree::Options opts;
  opts.consolidate_depth = 5;
  opts.max_pairs = 20;
  opts.min_pairs = 4;
  BwFixture fx(opts);
  std::map<Key, Value> ref;
  std::uint64_t s = 21;
  for (int i = 0; i < 20000; i++) {
    s = mix64(s);
    Key k = Key::from_u64(1 + s % 2000);
    switch (mix64(s ^ 31) % 4) {
      case 0:
      case 1:
        REQUIRE(fx.tree->insert(k, s) == Ack::Ok);
        ref[k] = s;
        break;
      case 2:
        REQUIRE(fx.tree->erase(k) == Ack::Ok);
        ref.erase(k);
        break;
      case 3: {
        auto got = fx.tree->lookup(k);
        auto it = ref.find(k);
        if (it == ref.end())
          REQUIRE(got == std::nullopt);
        else
          REQUIRE(got == it->second);
        break;
      }
    }
  }
  for (auto& [k, v] : ref) REQUIRE(fx.tree->lookup(k) == v);
  CHECK(fx.tree->smo_stats().reader_root_restarts == 0);
  CHECK(fx.tree->validate().empty());
  CHECK(fx.tree->check_persist_order().empty());
}

TEST_CASE("24-byte string keys work end to end") {
  BwFixture fx(PBwTree::Options(), kStrKeyLen);
  for (int i = 0; i < 500; i++) {
    char buf[25];
    std::snprintf(buf, sizeof buf, "user%020d", i);
    REQUIRE(fx.tree->insert(Key::from_string(std::string_view(buf, 24)), i + 1) == Ack::Ok);
  }
  for (int i = 0; i < 500; i++) {
    char buf[25];
    std::snprintf(buf, sizeof buf, "user%020d", i);
    REQUIRE(fx.tree->lookup(Key::from_string(std::string_view(buf, 24))) == i + 1);
  }
  std::vector<std::pair<Key, Value>> got;
  fx.tree->scan(Key::from_string("user"), 10, got);
  REQUIRE(got.size() == 10);
  CHECK(got[0].second == 1);
}

}  // TEST_SUITE
