#include <set>

#include "doctest.h"
#include "pmindex/pm_alloc.hpp"

using namespace pmindex;

TEST_SUITE("pm_alloc") {

TEST_CASE("alignment and disjointness") {
  PmemPool pool(64 * 1024);
  PmAllocator alloc(pool);
  PmAddr a = alloc.alloc(64, 64, "t");
  PmAddr b = alloc.alloc(100, 8, "t");
  PmAddr c = alloc.alloc(64, 64, "t");
  CHECK(a % 64 == 0);
  CHECK(c % 64 == 0);
  CHECK(a != 0);
  // disjoint ranges
  CHECK(a + 64 <= b);
  CHECK(b + 100 <= c);
}

TEST_CASE("exhaustion returns null and leaves the pool unchanged") {
  PmemPool pool(1024);
  PmAllocator alloc(pool);
  PmAddr a = alloc.alloc(512, 64, "big");
  CHECK(a != 0);
  const auto count_before = alloc.allocations().size();
  CHECK(alloc.alloc(4096, 64, "too-big") == 0);
  CHECK(alloc.allocations().size() == count_before);
}

TEST_CASE("bad arguments fault") {
  PmemPool pool(1024);
  PmAllocator alloc(pool);
  CHECK_THROWS_AS(alloc.alloc(0, 8, "z"), PoolFault);
  CHECK_THROWS_AS(alloc.alloc(8, 3, "z"), PoolFault);
  CHECK_THROWS_AS(alloc.alloc(8, 8192, "z"), PoolFault);
}

TEST_CASE("alloc events are traced") {
  PmemPool pool(4096);
  PmAllocator alloc(pool);
  alloc.alloc(64, 64, "traced");
  bool saw = false;
  for (const PmEvent& ev : pool.events())
    if (ev.kind == EventKind::Alloc && ev.arg0 == 64) saw = true;
  CHECK(saw);
}

TEST_CASE("deferred frees recycle only after quiesce, zeroed") {
  PmemPool pool(8192);
  PmAllocator alloc(pool);
  PmAddr a = alloc.alloc(64, 64, "t");
  pool.store8(a, 0xdead);
  alloc.defer_free(a);
  PmAddr b = alloc.alloc(64, 64, "t");
  CHECK(b != a);  // not recycled yet
  alloc.quiesce_reclaim();
  PmAddr c = alloc.alloc(64, 64, "t");
  CHECK(c == a);  // recycled now
  CHECK(pool.load8(c) == 0);  // scrubbed
}

TEST_CASE("pinned addresses are never re-issued") {
  PmemPool pool(8192);
  PmAllocator alloc(pool);
  alloc.pin_addresses(true);
  PmAddr a = alloc.alloc(64, 64, "t");
  alloc.defer_free(a);
  alloc.quiesce_reclaim();
  CHECK(alloc.alloc(64, 64, "t") != a);
}

TEST_CASE("reachability: single root, chain, orphan") {
  PmemPool pool(64 * 1024);
  PmAllocator alloc(pool);

  SUBCASE("single root, no children") {
    PmAddr root = alloc.alloc(64, 64, "node");
    auto report = alloc.reachability_report(
        {root}, [](const Allocation&, const std::function<void(PmAddr)>&) {});
    CHECK(report.reachable.size() == 1);
    CHECK(report.leaked.empty());
    CHECK(report.corrupt.empty());
  }

  SUBCASE("three-node chain with one orphan") {
    // Oracle: the leaked set is exactly (all allocations) minus (chain walk),
    // computed here by brute-force set difference.
    PmAddr n1 = alloc.alloc(64, 64, "node");
    PmAddr n2 = alloc.alloc(64, 64, "node");
    PmAddr n3 = alloc.alloc(64, 64, "node");
    PmAddr orphan = alloc.alloc(64, 64, "node");
    pool.store8(n1, n2);
    pool.store8(n2, n3);
    pool.store8(n3, 0);

    std::set<PmAddr> all = {n1, n2, n3, orphan};
    std::set<PmAddr> walked;
    for (PmAddr p = n1; p != 0; p = pool.load8(p)) walked.insert(p);
    std::set<PmAddr> expect_leaked;
    for (PmAddr p : all)
      if (!walked.count(p)) expect_leaked.insert(p);
    CHECK(expect_leaked == std::set<PmAddr>{orphan});

    auto report = alloc.reachability_report(
        {n1}, [&](const Allocation& a, const std::function<void(PmAddr)>& emit) {
          emit(pool.load8(a.addr));
        });
    std::set<PmAddr> got_leaked;
    for (const Allocation& a : report.leaked) got_leaked.insert(a.addr);
    CHECK(got_leaked == expect_leaked);
    CHECK(report.reachable.size() == 3);
  }

  SUBCASE("walker emitting an unallocated address reports corruption") {
    PmAddr root = alloc.alloc(64, 64, "node");
    auto report = alloc.reachability_report(
        {root}, [&](const Allocation&, const std::function<void(PmAddr)>& emit) {
          emit(63 * 1024);  // valid pool offset, not an allocation
        });
    CHECK(report.corrupt.size() == 1);
  }
}

TEST_CASE("leak report serializes to json") {
  PmemPool pool(8192);
  PmAllocator alloc(pool);
  alloc.alloc(64, 64, "orphan");
  auto report = alloc.reachability_report(
      {}, [](const Allocation&, const std::function<void(PmAddr)>&) {});
  CHECK(report.to_json().find("\"tag\":\"orphan\"") != std::string::npos);
}

}  // TEST_SUITE
