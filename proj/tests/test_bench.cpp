#include <filesystem>
#include <fstream>
#include "doctest.h"
#include "pmindex/bench.hpp"

using namespace pmindex;

namespace {

WorkloadSpec small_spec(WorkloadPattern pattern, std::uint64_t n = 2000) {
  WorkloadSpec spec;
  spec.pattern = pattern;
  spec.key_type = KeyType::RandInt;
  spec.n = n;
  spec.load_n = n;
  spec.threads = 2;
  spec.seed = 5;
  spec.pool_bytes = 256ull << 20;
  return spec;
}

}  // namespace

TEST_SUITE("bench") {

TEST_CASE("generate: op mixes follow the workload patterns") {
  auto count = [](const std::vector<std::vector<BenchOp>>& streams, BenchOpKind kind) {
    std::uint64_t n = 0;
    for (auto& s : streams)
      for (auto& op : s) n += op.kind == kind;
    return n;
  };

  WorkloadSpec load = small_spec(WorkloadPattern::LoadA, 1000);
  auto streams = generate(load);
  CHECK(count(streams, BenchOpKind::Insert) == 1000);  // 100% writes

  WorkloadSpec a = small_spec(WorkloadPattern::A, 10000);
  streams = generate(a);
  const std::uint64_t reads = count(streams, BenchOpKind::Read);
  CHECK(reads > 4700);  // 50/50 within sampling noise
  CHECK(reads < 5300);

  WorkloadSpec c = small_spec(WorkloadPattern::C, 1000);
  streams = generate(c);
  CHECK(count(streams, BenchOpKind::Read) == 1000);  // 100% reads

  WorkloadSpec e = small_spec(WorkloadPattern::E, 10000);
  streams = generate(e);
  const std::uint64_t scans = count(streams, BenchOpKind::Scan);
  CHECK(scans > 9300);  // 95/5 scan/insert
  CHECK(scans < 9700);
  for (auto& s : streams)
    for (auto& op : s)
      if (op.kind == BenchOpKind::Scan) {
        CHECK(op.scan_len >= 1);
        CHECK(op.scan_len <= 100);
      }
}

TEST_CASE("generate: same seed, identical streams; ops split across threads") {
  WorkloadSpec spec = small_spec(WorkloadPattern::B, 4000);
  spec.threads = 4;
  auto s1 = generate(spec);
  auto s2 = generate(spec);
  REQUIRE(s1.size() == 4);
  std::uint64_t total = 0;
  for (unsigned t = 0; t < 4; t++) {
    REQUIRE(s1[t].size() == s2[t].size());
    for (std::size_t i = 0; i < s1[t].size(); i++) {
      CHECK(s1[t][i].kind == s2[t][i].kind);
      CHECK(s1[t][i].ordinal == s2[t][i].ordinal);
    }
    total += s1[t].size();
  }
  CHECK(total == 4000);
}

TEST_CASE("run: oracle and counter conservation hold on every index") {
  for (IndexKind kind : {IndexKind::Clht, IndexKind::Art, IndexKind::BwTree}) {
    CAPTURE(index_kind_name(kind));
    RunReport report = run_bench(kind, small_spec(WorkloadPattern::A, 3000));
    CHECK(report.oracle_pass);
    CHECK(report.counter_conservation_pass);
    CHECK(report.ops_per_sec > 0);
  }
}

TEST_CASE("run: spec rejection for unsupported combinations") {
  CHECK_THROWS(run_bench(IndexKind::Clht, small_spec(WorkloadPattern::E, 100)));
  WorkloadSpec strspec = small_spec(WorkloadPattern::A, 100);
  strspec.key_type = KeyType::Str;
  CHECK_THROWS(run_bench(IndexKind::Clht, strspec));
  // ordered indexes serve scans
  RunReport report = run_bench(IndexKind::Art, small_spec(WorkloadPattern::E, 500));
  CHECK(report.oracle_pass);
}

TEST_CASE("steady-state P-CLHT inserts average about one flush") {
  WorkloadSpec spec = small_spec(WorkloadPattern::B, 4000);
  RunReport report = run_bench(IndexKind::Clht, spec);
  CHECK(report.clwb_per_insert >= 1.0);
  CHECK(report.clwb_per_insert <= 2.0);
}

TEST_CASE("P-ART insert flushes stay in the expected band") {
  // needs enough keys for node growth to amortize
  WorkloadSpec spec = small_spec(WorkloadPattern::LoadA, 20000);
  spec.pool_bytes = 1ull << 30;
  RunReport report = run_bench(IndexKind::Art, spec);
  CHECK(report.clwb_per_insert >= 2.0);
  CHECK(report.clwb_per_insert <= 4.0);
}

TEST_CASE("reports round-trip through json and csv") {
  RunReport report = run_bench(IndexKind::Clht, small_spec(WorkloadPattern::C, 500));
  auto dir = std::filesystem::temp_directory_path() / "pmindex_bench";
  std::filesystem::create_directories(dir);

  write_report(report, "json", (dir / "r.json").string());
  std::ifstream jf(dir / "r.json");
  std::string all((std::istreambuf_iterator<char>(jf)), std::istreambuf_iterator<char>());
  CHECK(all.find("\"index\": \"clht\"") != std::string::npos);
  CHECK(all.find("\"pattern\": \"c\"") != std::string::npos);

  write_report(report, "csv", (dir / "r.csv").string());
  std::ifstream cf(dir / "r.csv");
  std::string header, row;
  std::getline(cf, header);
  std::getline(cf, row);
  CHECK(header == RunReport::csv_header());
  CHECK(row.substr(0, 7) == "clht,c,");
  // identical seeds produce identical counter columns
  RunReport again = run_bench(IndexKind::Clht, small_spec(WorkloadPattern::C, 500));
  CHECK(again.clwb_per_op == report.clwb_per_op);
  CHECK(again.mfence_per_op == report.mfence_per_op);
}

}  // TEST_SUITE
