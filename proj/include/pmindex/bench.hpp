#pragma once

#include <string>

#include "pmindex/crash_harness.hpp"

namespace pmindex {

// YCSB-style patterns (workloads D and F involve updates some indexes do not
// support and are excluded).
enum class WorkloadPattern : std::uint8_t { LoadA, A, B, C, E };

const char* workload_name(WorkloadPattern p);
std::optional<WorkloadPattern> parse_workload(std::string_view name);

struct WorkloadSpec {
  WorkloadPattern pattern = WorkloadPattern::LoadA;
  KeyType key_type = KeyType::RandInt;
  std::uint64_t n = 1'000'000;       // ops in the run phase
  std::uint64_t load_n = 0;          // pre-population size; 0 means n
  unsigned threads = 0;              // 0 means min(16, hardware)
  std::uint64_t seed = 1;
  std::uint64_t pool_bytes = PmemPool::kDefaultSize;
  // Scan lengths for E drawn uniformly from [1, scan_len_max].
  std::uint32_t scan_len_max = 100;

  std::uint64_t effective_load() const { return load_n ? load_n : n; }
  unsigned effective_threads() const;
};

enum class BenchOpKind : std::uint8_t { Insert, Read, Scan };

struct BenchOp {
  BenchOpKind kind;
  std::uint64_t ordinal;   // key index: reads draw from [0, load_n)
  std::uint32_t scan_len;  // E only
};

// Deterministic per-thread op streams; reads and scans draw keys from the
// loaded set, inserts use fresh ordinals.
std::vector<std::vector<BenchOp>> generate(const WorkloadSpec& spec);

struct RunReport {
  std::string index;
  std::string pattern;
  std::string key_type;
  unsigned threads = 0;
  std::uint64_t n = 0;
  double ops_per_sec = 0;
  double clwb_per_op = 0;
  double mfence_per_op = 0;
  std::uint64_t seed = 0;
  // extras beyond the pinned schema
  double load_ops_per_sec = 0;
  double clwb_per_insert = 0;
  double mfence_per_insert = 0;
  std::uint64_t acked_inserts = 0;
  std::uint64_t verified_keys = 0;
  bool oracle_pass = false;
  bool counter_conservation_pass = false;
  std::vector<Counters> per_thread;

  bool pass() const { return oracle_pass && counter_conservation_pass; }
  std::string to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

// Populate the index with Load A, then run the pattern. Rejects combinations
// the index cannot serve (scans on P-CLHT, string keys on P-CLHT).
RunReport run_bench(IndexKind kind, const WorkloadSpec& spec);

void write_report(const RunReport& report, const std::string& format, const std::string& path);

}  // namespace pmindex
