#include "pmindex/bench.hpp"

#include <atomic>
#include <chrono>
#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace pmindex {

const char* workload_name(WorkloadPattern p) {
  switch (p) {
    case WorkloadPattern::LoadA: return "loada";
    case WorkloadPattern::A: return "a";
    case WorkloadPattern::B: return "b";
    case WorkloadPattern::C: return "c";
    case WorkloadPattern::E: return "e";
  }
  return "?";
}

std::optional<WorkloadPattern> parse_workload(std::string_view name) {
  if (name == "loada") return WorkloadPattern::LoadA;
  if (name == "a") return WorkloadPattern::A;
  if (name == "b") return WorkloadPattern::B;
  if (name == "c") return WorkloadPattern::C;
  if (name == "e") return WorkloadPattern::E;
  return std::nullopt;
}

unsigned WorkloadSpec::effective_threads() const {
  if (threads) return threads;
  unsigned hw = std::thread::hardware_concurrency();
  return std::min(16u, hw ? hw : 1u);
}

std::vector<std::vector<BenchOp>> generate(const WorkloadSpec& spec) {
  const unsigned nthreads = spec.effective_threads();
  const std::uint64_t load_n = spec.effective_load();
  std::vector<std::vector<BenchOp>> streams(nthreads);
  // read/scan percentage per pattern (Table 3 mixes)
  unsigned read_pct = 0;
  bool scans = false;
  switch (spec.pattern) {
    case WorkloadPattern::LoadA: read_pct = 0; break;
    case WorkloadPattern::A: read_pct = 50; break;
    case WorkloadPattern::B: read_pct = 95; break;
    case WorkloadPattern::C: read_pct = 100; break;
    case WorkloadPattern::E: read_pct = 95; scans = true; break;
  }
  for (unsigned t = 0; t < nthreads; t++) {
    const std::uint64_t begin = spec.n * t / nthreads;
    const std::uint64_t end = spec.n * (t + 1) / nthreads;
    streams[t].reserve(end - begin);
    for (std::uint64_t i = begin; i < end; i++) {
      const std::uint64_t h = mix64(spec.seed ^ mix64(i + 0x42));
      BenchOp op{};
      if (h % 100 < read_pct) {
        op.kind = scans ? BenchOpKind::Scan : BenchOpKind::Read;
        op.ordinal = mix64(h) % load_n;
        op.scan_len = scans ? 1 + static_cast<std::uint32_t>(mix64(h ^ 0x77) % spec.scan_len_max)
                            : 0;
      } else {
        op.kind = BenchOpKind::Insert;
        op.ordinal = load_n + i;  // fresh key
      }
      streams[t].push_back(op);
    }
  }
  return streams;
}

RunReport run_bench(IndexKind kind, const WorkloadSpec& spec) {
  if (kind == IndexKind::Clht && spec.key_type != KeyType::RandInt)
    throw std::runtime_error("bench: p-clht supports randint keys only");
  if (kind == IndexKind::Clht && spec.pattern == WorkloadPattern::E)
    throw std::runtime_error("bench: range scans are unsupported on p-clht");

  RunReport report;
  report.index = index_kind_name(kind);
  report.pattern = workload_name(spec.pattern);
  report.key_type = spec.key_type == KeyType::RandInt ? "randint" : "string";
  report.threads = spec.effective_threads();
  report.n = spec.n;
  report.seed = spec.seed;

  IndexRuntime rt = IndexRuntime::create(kind, spec.key_type, spec.pool_bytes);
  rt.pool->set_tracing(false);  // counters stay on; the event log is not needed

  const unsigned nthreads = spec.effective_threads();
  const std::uint64_t load_n = spec.effective_load();

  // Load phase (Load A): populate with load_n inserts, statically split.
  const Counters load_before = rt.pool->counters();
  const auto t_load0 = std::chrono::steady_clock::now();
  {
    std::vector<std::thread> workers;
    for (unsigned t = 0; t < nthreads; t++) {
      workers.emplace_back([&, t] {
        const std::uint64_t begin = load_n * t / nthreads;
        const std::uint64_t end = load_n * (t + 1) / nthreads;
        for (std::uint64_t i = begin; i < end; i++) {
          rt.index->insert(campaign_key(spec.key_type, spec.seed, i),
                           campaign_value(spec.seed, i));
        }
      });
    }
    for (auto& w : workers) w.join();
  }
  const double load_secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_load0).count();
  report.load_ops_per_sec = load_n / std::max(load_secs, 1e-9);
  (void)load_before;

  // Run phase: per-op scopes so per-op counter deltas (including any nested
  // structure maintenance) sum exactly to the pool-global deltas.
  auto streams = generate(spec);
  std::vector<Counters> per_thread_delta(nthreads);
  std::vector<Counters> per_insert_delta(nthreads);
  std::vector<std::uint64_t> per_thread_inserts(nthreads, 0);
  std::vector<std::uint64_t> per_thread_acked(nthreads, 0);
  std::atomic<bool> failed{false};

  const Counters run_before = rt.pool->counters();
  const auto t_run0 = std::chrono::steady_clock::now();
  {
    std::vector<std::thread> workers;
    for (unsigned t = 0; t < nthreads; t++) {
      workers.emplace_back([&, t] {
        const Counters thread_begin = rt.pool->thread_counters();
        std::vector<std::pair<Key, Value>> scan_buf;
        for (const BenchOp& op : streams[t]) {
          switch (op.kind) {
            case BenchOpKind::Insert: {
              PmemPool::OpScope scope(*rt.pool, OpTag::Other);
              Ack ack = rt.index->insert(campaign_key(spec.key_type, spec.seed, op.ordinal),
                                         campaign_value(spec.seed, op.ordinal));
              Counters delta = scope.complete();
              per_insert_delta[t].stores += delta.stores;
              per_insert_delta[t].clwbs += delta.clwbs;
              per_insert_delta[t].mfences += delta.mfences;
              per_thread_inserts[t]++;
              if (ack == Ack::Ok)
                per_thread_acked[t]++;
              else
                failed.store(true, std::memory_order_relaxed);
              break;
            }
            case BenchOpKind::Read: {
              PmemPool::OpScope scope(*rt.pool, OpTag::Other);
              auto got = rt.index->lookup(campaign_key(spec.key_type, spec.seed, op.ordinal));
              scope.complete();
              if (!got) failed.store(true, std::memory_order_relaxed);
              break;
            }
            case BenchOpKind::Scan: {
              PmemPool::OpScope scope(*rt.pool, OpTag::Other);
              scan_buf.clear();
              rt.index->scan(campaign_key(spec.key_type, spec.seed, op.ordinal), op.scan_len,
                             scan_buf);
              scope.complete();
              if (scan_buf.empty()) failed.store(true, std::memory_order_relaxed);
              break;
            }
          }
        }
        per_thread_delta[t] = rt.pool->thread_counters() - thread_begin;
      });
    }
    for (auto& w : workers) w.join();
  }
  const double run_secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_run0).count();
  const Counters run_delta = rt.pool->counters() - run_before;

  report.ops_per_sec = spec.n / std::max(run_secs, 1e-9);
  report.clwb_per_op = spec.n ? static_cast<double>(run_delta.clwbs) / spec.n : 0;
  report.mfence_per_op = spec.n ? static_cast<double>(run_delta.mfences) / spec.n : 0;
  report.per_thread = per_thread_delta;

  std::uint64_t inserts = 0, acked = 0;
  Counters insert_delta{};
  Counters thread_sum{};
  for (unsigned t = 0; t < nthreads; t++) {
    inserts += per_thread_inserts[t];
    acked += per_thread_acked[t];
    insert_delta.stores += per_insert_delta[t].stores;
    insert_delta.clwbs += per_insert_delta[t].clwbs;
    insert_delta.mfences += per_insert_delta[t].mfences;
    thread_sum.stores += per_thread_delta[t].stores;
    thread_sum.clwbs += per_thread_delta[t].clwbs;
    thread_sum.mfences += per_thread_delta[t].mfences;
  }
  report.acked_inserts = acked;
  report.clwb_per_insert = inserts ? static_cast<double>(insert_delta.clwbs) / inserts : 0;
  report.mfence_per_insert = inserts ? static_cast<double>(insert_delta.mfences) / inserts : 0;
  report.counter_conservation_pass = thread_sum == run_delta;

  // Post-workload oracle check: every key this run acknowledged (the load set
  // plus the run-phase inserts) must be retrievable.
  bool oracle = !failed.load(std::memory_order_relaxed);
  for (std::uint64_t i = 0; i < load_n && oracle; i++) {
    auto got = rt.index->lookup(campaign_key(spec.key_type, spec.seed, i));
    oracle = got && *got == campaign_value(spec.seed, i);
  }
  std::uint64_t verified = load_n;
  for (unsigned t = 0; t < nthreads && oracle; t++) {
    for (const BenchOp& op : streams[t]) {
      if (op.kind != BenchOpKind::Insert) continue;
      auto got = rt.index->lookup(campaign_key(spec.key_type, spec.seed, op.ordinal));
      if (!got || *got != campaign_value(spec.seed, op.ordinal)) {
        oracle = false;
        break;
      }
      verified++;
    }
  }
  report.verified_keys = verified;
  report.oracle_pass = oracle;
  return report;
}

std::string RunReport::to_json() const {
  nlohmann::json j;
  j["index"] = index;
  j["pattern"] = pattern;
  j["key_type"] = key_type;
  j["threads"] = threads;
  j["n"] = n;
  j["ops_per_sec"] = ops_per_sec;
  j["clwb_per_op"] = clwb_per_op;
  j["mfence_per_op"] = mfence_per_op;
  j["seed"] = seed;
  j["load_ops_per_sec"] = load_ops_per_sec;
  j["clwb_per_insert"] = clwb_per_insert;
  j["mfence_per_insert"] = mfence_per_insert;
  j["acked_inserts"] = acked_inserts;
  j["verified_keys"] = verified_keys;
  j["oracle_pass"] = oracle_pass;
  j["counter_conservation_pass"] = counter_conservation_pass;
  return j.dump(2);
}

std::string RunReport::csv_header() {
  return "index,pattern,key_type,threads,n,ops_per_sec,clwb_per_op,mfence_per_op,seed,"
         "load_ops_per_sec,clwb_per_insert,mfence_per_insert,acked_inserts,verified_keys";
}

std::string RunReport::csv_row() const {
  std::ostringstream os;
  os << index << ',' << pattern << ',' << key_type << ',' << threads << ',' << n << ','
     << ops_per_sec << ',' << clwb_per_op << ',' << mfence_per_op << ',' << seed << ','
     << load_ops_per_sec << ',' << clwb_per_insert << ',' << mfence_per_insert << ','
     << acked_inserts << ',' << verified_keys;
  return os.str();
}

void write_report(const RunReport& report, const std::string& format, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open report file " + path);
  if (format == "csv")
    out << RunReport::csv_header() << '\n' << report.csv_row() << '\n';
  else
    out << report.to_json() << '\n';
  if (!out) throw std::runtime_error("report write failed");
}

}  // namespace pmindex
