#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "pmindex/bench.hpp"
#include "pmindex/crash_harness.hpp"

using namespace pmindex;

namespace {

struct CommonArgs {
  std::string index = "clht";
  std::string keys = "randint";
  std::uint64_t seed = 1;
};

IndexKind require_index(const std::string& name) {
  auto kind = parse_index_kind(name);
  if (!kind) throw CLI::ValidationError("--index", "unknown index: " + name);
  return *kind;
}

KeyType require_keys(const std::string& name) {
  if (name == "randint") return KeyType::RandInt;
  if (name == "string") return KeyType::Str;
  throw CLI::ValidationError("--keys", "unknown key type: " + name);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"persistent-index toolkit: simulated-PM indexes, crash testing, YCSB-style bench"};
  app.require_subcommand(1);

  // --- bench ---------------------------------------------------------------
  auto* bench = app.add_subcommand("bench", "run a YCSB-style workload");
  CommonArgs bargs;
  std::string workload = "loada";
  WorkloadSpec spec;
  std::string report_path, report_format = "json";
  bench->add_option("--index", bargs.index, "clht|art|bwtree");
  bench->add_option("--workload", workload, "loada|a|b|c|e");
  bench->add_option("--keys", bargs.keys, "randint|string");
  bench->add_option("--n", spec.n, "run-phase operations");
  bench->add_option("--load-n", spec.load_n, "pre-population size (default: n)");
  bench->add_option("--threads", spec.threads, "worker threads (default: min(16, hw))");
  bench->add_option("--seed", bargs.seed, "workload seed");
  bench->add_option("--pool-bytes", spec.pool_bytes, "pool address-space size");
  bench->add_option("--report", report_path, "write the run report to this path");
  bench->add_option("--format", report_format, "json|csv");

  // --- crashtest -------------------------------------------------------------
  auto* crash = app.add_subcommand("crashtest", "crash-recovery consistency campaign");
  CommonArgs cargs;
  CampaignConfig ccfg;
  std::string policy = "strict";
  std::string crash_report_path;
  crash->add_option("--index", cargs.index, "clht|art|bwtree");
  crash->add_option("--keys", cargs.keys, "randint|string");
  crash->add_option("--states", ccfg.n_states, "number of crash states");
  crash->add_option("--load-n", ccfg.load_n, "entries loaded before the crash");
  crash->add_option("--ops", ccfg.test_ops, "post-crash mixed operations");
  crash->add_option("--threads", ccfg.threads, "post-crash worker threads");
  crash->add_option("--policy", policy, "strict|adversarial");
  crash->add_option("--seed", cargs.seed, "campaign seed");
  crash->add_option("--pool-bytes", ccfg.pool_bytes, "pool address-space size");
  crash->add_option("--abort-fraction", ccfg.abort_fraction,
                    "fraction of crash verdicts that abort the op and keep running");
  crash->add_option("--report", crash_report_path, "write the campaign report (json)");
  crash->add_option("--failure-dir", ccfg.failure_dir, "dump failing state bundles here");

  // --- durability --------------------------------------------------------------
  auto* dur = app.add_subcommand("durability", "trace inserts and check dirtied lines are fenced");
  CommonArgs dargs;
  std::uint64_t dur_n = 100000;
  std::uint64_t dur_pool = 1ull << 30;
  dur->add_option("--index", dargs.index, "clht|art|bwtree");
  dur->add_option("--keys", dargs.keys, "randint|string");
  dur->add_option("--n", dur_n, "inserts to trace");
  dur->add_option("--seed", dargs.seed, "key seed");
  dur->add_option("--pool-bytes", dur_pool, "pool address-space size");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*bench) {
      auto wl = parse_workload(workload);
      if (!wl) throw std::runtime_error("unknown workload: " + workload);
      spec.pattern = *wl;
      spec.key_type = require_keys(bargs.keys);
      spec.seed = bargs.seed;
      RunReport report = run_bench(require_index(bargs.index), spec);
      std::cout << report.to_json() << std::endl;
      if (!report_path.empty()) write_report(report, report_format, report_path);
      return report.pass() ? 0 : 1;
    }
    if (*crash) {
      ccfg.kind = require_index(cargs.index);
      ccfg.key_type = require_keys(cargs.keys);
      ccfg.seed = cargs.seed;
      if (policy == "adversarial")
        ccfg.policy = CrashPolicy::Mode::Adversarial;
      else if (policy != "strict")
        throw std::runtime_error("unknown policy: " + policy);
      if (ccfg.kind == IndexKind::BwTree && ccfg.abort_fraction == 0)
        ccfg.abort_fraction = 0.25;  // stage unfinished SMOs for the helpers
      CampaignReport report = run_campaign(ccfg);
      std::cout << report.to_json() << std::endl;
      if (!crash_report_path.empty()) {
        std::ofstream out(crash_report_path, std::ios::trunc);
        out << report.to_json() << '\n';
      }
      return report.pass() ? 0 : 1;
    }
    if (*dur) {
      IndexRuntime rt = IndexRuntime::create(require_index(dargs.index), require_keys(dargs.keys),
                                             dur_pool);
      for (std::uint64_t i = 0; i < dur_n; i++) {
        Ack ack = rt.index->insert(campaign_key(rt.key_type, dargs.seed, i),
                                   campaign_value(dargs.seed, i));
        if (ack != Ack::Ok) throw std::runtime_error("insert failed during durability trace");
      }
      DurabilityReport report = check_durability(*rt.pool, *rt.index);
      std::printf("{\"ops_checked\":%llu,\"unflushed_dirty_lines\":%zu,\"pass\":%s}\n",
                  static_cast<unsigned long long>(report.ops_checked),
                  report.unflushed_dirty_lines.size(), report.pass() ? "true" : "false");
      return report.pass() ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
  return 2;
}
