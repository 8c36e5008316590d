#include "pmindex/crash_harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace pmindex {

namespace {

// Per-(kind,key_type) calibration of expected stores per load phase, measured
// once with crashes disabled.
struct CalibrationKey {
  IndexKind kind;
  KeyType key_type;
  std::uint64_t load_n;
  bool operator<(const CalibrationKey& o) const {
    return std::tie(kind, key_type, load_n) < std::tie(o.kind, o.key_type, o.load_n);
  }
};

std::mutex g_calib_mu;
std::map<CalibrationKey, std::uint64_t> g_calib;

std::uint64_t expected_load_stores(const CampaignConfig& cfg) {
  CalibrationKey ck{cfg.kind, cfg.key_type, cfg.load_n};
  {
    std::lock_guard g(g_calib_mu);
    auto it = g_calib.find(ck);
    if (it != g_calib.end()) return it->second;
  }
  IndexRuntime rt = IndexRuntime::create(cfg.kind, cfg.key_type, cfg.pool_bytes);
  rt.pool->set_tracing(false);
  const std::uint64_t before = rt.pool->counters().stores;
  for (std::uint64_t i = 0; i < cfg.load_n; i++)
    rt.index->insert(campaign_key(cfg.key_type, cfg.seed, i), campaign_value(cfg.seed, i));
  const std::uint64_t stores = rt.pool->counters().stores - before;
  std::lock_guard g(g_calib_mu);
  g_calib[ck] = std::max<std::uint64_t>(stores, 1);
  return g_calib[ck];
}

}  // namespace

Key campaign_key(KeyType type, std::uint64_t seed, std::uint64_t ordinal) {
  std::uint64_t v = mix64(seed ^ mix64(ordinal + 1));
  if (v == 0) v = 1;
  if (type == KeyType::RandInt) return Key::from_u64(v);
  char buf[25];
  std::snprintf(buf, sizeof buf, "user%020llu", static_cast<unsigned long long>(v));
  return Key::from_string(std::string_view(buf, 24));
}

Value campaign_value(std::uint64_t seed, std::uint64_t ordinal) {
  Value v = mix64(seed ^ 0x5bd1e995u ^ mix64(ordinal));
  return v == 0 ? 1 : v;
}

ConsistencyReport check_consistency(IndexRuntime& rt, const CampaignConfig& cfg,
                                    std::uint64_t state_seed,
                                    std::vector<std::pair<Key, Value>>& acked) {
  ConsistencyReport report;

  // Structural audits on the reopened crash image, before anything runs.
  if (auto* bw = dynamic_cast<PBwTree*>(rt.index.get()))
    report.persist_order_violations = bw->check_persist_order();

  // Every key acknowledged before the crash must read back its latest value.
  for (auto& [k, v] : acked) {
    auto got = rt.index->lookup(k);
    if (!got)
      report.lost_keys.emplace_back(k, v);
    else if (*got != v)
      report.wrong_values.emplace_back(k, *got);
  }

  // Mixed phase: cfg.threads workers, 50/50 fresh inserts and reads of the
  // pre-crash ledger, disjoint key ranges per thread.
  const std::uint64_t per_thread = cfg.test_ops / std::max(1u, cfg.threads);
  std::vector<std::vector<std::pair<Key, Value>>> thread_acked(cfg.threads);
  std::vector<std::vector<std::string>> thread_failures(cfg.threads);
  {
    std::vector<std::thread> workers;
    for (unsigned t = 0; t < cfg.threads; t++) {
      workers.emplace_back([&, t] {
        const std::uint64_t tseed = mix64(state_seed ^ (0xbeefull + t));
        for (std::uint64_t j = 0; j < per_thread; j++) {
          const bool write = (mix64(tseed ^ j) & 1) != 0 || acked.empty();
          if (write) {
            Key k = campaign_key(cfg.key_type, tseed, j + 1'000'000);
            Value v = campaign_value(tseed, j);
            Ack ack = rt.index->insert(k, v);
            if (ack == Ack::Ok)
              thread_acked[t].emplace_back(k, v);
            else if (ack != Ack::Exists)
              thread_failures[t].push_back(std::string("post-crash insert failed: ") +
                                           ack_name(ack));
          } else {
            auto& [k, v] = acked[mix64(tseed ^ (j * 31)) % acked.size()];
            auto got = rt.index->lookup(k);
            if (!got || *got != v)
              thread_failures[t].push_back("post-crash read of a pre-crash key failed");
          }
        }
      });
    }
    for (auto& w : workers) w.join();
  }
  for (unsigned t = 0; t < cfg.threads; t++) {
    for (auto& f : thread_failures[t]) report.post_crash_op_failures.push_back(f);
    for (auto& kv : thread_acked[t]) acked.push_back(kv);
  }

  // Writer traffic has run; stale headers left by the crash must now be
  // repairable. Sweep and then hold the index to its structural invariants.
  if (auto* art = dynamic_cast<PArt*>(rt.index.get())) art->fix_sweep();
  report.structure_problems = rt.index->validate();

  // Full read-back of everything acknowledged so far.
  for (auto& [k, v] : acked) {
    auto got = rt.index->lookup(k);
    if (!got)
      report.lost_keys.emplace_back(k, v);
    else if (*got != v)
      report.wrong_values.emplace_back(k, *got);
  }

  // Ordered indexes additionally read back through a full scan: every
  // acknowledged key exactly once, in order, with the right value.
  if (rt.index->ordered()) {
    std::vector<std::pair<Key, Value>> scanned;
    Key lo = cfg.key_type == KeyType::RandInt ? Key::from_u64(0) : Key::from_string("");
    std::array<std::uint8_t, kMaxKeyLen> hi_bytes;
    hi_bytes.fill(0xff);
    Key hi = Key::from_bytes(hi_bytes.data(),
                             cfg.key_type == KeyType::RandInt ? kIntKeyLen : kStrKeyLen);
    rt.index->range_query(lo, hi, scanned);
    for (std::size_t i = 0; i + 1 < scanned.size(); i++) {
      if (!(scanned[i].first < scanned[i + 1].first)) {
        report.structure_problems.push_back("scan out of order or duplicate key");
        break;
      }
    }
    std::map<Key, Value> by_key(scanned.begin(), scanned.end());
    for (auto& [k, v] : acked) {
      auto it = by_key.find(k);
      if (it == by_key.end())
        report.lost_keys.emplace_back(k, v);
      else if (it->second != v)
        report.wrong_values.emplace_back(k, it->second);
    }
  }
  return report;
}

StateResult run_one_state(const CampaignConfig& cfg, std::uint64_t state_index) {
  StateResult result;
  result.state_index = state_index;
  result.state_seed = mix64(cfg.seed ^ mix64(state_index + 0x9e37ull));

  const std::uint64_t expected_stores = expected_load_stores(cfg);
  // Geometric crash point with mean at crash_mean_fraction of the load.
  const double p_crash =
      1.0 / std::max(1.0, cfg.crash_mean_fraction * static_cast<double>(expected_stores));
  const std::uint64_t p_scaled = static_cast<std::uint64_t>(p_crash * 0x1p63);

  IndexRuntime rt = IndexRuntime::create(cfg.kind, cfg.key_type, cfg.pool_bytes, cfg.faults);
  rt.alloc->pin_addresses(true);

  std::vector<std::pair<Key, Value>> acked;
  acked.reserve(cfg.load_n);

  std::uint64_t store_count = 0;
  bool abort_armed = cfg.abort_fraction > 0;
  CrashPoint crash_point;
  PmemPool* pool = rt.pool.get();
  const std::uint64_t sseed = result.state_seed;
  const double abort_fraction = cfg.abort_fraction;
  rt.pool->set_crash_hook([&, pool, sseed, p_scaled, abort_fraction](const PmEvent& ev) {
    (void)ev;
    store_count++;
    const std::uint64_t h = mix64(sseed ^ store_count);
    if ((h >> 1) >= p_scaled) return HookVerdict::Continue;
    crash_point.op = pool->current_op_tag();
    crash_point.store_ordinal = pool->store_ordinal_in_op();
    crash_point.global_store = store_count;
    crash_point.fired = true;
    if (abort_armed && (mix64(h) & 0xffff) < static_cast<std::uint64_t>(abort_fraction * 65536.0))
      return HookVerdict::AbortOp;
    return HookVerdict::Crash;
  });

  // Load phase, single-threaded, crashing probabilistically.
  std::uint64_t aborts = 0;
  for (std::uint64_t i = 0; i < cfg.load_n; i++) {
    Key k = campaign_key(cfg.key_type, result.state_seed, i);
    Value v = campaign_value(result.state_seed, i);
    try {
      if (rt.index->insert(k, v) == Ack::Ok) acked.emplace_back(k, v);
    } catch (const OpAbort&) {
      aborts++;
    } catch (const CrashUnwind&) {
      break;
    }
  }
  rt.pool->clear_crash_hook();

  // Simulated power loss + reboot (also the clean-shutdown path when no
  // crash fired).
  rt.pool->crash_in_place(CrashPolicy{cfg.policy, result.state_seed});
  rt.pool->set_tracing(false);
  rt.reopen();

  result.crash_point = crash_point;
  result.aborts = aborts;
  result.consistency = check_consistency(rt, cfg, result.state_seed, acked);
  result.acked_keys = acked.size();
  if (auto* bw = dynamic_cast<PBwTree*>(rt.index.get())) {
    auto stats = bw->smo_stats();
    result.smo_max_visibility_stores = stats.max_visibility_stores;
    result.reader_root_restarts = stats.reader_root_restarts;
  } else if (auto* art = dynamic_cast<PArt*>(rt.index.get())) {
    auto stats = art->path_split_stats();
    result.smo_max_visibility_stores = stats.count ? stats.max_visibility_stores : 0;
  }
  return result;
}

CampaignReport run_campaign(const CampaignConfig& cfg) {
  CampaignReport report;
  report.config = cfg;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t s = 0; s < cfg.n_states; s++) {
    StateResult r = run_one_state(cfg, s);
    report.states_run++;
    if (r.crash_point.fired) {
      report.crashes_fired++;
      report.coverage[{r.crash_point.op, r.crash_point.store_ordinal}]++;
    }
    report.aborts_fired += r.aborts;
    report.smo_max_visibility_stores =
        std::max(report.smo_max_visibility_stores, r.smo_max_visibility_stores);
    report.reader_root_restarts += r.reader_root_restarts;
    if (!r.pass()) {
      report.failures.push_back(r);
      if (!cfg.failure_dir.empty()) {
        std::filesystem::create_directories(cfg.failure_dir);
        // Reproduce the pre-check pool image for the bundle.
        std::ostringstream name;
        name << cfg.failure_dir << "/state_" << r.state_index;
        std::ofstream meta(name.str() + ".json");
        meta << "{\"state_index\":" << r.state_index << ",\"seed\":" << r.state_seed
             << ",\"policy\":\"" << (cfg.policy == CrashPolicy::Mode::Strict ? "strict" : "adversarial")
             << "\",\"crash_store\":" << r.crash_point.global_store << "}\n";
      }
      if (cfg.stop_on_first_failure) break;
    }
  }
  report.total_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

DurabilityReport check_durability(const PmemPool& pool, const IndexOps& index) {
  DurabilityReport report;
  const std::vector<PmEvent> events = pool.events();

  // Traced allocations come from the log itself.
  std::vector<std::pair<PmAddr, std::uint64_t>> allocs;  // (start, len), sorted
  for (const PmEvent& ev : events)
    if (ev.kind == EventKind::Alloc) allocs.emplace_back(ev.addr, ev.arg0);
  std::sort(allocs.begin(), allocs.end());
  auto in_traced_alloc = [&](PmAddr addr) {
    auto it = std::upper_bound(allocs.begin(), allocs.end(),
                               std::make_pair(addr, ~std::uint64_t{0}));
    if (it == allocs.begin()) return false;
    --it;
    return addr < it->first + it->second;
  };

  // Line flush/fence history: per line, flushes await the next fence.
  struct FlushSpan {
    std::uint64_t flush_seq;
    std::uint64_t fence_seq;  // 0 while pending
  };
  std::unordered_map<std::uint64_t, std::vector<FlushSpan>> lines;
  std::vector<std::uint64_t> pending;  // lines with an unfenced flush

  struct OpenOp {
    std::uint64_t op_id;
    std::vector<std::pair<PmAddr, std::uint64_t>> dirt;  // (word addr, store seq)
  };
  std::unordered_map<std::uint16_t, std::vector<OpenOp>> scopes;

  auto covered_before = [&](PmAddr addr, std::uint64_t store_seq, std::uint64_t end_seq) {
    auto it = lines.find(line_of(addr));
    if (it == lines.end()) return false;
    for (const FlushSpan& span : it->second) {
      if (span.flush_seq > store_seq && span.fence_seq != 0 && span.fence_seq < end_seq)
        return true;
    }
    return false;
  };

  for (const PmEvent& ev : events) {
    switch (ev.kind) {
      case EventKind::Store:
        for (OpenOp& op : scopes[ev.thread]) op.dirt.emplace_back(ev.addr, ev.seq);
        break;
      case EventKind::Flush:
        lines[line_of(ev.addr)].push_back({ev.seq, 0});
        pending.push_back(line_of(ev.addr));
        break;
      case EventKind::Fence:
        for (std::uint64_t line : pending) {
          auto& spans = lines[line];
          for (auto rit = spans.rbegin(); rit != spans.rend() && rit->fence_seq == 0; ++rit)
            rit->fence_seq = ev.seq;
        }
        pending.clear();
        break;
      case EventKind::OpBegin:
        scopes[ev.thread].push_back({ev.arg0, {}});
        break;
      case EventKind::OpEnd: {
        auto& stack = scopes[ev.thread];
        // Aborted nested frames never see their OpEnd; their dirt is already
        // attributed to the enclosing frames, so drop them on the way down.
        OpenOp op;
        bool found = false;
        while (!stack.empty()) {
          OpenOp cur = std::move(stack.back());
          stack.pop_back();
          if (cur.op_id == ev.arg0) {
            op = std::move(cur);
            found = true;
            break;
          }
        }
        if (!found) break;
        report.ops_checked++;
        for (auto& [addr, store_seq] : op.dirt) {
          if (!in_traced_alloc(addr)) continue;
          if (index.is_volatile_word(addr)) continue;
          if (!covered_before(addr, store_seq, ev.seq))
            report.unflushed_dirty_lines.emplace_back(ev.arg0, line_of(addr));
        }
        break;
      }
      case EventKind::Alloc:
        break;
    }
  }
  std::sort(report.unflushed_dirty_lines.begin(), report.unflushed_dirty_lines.end());
  report.unflushed_dirty_lines.erase(
      std::unique(report.unflushed_dirty_lines.begin(), report.unflushed_dirty_lines.end()),
      report.unflushed_dirty_lines.end());
  return report;
}

MinimizeResult minimize(const CampaignConfig& cfg, std::uint64_t state_index) {
  MinimizeResult out;
  StateResult first = run_one_state(cfg, state_index);
  StateResult second = run_one_state(cfg, state_index);
  if (first.pass() || second.pass() ||
      first.crash_point.global_store != second.crash_point.global_store) {
    out.reproduced = false;  // nondeterministic failure: harness bug signal
    return out;
  }
  out.reproduced = true;
  out.state_seed = first.state_seed;

  CampaignConfig shrunk = cfg;
  // Bisect the load prefix.
  std::uint64_t lo = 0, hi = cfg.load_n;
  while (lo < hi) {
    const std::uint64_t mid = lo + (hi - lo) / 2;
    CampaignConfig probe = shrunk;
    probe.load_n = mid;
    if (!run_one_state(probe, state_index).pass())
      hi = mid;
    else
      lo = mid + 1;
  }
  shrunk.load_n = hi;
  // Then the post-crash phase.
  lo = 0;
  hi = shrunk.test_ops;
  while (lo < hi) {
    const std::uint64_t mid = lo + (hi - lo) / 2;
    CampaignConfig probe = shrunk;
    probe.test_ops = mid;
    if (!run_one_state(probe, state_index).pass())
      hi = mid;
    else
      lo = mid + 1;
  }
  shrunk.test_ops = hi;

  StateResult last = run_one_state(shrunk, state_index);
  out.load_n = shrunk.load_n;
  out.test_ops = shrunk.test_ops;
  out.crash_point = last.crash_point;
  return out;
}

std::string CampaignReport::to_json() const {
  nlohmann::json j;
  j["index"] = index_kind_name(config.kind);
  j["key_type"] = config.key_type == KeyType::RandInt ? "randint" : "string";
  j["policy"] = config.policy == CrashPolicy::Mode::Strict ? "strict" : "adversarial";
  j["seed"] = config.seed;
  j["states_run"] = states_run;
  j["crashes_fired"] = crashes_fired;
  j["total_seconds"] = total_seconds;
  j["ms_per_state"] = states_run ? total_seconds * 1000.0 / states_run : 0.0;
  j["failures"] = nlohmann::json::array();
  for (const StateResult& f : failures) {
    nlohmann::json jf;
    jf["state_index"] = f.state_index;
    jf["seed"] = f.state_seed;
    jf["crash_store"] = f.crash_point.global_store;
    jf["lost_keys"] = f.consistency.lost_keys.size();
    jf["wrong_values"] = f.consistency.wrong_values.size();
    jf["op_failures"] = f.consistency.post_crash_op_failures.size();
    jf["persist_order"] = f.consistency.persist_order_violations.size();
    jf["structure"] = f.consistency.structure_problems.size();
    j["failures"].push_back(jf);
  }
  nlohmann::json cov = nlohmann::json::array();
  for (auto& [site, hits] : coverage) {
    cov.push_back({{"op", static_cast<int>(site.first)},
                   {"store_ordinal", site.second},
                   {"hits", hits}});
  }
  j["coverage"] = cov;
  return j.dump(2);
}

}  // namespace pmindex
