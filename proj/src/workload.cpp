#include "htapcc/workload.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstdio>
#include <cstdlib>
#include <json.hpp>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "htapcc/dsg.hpp"
#include "htapcc/engine.hpp"
#include "htapcc/rss.hpp"

namespace htapcc {

std::string to_string(BenchMode m, bool replicated) {
  switch (m) {
    case BenchMode::SSI:
      return "SSI";
    case BenchMode::SSI_SAFESNAP:
      return "SSI_SAFESNAP";
    case BenchMode::SSI_RSS:
      return "SSI_RSS";
    case BenchMode::SI:
      return replicated ? "SSI_SI" : "SI";
  }
  return "?";
}

std::optional<BenchMode> parse_bench_mode(const std::string& s, bool* replicated) {
  if (s == "SSI_SI") {
    if (replicated) *replicated = true;
    return BenchMode::SI;
  }
  for (auto m : {BenchMode::SSI, BenchMode::SSI_SAFESNAP, BenchMode::SSI_RSS, BenchMode::SI}) {
    if (s == to_string(m)) return m;
  }
  return std::nullopt;
}

void apply_environment(WorkloadSpec& spec) {
  if (const char* v = std::getenv("RSS_CADENCE_MS"); v && *v) {
    spec.cadence = std::chrono::milliseconds(std::max(1L, std::strtol(v, nullptr, 10)));
  }
}

namespace {

using Clock = std::chrono::steady_clock;

std::string key_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "k%06zu", i);
  return buf;
}

struct Counters {
  std::atomic<std::uint64_t> oltp_commits{0}, oltp_attempts{0}, oltp_aborts{0},
      oltp_failed{0}, olap_queries{0}, olap_attempts{0}, olap_aborts{0};
};

struct OltpPlan {
  std::vector<std::size_t> reads;
  std::vector<std::size_t> writes;
};

class KeySpace {
 public:
  explicit KeySpace(const WorkloadSpec& spec)
      : partitions_(std::max<std::size_t>(1, spec.warehouses)),
        per_(std::max(spec.key_count / partitions_, spec.write_txn_size + spec.oltp_reads)),
        names_() {
    for (std::size_t i = 0; i < partitions_ * per_; ++i) names_.push_back(key_name(i));
  }

  const std::vector<Key>& names() const noexcept { return names_; }

  OltpPlan oltp(std::mt19937_64& rng, std::size_t client, const WorkloadSpec& spec) const {
    std::size_t part = client % partitions_;
    if (partitions_ > 1 && std::uniform_real_distribution<double>(0, 1)(rng) < spec.remote_rate) {
      part = (part + 1 + rng() % (partitions_ - 1)) % partitions_;
    }
    std::vector<std::size_t> pool(per_);
    for (std::size_t i = 0; i < per_; ++i) pool[i] = part * per_ + i;
    const auto need = spec.write_txn_size + spec.oltp_reads;
    for (std::size_t i = 0; i < need; ++i) {
      std::swap(pool[i], pool[i + rng() % (per_ - i)]);
    }
    OltpPlan plan;
    plan.writes.assign(pool.begin(), pool.begin() + static_cast<long>(spec.write_txn_size));
    plan.reads.assign(pool.begin() + static_cast<long>(spec.write_txn_size),
                      pool.begin() + static_cast<long>(need));
    std::sort(plan.writes.begin(), plan.writes.end());
    return plan;
  }

  std::vector<std::size_t> scan(std::mt19937_64& rng, std::size_t size) const {
    const auto n = names_.size();
    const auto start = rng() % n;
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < std::min(size, n); ++i) out.push_back((start + i) % n);
    return out;
  }

 private:
  std::size_t partitions_;
  std::size_t per_;
  std::vector<Key> names_;
};

void finish(RunReport& r, const Counters& c, double seconds) {
  r.seconds = seconds;
  r.oltp_commits = c.oltp_commits;
  r.oltp_attempts = c.oltp_attempts;
  r.oltp_aborts = c.oltp_aborts;
  r.oltp_failed = c.oltp_failed;
  r.olap_queries = c.olap_queries;
  r.olap_attempts = c.olap_attempts;
  r.olap_aborts = c.olap_aborts;
  r.oltp_tps = seconds > 0 ? static_cast<double>(r.oltp_commits) / seconds : 0;
  r.olap_qph = seconds > 0 ? static_cast<double>(r.olap_queries) / seconds * 3600 : 0;
  const auto attempts = r.oltp_attempts + r.olap_attempts;
  r.abort_rate =
      attempts ? static_cast<double>(r.oltp_aborts + r.olap_aborts) / static_cast<double>(attempts)
               : 0;
}

// Lag accumulator for snapshots published inside the measured window.
struct FreshnessProbe {
  std::mutex mu;
  bool measuring = false;
  double sum = 0;
  std::uint64_t count = 0;

  void hook(const RssSnapshot& s) {
    std::lock_guard lock(mu);
    if (!measuring) return;
    sum += s.freshness_lag_ms;
    ++count;
  }
  void set(bool on) {
    std::lock_guard lock(mu);
    measuring = on;
  }
  double mean() {
    std::lock_guard lock(mu);
    return count ? sum / static_cast<double>(count) : 0;
  }
};

// Picks which read-only sessions go into the audited history. Sampling
// thins out geometrically as the budget drains so the sample spans the run.
class ReaderSampler {
 public:
  explicit ReaderSampler(std::size_t budget) : budget_(std::max<std::size_t>(1, budget)) {}

  bool take() {
    std::lock_guard lock(mu_);
    ++seen_;
    if (taken_ >= budget_) return false;
    const auto stride = std::bit_ceil((budget_ + (budget_ - taken_) - 1) / (budget_ - taken_));
    if (seen_ % stride != 0) return false;
    ++taken_;
    return true;
  }
  std::string note() {
    std::lock_guard lock(mu_);
    return "audited " + std::to_string(taken_) + " of " + std::to_string(seen_) +
           " read-only sessions";
  }

 private:
  std::mutex mu_;
  std::size_t budget_;
  std::uint64_t seen_ = 0;
  std::uint64_t taken_ = 0;
};

// Runs clients for warmup + duration; `measuring` flips after the warmup.
template <typename Oltp, typename Olap>
double drive(const WorkloadSpec& spec, Oltp oltp, Olap olap, std::atomic<bool>& measuring,
             const std::function<void()>& on_measure, const std::function<void()>& on_stop) {
  std::atomic<bool> stop{false};
  std::vector<std::thread> threads;
  for (std::size_t c = 0; c < spec.oltp_clients; ++c) {
    threads.emplace_back([&, c] {
      std::mt19937_64 rng(spec.seed * 1000003 + c);
      while (!stop.load(std::memory_order_relaxed)) oltp(rng, c, stop);
    });
  }
  for (std::size_t c = 0; c < spec.olap_clients; ++c) {
    threads.emplace_back([&, c] {
      std::mt19937_64 rng(spec.seed * 1000003 + 500000 + c);
      while (!stop.load(std::memory_order_relaxed)) olap(rng, c, stop);
    });
  }
  std::this_thread::sleep_for(spec.warmup);
  on_measure();
  measuring = true;
  const auto t0 = Clock::now();
  std::this_thread::sleep_for(spec.duration);
  measuring = false;
  const auto seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  on_stop();
  stop = true;
  for (auto& t : threads) t.join();
  return seconds;
}

void round_trip(const WorkloadSpec& spec) {
  if (spec.statement_latency.count() > 0) std::this_thread::sleep_for(spec.statement_latency);
}

void run_oltp_txn(Engine& engine, const KeySpace& ks, const WorkloadSpec& spec,
                  std::mt19937_64& rng, std::size_t client, Counters& c,
                  const std::atomic<bool>& measuring, const std::atomic<bool>& stop) {
  const auto plan = ks.oltp(rng, client, spec);
  const auto& names = ks.names();
  for (std::size_t attempt = 0; attempt <= spec.retry_cap; ++attempt) {
    if (stop.load(std::memory_order_relaxed)) return;
    if (attempt > 0) std::this_thread::yield();
    const bool m = measuring.load(std::memory_order_relaxed);
    if (m) ++c.oltp_attempts;
    try {
      auto s = engine.begin();
      for (auto k : plan.reads) {
        round_trip(spec);
        engine.read(s, names[k]);
      }
      for (auto k : plan.writes) {
        round_trip(spec);
        const auto v = engine.read(s, names[k]).value;
        round_trip(spec);
        engine.write(s, names[k], v + 1);
      }
      round_trip(spec);
      if (engine.commit(s).committed) {
        if (m) ++c.oltp_commits;
        return;
      }
    } catch (const TxnAborted&) {
    } catch (const EngineShutDown&) {
      return;
    }
    if (m) ++c.oltp_aborts;
  }
  if (measuring) ++c.oltp_failed;
}

}  // namespace

AuditResult audit_with_readers(const History& primary,
                               const std::vector<ReplicaTxnLog>& readers) {
  auto ops = primary.user_ops();
  for (const auto& r : readers) {
    ops.push_back(Operation::begin(r.txn));
    for (const auto& op : r.reads) ops.push_back(op);
    ops.push_back(Operation::commit(r.txn));
  }
  const auto combined = History::from_user_ops(std::move(ops), primary.keys());
  const auto proj = committed_projection(combined, combined.full());
  const auto g = build_dsg(proj);
  AuditResult out;
  out.txns = g.nodes().size();
  out.cycle = find_cycle(g);
  if (!out.cycle) {
    out.verdict = "serializable";
    return out;
  }
  std::set<TxnId> writers;
  for (const auto& [key, order] : proj.version_order()) {
    for (const auto& v : order) writers.insert(v.creator);
  }
  out.verdict = find_cycle(g.induced(writers)) ? "nonserializable" : "read-only-anomaly";
  return out;
}

RunReport run_bench(WorkloadSpec spec) {
  if (spec.replicated && spec.mode != BenchMode::SI && spec.mode != BenchMode::SSI_RSS) {
    throw std::invalid_argument("replicated runs support SSI_SI and SSI_RSS");
  }
  if (spec.oltp_clients == 0 && spec.olap_clients == 0) {
    throw std::invalid_argument("no clients");
  }
  RunReport report;
  report.spec = spec;
  const KeySpace ks(spec);
  const auto& names = ks.names();
  Counters c;
  const auto chunk = std::max<std::size_t>(1, spec.scan_chunk);
  std::atomic<bool> measuring{false};
  FreshnessProbe fresh;

  // Read-only sessions recorded for the audit, about half the history budget.
  const auto reader_budget =
      std::max<std::size_t>(1, spec.audit_threshold / std::max<std::size_t>(1, spec.scan_size) / 2);

  EngineConfig ecfg;
  ecfg.mode = spec.mode == BenchMode::SI && !spec.replicated ? IsolationMode::SI
                                                              : IsolationMode::SSI;
  ecfg.keys = names;
  ecfg.deferrable_timeout = spec.deferrable_timeout;
  ecfg.history_cap = spec.audit_threshold;
  ecfg.gc_interval_commits = 256;
  const bool rss_single = !spec.replicated && spec.mode == BenchMode::SSI_RSS;
  if (rss_single || spec.replicated) ecfg.wal = std::make_shared<WalLog>();
  if (rss_single) ecfg.snapshots = std::make_shared<SnapshotRegistry>();
  ecfg.emit_dependencies = spec.mode == BenchMode::SSI_RSS;
  Engine engine(ecfg);

  auto oltp = [&](std::mt19937_64& rng, std::size_t client, const std::atomic<bool>& stop) {
    run_oltp_txn(engine, ks, spec, rng, client, c, measuring, stop);
  };

  if (!spec.replicated) {
    std::unique_ptr<RssService> service;
    if (rss_single) {
      ecfg.snapshots->on_publish([&](const RssSnapshot& s) { fresh.hook(s); });
      service = std::make_unique<RssService>(
          ecfg.wal, ecfg.snapshots, RssServiceConfig{names, spec.cadence, true},
          [&](std::uint64_t w) { engine.apply_feedback(w); });
      service->start();
    }
    SessionFlags olap_flags{.read_only = true,
                            .deferrable = spec.mode == BenchMode::SSI_SAFESNAP,
                            .use_rss = rss_single};
    ReaderSampler sampler(reader_budget);
    auto olap = [&](std::mt19937_64& rng, std::size_t, const std::atomic<bool>& stop) {
      const auto keys = ks.scan(rng, spec.scan_size);
      while (!stop.load(std::memory_order_relaxed)) {
        const bool m = measuring.load(std::memory_order_relaxed);
        if (m) ++c.olap_attempts;
        try {
          auto flags = olap_flags;
          flags.unrecorded = !sampler.take();
          auto s = engine.begin(flags);
          Value sum = 0;
          for (std::size_t i = 0; i < keys.size(); ++i) {
            if (i % chunk == 0) round_trip(spec);
            sum += engine.read(s, names[keys[i]]).value;
          }
          (void)sum;
          engine.commit(s);
          if (m) ++c.olap_queries;
          return;
        } catch (const TxnAborted&) {
          if (m) ++c.olap_aborts;
        } catch (const EngineShutDown&) {
          return;
        }
      }
    };
    EngineStats before, after;
    const auto seconds = drive(
        spec, oltp, olap, measuring,
        [&] {
          before = engine.stats();
          fresh.set(true);
        },
        [&] {
          after = engine.stats();
          fresh.set(false);
        });
    if (service) {
      service->stop();
      report.snapshots_published = service->epochs();
    }
    finish(report, c, seconds);
    if (spec.mode == BenchMode::SSI_SAFESNAP) {
      report.prot_waits = after.deferrable_waits - before.deferrable_waits;
      report.prot_aborts = after.deferrable_timeouts - before.deferrable_timeouts;
    } else if (rss_single) {
      report.prot_waits = after.prot_waits - before.prot_waits;
      report.prot_aborts = after.prot_aborts - before.prot_aborts;
      report.freshness_ms = fresh.mean();
    } else {
      report.prot_aborts = report.olap_aborts;
    }
    if (engine.history_truncated()) {
      report.audit_note = "history exceeded " + std::to_string(spec.audit_threshold) +
                          " operations; audit skipped";
    } else {
      const auto audit = audit_with_readers(engine.export_history(), {});
      report.verdict = audit.verdict;
      report.audited_txns = audit.txns;
      report.audit_note = sampler.note();
    }
    return report;
  }

  ReplicaConfig rcfg;
  rcfg.keys = names;
  rcfg.mode = spec.mode == BenchMode::SSI_RSS ? ReplicaMode::Rss : ReplicaMode::Latest;
  rcfg.cadence = spec.cadence;
  rcfg.record_sessions = true;
  rcfg.session_cap = reader_budget;
  Replica replica(rcfg);
  replica.registry().on_publish([&](const RssSnapshot& s) { fresh.hook(s); });
  LogShipper shipper(ecfg.wal, replica, {.latency = spec.latency, .seed = spec.seed},
                     [&](const FeedbackMsg& m) { engine.apply_feedback(m.watermark); });
  replica.start();
  shipper.start();
  auto olap = [&](std::mt19937_64& rng, std::size_t, const std::atomic<bool>&) {
    const auto keys = ks.scan(rng, spec.scan_size);
    const bool m = measuring.load(std::memory_order_relaxed);
    if (m) ++c.olap_attempts;
    auto s = replica.begin();
    Value sum = 0;
    for (std::size_t i = 0; i < keys.size(); ++i) {
      if (i % chunk == 0) round_trip(spec);
      sum += replica.read(s, names[keys[i]]).value;
    }
    (void)sum;
    replica.commit(s);
    if (m) ++c.olap_queries;
  };
  const auto seconds = drive(spec, oltp, olap, measuring, [&] { fresh.set(true); },
                             [&] { fresh.set(false); });
  shipper.stop();
  replica.stop();
  finish(report, c, seconds);
  const auto rstats = replica.stats();
  report.prot_waits = rstats.waits;
  report.prot_aborts = rstats.aborts;
  report.freshness_ms = fresh.mean();
  report.snapshots_published = replica.registry().published_count();
  if (engine.history_truncated()) {
    report.audit_note = "history exceeded " + std::to_string(spec.audit_threshold) +
                        " operations; audit skipped";
    return report;
  }
  const auto sessions = replica.sessions();
  const auto audit = audit_with_readers(engine.export_history(), sessions);
  report.verdict = audit.verdict;
  report.audited_txns = audit.txns;
  if (sessions.size() < rstats.sessions) {
    report.audit_note = "audited " + std::to_string(sessions.size()) + " of " +
                        std::to_string(rstats.sessions) + " replica sessions";
  }
  return report;
}

std::string csv_header() {
  return "mode,oltpClients,olapClients,seed,oltpTps,olapQph,abortRate,protWaits,protAborts,"
         "freshnessMs,verdict";
}

std::string to_csv(const RunReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%llu,%.1f,%.0f,%.4f,%llu,%llu,%.1f,%s",
                to_string(r.spec.mode, r.spec.replicated).c_str(), r.spec.oltp_clients,
                r.spec.olap_clients, static_cast<unsigned long long>(r.spec.seed), r.oltp_tps,
                r.olap_qph, r.abort_rate, static_cast<unsigned long long>(r.prot_waits),
                static_cast<unsigned long long>(r.prot_aborts), r.freshness_ms,
                r.verdict.c_str());
  return buf;
}

std::string to_json(const RunReport& r) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(r.spec.mode, r.spec.replicated);
  j["replicated"] = r.spec.replicated;
  j["oltpClients"] = r.spec.oltp_clients;
  j["olapClients"] = r.spec.olap_clients;
  j["seed"] = r.spec.seed;
  j["seconds"] = r.seconds;
  j["oltpTps"] = r.oltp_tps;
  j["olapQph"] = r.olap_qph;
  j["abortRate"] = r.abort_rate;
  j["oltpCommits"] = r.oltp_commits;
  j["oltpAttempts"] = r.oltp_attempts;
  j["oltpAborts"] = r.oltp_aborts;
  j["oltpFailed"] = r.oltp_failed;
  j["olapQueries"] = r.olap_queries;
  j["olapAborts"] = r.olap_aborts;
  j["prota"] = {{"waits", r.prot_waits}, {"aborts", r.prot_aborts}};
  j["freshnessMs"] = r.freshness_ms;
  j["snapshotsPublished"] = r.snapshots_published;
  j["serializabilityVerdict"] = r.verdict;
  j["auditedTxns"] = r.audited_txns;
  if (!r.audit_note.empty()) j["auditNote"] = r.audit_note;
  return j.dump();
}

}  // namespace htapcc
