#include "htapcc/fuzz.hpp"

#include <algorithm>
#include <chrono>
#include <json.hpp>
#include <sstream>

#include "htapcc/dsg.hpp"

namespace htapcc {

namespace {

using Kind = FuzzStep::Kind;

Key key_name(std::size_t i) { return "k" + std::to_string(i); }

std::vector<Key> key_names(std::size_t n) {
  std::vector<Key> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(key_name(i));
  return out;
}

bool chance(std::mt19937_64& rng, double p) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

std::size_t pick(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

std::string txns_string(const std::set<TxnId>& s) {
  std::string out = "{";
  for (auto t : s) {
    if (out.size() > 1) out += ",";
    out += to_string(t);
  }
  return out + "}";
}

std::set<TxnId> minus(std::set<TxnId> a, const std::set<TxnId>& b) {
  for (auto t : b) a.erase(t);
  return a;
}

// Position in without_txns(h, drop) of the last operation at or before `pos`.
std::uint64_t mapped_position(const History& h, const std::set<TxnId>& drop,
                              std::uint64_t pos) {
  std::uint64_t kept = 0;
  for (const auto& op : h.ops()) {
    if (op.seq > pos) break;
    if (!drop.contains(op.txn)) ++kept;
  }
  return kept == 0 ? 0 : kept - 1;
}

std::vector<std::uint64_t> commit_positions(const History& h) {
  std::vector<std::uint64_t> out;
  for (const auto& op : h.ops()) {
    if (op.kind == OpKind::Commit && op.txn != kInitTxn) out.push_back(op.seq);
  }
  return out;
}

void check_lemmas(const History& hy, std::vector<Violation>& out, CheckCounts* counts) {
  const auto records = txn_records(hy, hy.full());
  const auto g = build_dsg(committed_projection(hy, hy.full()));
  auto begin_of = [&](TxnId t) { return records.at(t).begin_seq; };
  auto end_of = [&](TxnId t) { return *records.at(t).end_seq; };
  for (const auto& e : g.edges()) {
    // Edge from -> to: `from` must serialize first.
    if (end_of(e.to) < begin_of(e.from)) {
      out.push_back({"commit_order_edge", to_string(e.from) + "->" + to_string(e.to) +
                                               " against nonconcurrent commit order"});
    }
    if (begin_of(e.to) < end_of(e.from) && (e.kind != DepKind::RW || !e.vulnerable)) {
      out.push_back({"cross_order_edge", to_string(e.from) + "->" + to_string(e.to) + " is " +
                                              to_string(e.kind) + " between overlapping transactions"});
    }
  }
  for (auto pos : commit_positions(hy)) {
    const Prefix p{pos};
    const auto cls = classify(txn_records(hy, p), p);
    const auto gp = build_dsg(committed_projection(hy, p));
    if (counts) ++counts->prefixes;
    for (const auto& uc : gp.edges()) {
      if (!cls.clear.contains(uc.to) || cls.clear.contains(uc.from)) continue;
      for (const auto& vu : gp.edges()) {
        if (vu.to != uc.from || cls.clear.contains(vu.from)) continue;
        out.push_back({"clear_closure", to_string(vu.from) + "->" + to_string(uc.from) + "->" +
                                           to_string(uc.to) + " at position " + std::to_string(pos)});
      }
    }
  }
}

}  // namespace

Schedule generate_schedule(std::mt19937_64& rng, const FuzzConfig& cfg) {
  Schedule s;
  s.keys = std::max<std::size_t>(1, cfg.keys);
  const auto n = 2 + pick(rng, std::max<std::size_t>(1, cfg.max_txns - 1));
  std::vector<std::vector<FuzzStep>> plans(n);
  Value next_value = 1;
  const bool serializable = cfg.mode == IsolationMode::SSI;
  for (std::size_t i = 0; i < n; ++i) {
    auto role = FuzzRole::ReadWrite;
    const double r = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    if (serializable && r < cfg.snapshot_rate) {
      role = FuzzRole::Snapshot;
    } else if (serializable && r < cfg.snapshot_rate + cfg.deferrable_rate) {
      role = FuzzRole::Deferrable;
    } else if (r < cfg.snapshot_rate + cfg.deferrable_rate + cfg.read_only_rate) {
      role = FuzzRole::ReadOnly;
    }
    s.roles.push_back(role);
    const auto ops = 1 + pick(rng, std::max<std::size_t>(1, cfg.max_ops_per_txn));
    for (std::size_t j = 0; j < ops; ++j) {
      const bool write = role == FuzzRole::ReadWrite && chance(rng, 0.45);
      plans[i].push_back({write ? Kind::Write : Kind::Read, i, pick(rng, s.keys),
                          write ? next_value++ : 0});
    }
    const bool abort = role == FuzzRole::ReadWrite && chance(rng, cfg.abort_rate);
    plans[i].push_back({abort ? Kind::Abort : Kind::Commit, i, 0, 0});
  }
  std::vector<std::size_t> cursor(n, 0);
  std::vector<std::size_t> open(n);
  for (std::size_t i = 0; i < n; ++i) open[i] = i;
  while (!open.empty()) {
    if (chance(rng, cfg.construct_rate)) s.steps.push_back({Kind::Construct});
    if (chance(rng, cfg.gc_rate)) s.steps.push_back({Kind::Gc});
    const auto at = pick(rng, open.size());
    const auto slot = open[at];
    s.steps.push_back(plans[slot][cursor[slot]++]);
    if (cursor[slot] == plans[slot].size()) open.erase(open.begin() + static_cast<long>(at));
  }
  s.steps.push_back({Kind::Construct});
  return s;
}

Schedule read_only_anomaly_schedule() {
  Schedule s;
  s.keys = 2;  // k0 plays x, k1 plays y
  s.roles = {FuzzRole::ReadWrite, FuzzRole::ReadWrite, FuzzRole::ReadOnly};
  s.steps = {
      {Kind::Read, 0, 1},  {Kind::Read, 1, 0},      {Kind::Read, 1, 1},
      {Kind::Write, 0, 1, 20}, {Kind::Commit, 0},   {Kind::Construct},
      {Kind::Read, 2, 0},  {Kind::Read, 2, 1},      {Kind::Write, 1, 0, -11},
      {Kind::Commit, 1},   {Kind::Commit, 2},       {Kind::Construct},
  };
  return s;
}

RunOutcome run_schedule(const Schedule& s, IsolationMode mode) {
  RunOutcome out;
  const auto keys = key_names(s.keys);
  EngineConfig ecfg;
  ecfg.mode = mode;
  ecfg.keys = keys;
  ecfg.wal = std::make_shared<WalLog>();
  ecfg.snapshots = std::make_shared<SnapshotRegistry>();
  ecfg.audit_reads = true;
  ecfg.snapshots->on_publish([&](const RssSnapshot& snap) { out.epochs.push_back(snap); });
  Engine engine(ecfg);
  RssService service(ecfg.wal, ecfg.snapshots, {.keys = keys},
                     [&](std::uint64_t w) { engine.apply_feedback(w); });

  enum class State : std::uint8_t { Pending, Open, Done };
  std::vector<State> state(s.roles.size(), State::Pending);
  std::vector<Session> sessions(s.roles.size());

  auto flags_of = [](FuzzRole r) {
    SessionFlags f;
    f.read_only = r != FuzzRole::ReadWrite;
    f.use_rss = r == FuzzRole::Snapshot;
    f.deferrable = r == FuzzRole::Deferrable;
    return f;
  };
  auto guarded = [&](auto&& fn) {
    try {
      fn();
    } catch (const TxnAborted&) {
      return false;
    } catch (const std::exception& e) {
      out.errors.push_back(e.what());
      return false;
    }
    return true;
  };

  for (const auto& step : s.steps) {
    if (step.kind == Kind::Construct) {
      guarded([&] { service.construct_now(); });
      continue;
    }
    if (step.kind == Kind::Gc) {
      guarded([&] { engine.gc(); });
      continue;
    }
    if (step.slot >= s.roles.size() || state[step.slot] == State::Done) continue;
    const auto role = s.roles[step.slot];
    if (step.kind == Kind::Write && role != FuzzRole::ReadWrite) continue;
    auto& st = state[step.slot];
    auto& session = sessions[step.slot];
    if (st == State::Pending) {
      if (!guarded([&] { session = engine.begin(flags_of(role)); })) {
        st = State::Done;
        continue;
      }
      st = State::Open;
    }
    const bool ok = guarded([&] {
      switch (step.kind) {
        case Kind::Read:
          if (role == FuzzRole::Deferrable && !engine.try_safe_snapshot(session)) return;
          engine.read(session, key_name(step.key % s.keys));
          return;
        case Kind::Write:
          engine.write(session, key_name(step.key % s.keys), step.value);
          return;
        case Kind::Commit:
          engine.commit(session);
          st = State::Done;
          return;
        case Kind::Abort:
          engine.abort(session);
          st = State::Done;
          return;
        default:
          return;
      }
    });
    if (!ok) st = State::Done;
  }
  // Sessions the schedule left open end in slot order, deferrables last.
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t i = 0; i < s.roles.size(); ++i) {
      if (state[i] != State::Open || (s.roles[i] == FuzzRole::Deferrable) != (pass == 1)) {
        continue;
      }
      guarded([&] { engine.commit(sessions[i]); });
      state[i] = State::Done;
    }
  }
  guarded([&] { service.construct_now(); });

  out.history = engine.export_history();
  out.snapshot_txns = engine.snapshot_sessions();
  out.stats = engine.stats();
  const auto committed = out.history.committed();
  for (std::size_t i = 0; i < s.roles.size(); ++i) {
    if (s.roles[i] == FuzzRole::Deferrable && sessions[i].valid() &&
        committed.contains(sessions[i].id())) {
      out.deferrable_txns.insert(sessions[i].id());
    }
  }
  return out;
}

std::vector<Violation> check_run(const RunOutcome& run, std::mt19937_64& rng,
                                 CheckCounts* counts) {
  std::vector<Violation> out;
  for (const auto& e : run.errors) out.push_back({"error", e});
  const auto& h = run.history;

  std::set<TxnId> prots;
  for (const auto& [t, epoch] : run.snapshot_txns) prots.insert(t);
  std::set<TxnId> exempt = prots;
  exempt.insert(run.deferrable_txns.begin(), run.deferrable_txns.end());

  const auto full = committed_projection(h, h.full());
  if (const auto cycle = find_cycle(build_dsg(full))) {
    std::string s;
    for (auto t : *cycle) s += to_string(t) + " ";
    out.push_back({"reader_cycle", "cycle " + s});
  }

  const auto hx = without_txns(h, prots);
  std::map<std::uint64_t, std::set<TxnId>> members_by_epoch;
  std::optional<std::uint64_t> last_frontier;
  std::set<TxnId> last_members;
  for (const auto& snap : run.epochs) {
    if (counts) ++counts->epochs;
    const auto& rss = snap.rss;
    const Prefix p{rss.basis_prefix};
    const auto members = minus(rss.members(txn_records(h, p)), exempt);
    members_by_epoch[rss.epoch] = members;
    const auto tag = "epoch " + std::to_string(rss.epoch);

    const auto gp = build_dsg(committed_projection(without_txns(h, exempt), {
        mapped_position(h, exempt, p.up_to)}));
    if (!verify_rss(gp, members)) {
      out.push_back({"rss", tag + " members " + txns_string(members)});
    }

    const Prefix px{mapped_position(h, prots, p.up_to)};
    const auto offline = minus(construct_rss_at(hx, px).members(txn_records(hx, px)), exempt);
    if (offline != members) {
      out.push_back({"manager_offline", tag + " builder " + txns_string(members) +
                                            " offline " + txns_string(offline)});
    }

    if (last_frontier && rss.clear_frontier < *last_frontier) {
      out.push_back({"monotone", tag + " clear frontier moved backwards"});
    }
    if (!std::includes(members.begin(), members.end(), last_members.begin(),
                       last_members.end())) {
      out.push_back({"monotone", tag + " dropped members of the previous epoch"});
    }
    last_frontier = rss.clear_frontier;
    last_members = members;
  }

  for (const auto& [t, epoch] : run.snapshot_txns) {
    auto it = members_by_epoch.find(epoch);
    if (it == members_by_epoch.end()) {
      out.push_back({"prot", to_string(t) + " bound to unknown epoch"});
      continue;
    }
    if (counts) ++counts->snapshot_reads;
    if (!verify_prot(full, t, it->second)) {
      out.push_back({"prot", to_string(t) + " at epoch " + std::to_string(epoch)});
    }
  }

  // Offline construction at a random prefix of the history without snapshot
  // readers.
  const auto hz = without_txns(h, exempt);
  const Prefix rp{std::uniform_int_distribution<std::uint64_t>(0, hz.last_seq())(rng)};
  const auto rz = minus(construct_rss_at(hz, rp).members(txn_records(hz, rp)), exempt);
  if (!verify_rss(build_dsg(committed_projection(hz, rp)), rz)) {
    out.push_back({"offline_rss", "prefix " + std::to_string(rp.up_to)});
  }

  check_lemmas(hz, out, counts);
  return out;
}

std::size_t schedule_ops(const Schedule& s, IsolationMode mode) {
  return run_schedule(s, mode).history.user_ops().size();
}

Schedule shrink(const Schedule& s, const std::function<bool(const Schedule&)>& fails) {
  Schedule best = s;
  bool progress = true;
  while (progress) {
    progress = false;
    for (std::size_t slot = 0; slot < best.roles.size(); ++slot) {
      Schedule cand = best;
      std::erase_if(cand.steps, [&](const FuzzStep& st) {
        return st.kind != Kind::Construct && st.kind != Kind::Gc && st.slot == slot;
      });
      if (cand.steps.size() != best.steps.size() && fails(cand)) {
        best = std::move(cand);
        progress = true;
      }
    }
    for (std::size_t i = 0; i < best.steps.size();) {
      Schedule cand = best;
      cand.steps.erase(cand.steps.begin() + static_cast<long>(i));
      if (fails(cand)) {
        best = std::move(cand);
        progress = true;
      } else {
        ++i;
      }
    }
  }
  return best;
}

std::string to_string(const Schedule& s) {
  std::ostringstream os;
  for (const auto& st : s.steps) {
    switch (st.kind) {
      case Kind::Read:
        os << "r" << st.slot << "(" << key_name(st.key) << ") ";
        break;
      case Kind::Write:
        os << "w" << st.slot << "(" << key_name(st.key) << "," << st.value << ") ";
        break;
      case Kind::Commit:
        os << "c" << st.slot << " ";
        break;
      case Kind::Abort:
        os << "a" << st.slot << " ";
        break;
      case Kind::Construct:
        os << "construct ";
        break;
      case Kind::Gc:
        os << "gc ";
        break;
    }
  }
  auto text = os.str();
  if (!text.empty()) text.pop_back();
  return text;
}

FuzzSummary run_fuzz(const FuzzConfig& cfg) {
  const auto started = std::chrono::steady_clock::now();
  FuzzSummary sum;
  std::mt19937_64 rng(cfg.seed);
  std::mt19937_64 check_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const bool serializable = cfg.mode == IsolationMode::SSI;
  std::optional<Schedule> failing;
  for (std::uint64_t i = 0; i < cfg.iterations; ++i) {
    const auto sched = generate_schedule(rng, cfg);
    const auto run = run_schedule(sched, cfg.mode);
    ++sum.iterations;
    sum.committed_txns += run.history.committed().size() - 1;
    sum.snapshot_txns += run.snapshot_txns.size();
    sum.deferrable_txns += run.deferrable_txns.size();
    if (!serializable) {
      const auto report = classify_anomaly(committed_projection(run.history, run.history.full()));
      if (!report.serializable) ++sum.nonserializable;
      if (report.read_only_anomaly) ++sum.read_only_anomalies;
      // Keep the first read-only anomaly, else the first cycle.
      const bool upgrade = report.read_only_anomaly && sum.first && sum.first->check != "read-only-anomaly";
      if (!report.serializable && (!failing || upgrade)) {
        failing = sched;
        std::string cycle;
        for (auto t : *report.cycle) cycle += to_string(t) + " ";
        sum.first = Violation{report.read_only_anomaly ? "read-only-anomaly" : "nonserializable", cycle};
      }
      continue;
    }
    const auto violations = check_run(run, check_rng, &sum.checked);
    if (violations.empty()) continue;
    sum.violations += violations.size();
    for (const auto& v : violations) ++sum.by_check[v.check];
    if (!failing) {
      failing = sched;
      sum.first = violations.front();
    }
  }
  if (failing) {
    const auto check = sum.first->check;
    auto fails = [&](const Schedule& s) {
      if (!serializable) {
        const auto h = run_schedule(s, cfg.mode).history;
        const auto report = classify_anomaly(committed_projection(h, h.full()));
        return check == "read-only-anomaly" ? report.read_only_anomaly.has_value() : !report.serializable;
      }
      std::mt19937_64 r(cfg.seed);
      for (const auto& v : check_run(run_schedule(s, cfg.mode), r)) {
        if (v.check == check) return true;
      }
      return false;
    };
    const auto small = shrink(*failing, fails);
    const auto run = run_schedule(small, cfg.mode);
    sum.counterexample = serialize_history(run.history);
    sum.counterexample_ops = run.history.user_ops().size();
  }
  sum.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return sum;
}

std::string to_json(const FuzzSummary& s) {
  nlohmann::ordered_json j;
  j["iterations"] = s.iterations;
  j["committedTxns"] = s.committed_txns;
  j["snapshotTxns"] = s.snapshot_txns;
  j["deferrableTxns"] = s.deferrable_txns;
  j["epochsChecked"] = s.checked.epochs;
  j["snapshotReadersChecked"] = s.checked.snapshot_reads;
  j["prefixesChecked"] = s.checked.prefixes;
  j["violations"] = s.violations;
  j["byCheck"] = s.by_check;
  j["nonserializable"] = s.nonserializable;
  j["readOnlyAnomalies"] = s.read_only_anomalies;
  if (s.first) j["first"] = {{"check", s.first->check}, {"detail", s.first->detail}};
  if (s.counterexample) {
    j["counterexample"] = *s.counterexample;
    j["counterexampleOps"] = s.counterexample_ops;
  }
  j["seconds"] = s.seconds;
  return j.dump();
}

}  // namespace htapcc
