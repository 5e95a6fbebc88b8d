#include "htapcc/engine.hpp"

#include <algorithm>
#include <limits>

namespace htapcc {

namespace detail {

struct SessionState {
  TxnId id{};
  SessionFlags flags;
  std::uint64_t snapshot = 0;
  bool closed = false;
  AbortReason reason = AbortReason::None;
  std::shared_ptr<const RssSnapshot> bound;
  std::vector<Operation> reads;
};

}  // namespace detail

struct Engine::Txn {
  TxnId id{};
  SessionFlags flags;
  std::uint64_t snapshot_seq = 0;
  TxnState state = TxnState::Active;
  std::uint64_t commit_seq = 0;
  std::map<Key, Value> writes;
  std::set<Key> read_keys;
  std::set<std::uint64_t> in;   // readers with an rw-dependency on this txn
  std::set<std::uint64_t> out;  // writers this txn has an rw-dependency on
  bool exempt = false;          // deferrable session past its safe point
  std::vector<std::uint64_t> watch;
  std::shared_ptr<detail::SessionState> session;
};

std::string to_string(AbortReason r) {
  switch (r) {
    case AbortReason::None:
      return "none";
    case AbortReason::WriteConflict:
      return "write conflict";
    case AbortReason::SerializationFailure:
      return "serialization failure";
    case AbortReason::DeferrableTimeout:
      return "deferrable timeout";
    case AbortReason::User:
      return "user abort";
    case AbortReason::Shutdown:
      return "shutdown";
  }
  return "?";
}

TxnAborted::TxnAborted(TxnId t, AbortReason reason)
    : EngineError(to_string(t) + " aborted: " + to_string(reason)), reason_(reason) {}

TxnId Session::id() const { return state_->id; }
const SessionFlags& Session::flags() const { return state_->flags; }
std::uint64_t Session::snapshot() const { return state_->snapshot; }

Engine::Engine(EngineConfig cfg) : cfg_(std::move(cfg)) {
  key_set_.insert(cfg_.keys.begin(), cfg_.keys.end());
  for (const auto& k : key_set_) {
    chains_[k].push_back({kInitTxn, 0, 0, 0});
    if (cfg_.audit_reads) shadow_[k].push_back({kInitTxn, 0, 0, 0});
  }
  pos_ = key_set_.size() + 1;
}

Engine::~Engine() { shutdown(); }

std::uint64_t Engine::next_pos() { return pos_++; }

void Engine::record(Operation op, bool keep) {
  op.seq = next_pos();
  if (!keep || !cfg_.record_history || truncated_) return;
  if (cfg_.history_cap != 0 && ops_.size() >= cfg_.history_cap) {
    truncated_ = true;
    return;
  }
  ops_.push_back(std::move(op));
}

void Engine::emit(std::vector<WalPayload> batch) {
  if (cfg_.wal) cfg_.wal->append(std::move(batch));
}

const Engine::Version* Engine::visible(const std::vector<Version>& chain,
                                       std::uint64_t snap) {
  for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
    if (it->commit_seq <= snap) return &*it;
  }
  return nullptr;
}

Engine::Txn& Engine::live(const Session& s) {
  if (!s.valid()) throw SessionClosed("invalid session");
  const auto& st = *s.state_;
  if (st.closed) {
    if (st.reason != AbortReason::None && st.reason != AbortReason::User) {
      throw TxnAborted(st.id, st.reason);
    }
    throw SessionClosed(to_string(st.id) + " has ended");
  }
  if (shut_down_) throw EngineShutDown("engine is shut down");
  return *txns_.at(raw(st.id));
}

Session Engine::begin(SessionFlags flags) {
  if (flags.use_rss || flags.deferrable) flags.read_only = true;
  if (flags.unrecorded && !flags.read_only) throw EngineError("only read-only sessions can be unrecorded");
  auto st = std::make_shared<detail::SessionState>();
  st->flags = flags;

  if (flags.use_rss) {
    if (!cfg_.snapshots) throw EngineError("no snapshot registry configured");
    auto snap = cfg_.snapshots->current();
    if (!snap) throw EngineError("no snapshot has been published");
    std::lock_guard lock(mu_);
    if (shut_down_) throw EngineShutDown("engine is shut down");
    st->id = TxnId{next_txn_++};
    st->bound = std::move(snap);
    st->snapshot = st->bound->rss.epoch;
    record(Operation::begin(st->id), !flags.unrecorded);
    return Session(std::move(st));
  }

  std::lock_guard lock(mu_);
  if (shut_down_) throw EngineShutDown("engine is shut down");
  auto t = std::make_unique<Txn>();
  t->id = TxnId{next_txn_++};
  t->flags = flags;
  t->snapshot_seq = commit_counter_;
  t->session = st;
  st->id = t->id;
  st->snapshot = t->snapshot_seq;
  snapshots_.insert(t->snapshot_seq);
  if (flags.deferrable) {
    for (const auto& [id, other] : txns_) {
      if (other->state == TxnState::Active && !other->flags.read_only) {
        t->watch.push_back(id);
      }
    }
  }
  const auto pos = pos_;
  record(Operation::begin(t->id), !flags.unrecorded);
  emit({BeginRec{t->id, pos}});
  txns_.emplace(raw(t->id), std::move(t));
  return Session(std::move(st));
}

Engine::Safety Engine::evaluate_safety(const Txn& t) const {
  for (auto w : t.watch) {
    auto it = txns_.find(w);
    if (it != txns_.end() && it->second->state == TxnState::Active) return Safety::Pending;
  }
  for (auto w : t.watch) {
    auto it = txns_.find(w);
    if (it == txns_.end() || it->second->state != TxnState::Committed) continue;
    for (auto x : it->second->out) {
      auto xt = txns_.find(x);
      // Dropped transactions committed before every live snapshot.
      if (xt == txns_.end()) return Safety::Unsafe;
      if (xt->second->state == TxnState::Committed &&
          xt->second->commit_seq <= t.snapshot_seq) {
        return Safety::Unsafe;
      }
    }
  }
  return Safety::Safe;
}

void Engine::retake_snapshot(Txn& t) {
  snapshots_.erase(snapshots_.find(t.snapshot_seq));
  t.snapshot_seq = commit_counter_;
  t.session->snapshot = t.snapshot_seq;
  snapshots_.insert(t.snapshot_seq);
  t.watch.clear();
  for (const auto& [id, other] : txns_) {
    if (other->state == TxnState::Active && !other->flags.read_only) {
      t.watch.push_back(id);
    }
  }
  ++stats_.deferrable_retries;
}

bool Engine::try_safe_snapshot(Session& s) {
  std::lock_guard lock(mu_);
  auto& t = live(s);
  if (!t.flags.deferrable || t.exempt) return true;
  for (;;) {
    switch (evaluate_safety(t)) {
      case Safety::Pending:
        return false;
      case Safety::Unsafe:
        retake_snapshot(t);
        break;
      case Safety::Safe:
        t.exempt = true;
        return true;
    }
  }
}

void Engine::wait_until_safe(std::unique_lock<std::mutex>& lock, Txn& t) {
  const auto start = SteadyClock::now();
  const auto deadline = start + cfg_.deferrable_timeout;
  bool waited = false;
  for (;;) {
    const auto safety = evaluate_safety(t);
    if (safety == Safety::Safe) break;
    if (safety == Safety::Unsafe) {
      retake_snapshot(t);
      continue;
    }
    waited = true;
    if (ended_.wait_until(lock, deadline) == std::cv_status::timeout &&
        evaluate_safety(t) == Safety::Pending) {
      ++stats_.deferrable_waits;
      ++stats_.deferrable_timeouts;
      abort_locked(t, AbortReason::DeferrableTimeout);
      throw TxnAborted(t.id, AbortReason::DeferrableTimeout);
    }
    if (shut_down_) throw EngineShutDown("engine is shut down");
  }
  if (waited) {
    ++stats_.deferrable_waits;
    stats_.deferrable_wait_ms +=
        std::chrono::duration<double, std::milli>(SteadyClock::now() - start).count();
  }
  t.exempt = true;
}

bool Engine::add_conflict(Txn& reader, Txn& writer) {
  if (reader.out.contains(raw(writer.id))) return true;
  if (reader.state == TxnState::Committed && !reader.in.empty()) return false;
  if (writer.state == TxnState::Committed && !writer.out.empty()) return false;
  reader.out.insert(raw(writer.id));
  writer.in.insert(raw(reader.id));
  return true;
}

ReadResult Engine::read(Session& s, const Key& key) {
  if (s.valid() && s.state_->flags.use_rss) {
    auto& st = *s.state_;
    if (st.closed) throw SessionClosed(to_string(st.id) + " has ended");
    auto it = st.bound->read_map.find(key);
    if (it == st.bound->read_map.end()) throw UnknownKey("unknown key '" + key + "'");
    if (cfg_.record_history && !st.flags.unrecorded && !truncated_.load(std::memory_order_relaxed)) {
      st.reads.push_back(Operation::read(st.id, key, it->second.creator, it->second.value));
    }
    return {it->second.value, {key, it->second.creator}};
  }

  std::unique_lock lock(mu_);
  auto& t = live(s);
  if (!key_set_.contains(key)) throw UnknownKey("unknown key '" + key + "'");
  if (t.flags.deferrable && !t.exempt) wait_until_safe(lock, t);

  if (auto w = t.writes.find(key); w != t.writes.end()) {
    record(Operation::read(t.id, key, t.id, w->second), !t.flags.unrecorded);
    return {w->second, {key, t.id}};
  }
  const auto& chain = chains_.at(key);
  const auto* v = visible(chain, t.snapshot_seq);
  if (v == nullptr) throw std::logic_error("version reclaimed under an active snapshot");
  if (cfg_.audit_reads) {
    const auto* expect = visible(shadow_.at(key), t.snapshot_seq);
    if (expect->creator != v->creator || expect->value != v->value) {
      throw AuditFailure("read of '" + key + "' by " + to_string(t.id) + " returned " +
                         to_string(v->creator) + ", expected " + to_string(expect->creator));
    }
  }

  if (cfg_.mode == IsolationMode::SSI && !t.exempt) {
    if (t.read_keys.insert(key).second) readers_[key].push_back(raw(t.id));
    bool ok = true;
    for (auto it = chain.rbegin(); ok && it != chain.rend() && it->commit_seq > t.snapshot_seq;
         ++it) {
      ok = add_conflict(t, *txns_.at(raw(it->creator)));
    }
    if (auto pw = pending_writer_.find(key); ok && pw != pending_writer_.end()) {
      ok = add_conflict(t, *txns_.at(pw->second));
    }
    if (!ok) {
      abort_locked(t, AbortReason::SerializationFailure);
      throw TxnAborted(t.id, AbortReason::SerializationFailure);
    }
  }
  record(Operation::read(t.id, key, v->creator, v->value), !t.flags.unrecorded);
  return {v->value, {key, v->creator}};
}

VersionId Engine::write(Session& s, const Key& key, Value value) {
  if (s.valid() && s.state_->flags.read_only) {
    throw ReadOnlyViolation(to_string(s.id()) + " is read-only");
  }
  std::lock_guard lock(mu_);
  auto& t = live(s);
  if (!key_set_.contains(key)) throw UnknownKey("unknown key '" + key + "'");

  if (auto w = t.writes.find(key); w != t.writes.end()) {
    w->second = value;
    record(Operation::write(t.id, key, value));
    return {key, t.id};
  }
  const auto& chain = chains_.at(key);
  const auto pw = pending_writer_.find(key);
  if (chain.back().commit_seq > t.snapshot_seq || pw != pending_writer_.end()) {
    abort_locked(t, AbortReason::WriteConflict);
    throw TxnAborted(t.id, AbortReason::WriteConflict);
  }
  if (cfg_.mode == IsolationMode::SSI) {
    if (auto rs = readers_.find(key); rs != readers_.end()) {
      for (auto r : rs->second) {
        if (r == raw(t.id)) continue;
        auto rt = txns_.find(r);
        if (rt == txns_.end()) continue;
        auto& reader = *rt->second;
        const bool concurrent =
            reader.state == TxnState::Active ||
            (reader.state == TxnState::Committed && reader.commit_seq > t.snapshot_seq);
        if (concurrent && !add_conflict(reader, t)) {
          abort_locked(t, AbortReason::SerializationFailure);
          throw TxnAborted(t.id, AbortReason::SerializationFailure);
        }
      }
    }
  }
  pending_writer_[key] = raw(t.id);
  t.writes[key] = value;
  record(Operation::write(t.id, key, value));
  return {key, t.id};
}

CommitOutcome Engine::commit(Session& s) {
  if (s.valid() && s.state_->flags.use_rss) {
    auto& st = *s.state_;
    std::lock_guard lock(mu_);
    if (st.closed) throw SessionClosed(to_string(st.id) + " has ended");
    for (auto& op : st.reads) record(std::move(op));
    record(Operation::commit(st.id), !st.flags.unrecorded);
    if (!st.flags.unrecorded) prot_epochs_[st.id] = st.bound->rss.epoch;
    ++stats_.prot_commits;
    st.reads.clear();
    st.bound.reset();
    st.closed = true;
    return {true, commit_counter_, AbortReason::None};
  }

  std::unique_lock lock(mu_);
  auto& t = live(s);
  if (cfg_.mode == IsolationMode::SSI && !t.exempt && !t.in.empty() && !t.out.empty()) {
    abort_locked(t, AbortReason::SerializationFailure);
    return {false, 0, AbortReason::SerializationFailure};
  }
  t.commit_seq = ++commit_counter_;
  t.state = TxnState::Committed;
  for (const auto& [k, v] : t.writes) {
    chains_.at(k).push_back({t.id, v, t.commit_seq, 0});
    if (cfg_.audit_reads) shadow_.at(k).push_back({t.id, v, t.commit_seq, 0});
    pending_writer_.erase(k);
  }
  const auto pos = pos_;
  record(Operation::commit(t.id), !t.flags.unrecorded);
  if (cfg_.wal) {
    CommitRec c{t.id, t.commit_seq, pos, {t.writes.begin(), t.writes.end()}, 0};
    std::vector<WalPayload> batch;
    if (!t.out.empty() && cfg_.emit_dependencies) {
      RwDepsRec d{t.id, {}};
      for (auto w : t.out) d.writers.push_back(TxnId{w});
      c.deps = static_cast<std::uint32_t>(d.writers.size());
      batch.emplace_back(std::move(c));
      batch.emplace_back(std::move(d));
    } else {
      batch.emplace_back(std::move(c));
    }
    emit(std::move(batch));
  }
  snapshots_.erase(snapshots_.find(t.snapshot_seq));
  t.session->closed = true;
  ++stats_.commits;
  const auto seq = t.commit_seq;
  ended_.notify_all();
  if (cfg_.gc_interval_commits != 0 && stats_.commits % cfg_.gc_interval_commits == 0) {
    gc_locked();
  }
  return {true, seq, AbortReason::None};
}

void Engine::abort_locked(Txn& t, AbortReason reason) {
  for (const auto& [k, _] : t.writes) {
    if (auto pw = pending_writer_.find(k); pw != pending_writer_.end() && pw->second == raw(t.id)) {
      pending_writer_.erase(pw);
    }
  }
  t.writes.clear();
  for (auto r : t.in) {
    if (auto it = txns_.find(r); it != txns_.end()) it->second->out.erase(raw(t.id));
  }
  for (auto w : t.out) {
    if (auto it = txns_.find(w); it != txns_.end()) it->second->in.erase(raw(t.id));
  }
  t.in.clear();
  t.out.clear();
  t.state = TxnState::Aborted;
  const auto pos = pos_;
  record(Operation::abort(t.id), !t.flags.unrecorded);
  emit({AbortRec{t.id, pos}});
  snapshots_.erase(snapshots_.find(t.snapshot_seq));
  t.session->closed = true;
  t.session->reason = reason;
  ++stats_.aborts;
  if (reason == AbortReason::WriteConflict) ++stats_.write_conflicts;
  if (reason == AbortReason::SerializationFailure) ++stats_.serialization_failures;
  ended_.notify_all();
}

void Engine::abort(Session& s) {
  if (!s.valid()) return;
  std::lock_guard lock(mu_);
  auto& st = *s.state_;
  if (st.closed) return;
  if (st.flags.use_rss) {
    record(Operation::abort(st.id), !st.flags.unrecorded);
    st.reads.clear();
    st.bound.reset();
    st.closed = true;
    st.reason = AbortReason::User;
    return;
  }
  abort_locked(*txns_.at(raw(st.id)), AbortReason::User);
}

GcReport Engine::gc() {
  std::lock_guard lock(mu_);
  return gc_locked();
}

GcReport Engine::gc_locked() {
  std::vector<std::uint64_t> watermarks;
  if (feedback_) watermarks.push_back(*feedback_);
  if (cfg_.snapshots) {
    if (auto w = cfg_.snapshots->min_live_watermark()) watermarks.push_back(*w);
  }
  std::vector<std::uint64_t> active;
  if (!snapshots_.empty()) active.push_back(*snapshots_.begin());

  GcReport report;
  report.horizon = gc_horizon(watermarks, active, commit_counter_);
  for (auto& [_, chain] : chains_) {
    std::size_t keep_from = 0;
    for (std::size_t i = 0; i < chain.size(); ++i) {
      if (chain[i].commit_seq <= report.horizon) keep_from = i;
    }
    chain.erase(chain.begin(), chain.begin() + static_cast<std::ptrdiff_t>(keep_from));
    report.reclaimed += keep_from;
  }
  stats_.reclaimed_versions += report.reclaimed;

  // Conflict tracking only needs transactions some live snapshot cannot see.
  const auto oldest = snapshots_.empty() ? commit_counter_ : *snapshots_.begin();
  std::erase_if(txns_, [&](const auto& kv) {
    const auto& t = *kv.second;
    const bool drop = t.state == TxnState::Aborted ||
                      (t.state == TxnState::Committed && t.commit_seq <= oldest);
    report.txns_dropped += drop;
    return drop;
  });
  for (auto it = readers_.begin(); it != readers_.end();) {
    std::erase_if(it->second, [&](std::uint64_t r) { return !txns_.contains(r); });
    it = it->second.empty() ? readers_.erase(it) : std::next(it);
  }
  return report;
}

void Engine::apply_feedback(std::uint64_t watermark) {
  std::lock_guard lock(mu_);
  feedback_ = std::max(feedback_.value_or(0), watermark);
}

void Engine::shutdown() {
  {
    std::lock_guard lock(mu_);
    shut_down_ = true;
  }
  ended_.notify_all();
}

History Engine::export_history() const {
  std::vector<Operation> ops;
  {
    std::lock_guard lock(mu_);
    ops = ops_;
  }
  return History::from_user_ops(std::move(ops), key_set_);
}

std::map<TxnId, std::uint64_t> Engine::snapshot_sessions() const {
  std::lock_guard lock(mu_);
  return prot_epochs_;
}

bool Engine::history_truncated() const {
  std::lock_guard lock(mu_);
  return truncated_;
}

EngineStats Engine::stats() const {
  std::lock_guard lock(mu_);
  return stats_;
}

std::uint64_t Engine::last_commit_seq() const {
  std::lock_guard lock(mu_);
  return commit_counter_;
}

std::size_t Engine::version_count() const {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (const auto& [_, c] : chains_) n += c.size();
  return n;
}

}  // namespace htapcc
