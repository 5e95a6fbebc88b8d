#include "htapcc/rss.hpp"

#include <algorithm>
#include <limits>
#include <unordered_set>

#include "htapcc/dsg.hpp"

namespace htapcc {

TxnClass classify(const std::map<TxnId, TxnRecord>& records, Prefix p) {
  TxnClass cls;
  std::uint64_t frontier = p.up_to + 1;
  for (const auto& [t, rec] : records) {
    if (rec.state == TxnState::Active) {
      cls.active.insert(t);
      frontier = std::min(frontier, rec.begin_seq);
    } else if (rec.state == TxnState::Committed) {
      cls.done.insert(t);
    }
  }
  cls.clear_frontier = frontier;
  for (auto t : cls.done) {
    if (*records.at(t).end_seq < frontier) cls.clear.insert(t);
  }
  return cls;
}

void DepGraphShard::add(TxnId reader, const std::vector<TxnId>& writers) {
  auto& out = out_[reader];
  out.insert(writers.begin(), writers.end());
}

const std::set<TxnId>& DepGraphShard::out(TxnId reader) const {
  static const std::set<TxnId> kNone;
  auto it = out_.find(reader);
  return it == out_.end() ? kNone : it->second;
}

std::size_t DepGraphShard::edge_count() const {
  std::size_t n = 0;
  for (const auto& [_, s] : out_) n += s.size();
  return n;
}

DepGraphShard deps_from_history(const History& h, Prefix p) {
  const auto g = build_dsg(committed_projection(h, p));
  std::map<TxnId, std::vector<TxnId>> out;
  for (auto t : g.nodes()) out[t];
  for (const auto& e : g.edges()) {
    if (e.kind == DepKind::RW && e.vulnerable) out[e.from].push_back(e.to);
  }
  DepGraphShard shard;
  for (const auto& [t, writers] : out) shard.add(t, writers);
  return shard;
}

std::set<TxnId> RssSet::members(const std::map<TxnId, TxnRecord>& records) const {
  std::set<TxnId> out;
  for (const auto& [t, rec] : records) {
    if (rec.state == TxnState::Committed && contains(t, *rec.end_seq)) out.insert(t);
  }
  return out;
}

std::optional<RssSet> construct_rss(const TxnClass& cls,
                                    const std::map<TxnId, TxnRecord>& records,
                                    const DepGraphShard& deps, Prefix p,
                                    std::uint64_t epoch) {
  RssSet rss{epoch, p.up_to, cls.clear_frontier, {}};
  for (auto t : cls.done) {
    if (cls.clear.contains(t)) continue;
    if (!records.contains(t)) continue;
    if (!deps.known(t)) return std::nullopt;
    for (auto w : deps.out(t)) {
      if (cls.clear.contains(w)) {
        rss.extra.insert(t);
        break;
      }
    }
  }
  return rss;
}

RssSet construct_rss_at(const History& h, Prefix p, std::uint64_t epoch) {
  const auto records = txn_records(h, p);
  const auto cls = classify(records, p);
  return *construct_rss(cls, records, deps_from_history(h, p), p, epoch);
}

std::vector<WalPayload> wal_from_history(const History& h) {
  const auto deps = deps_from_history(h, h.full());
  std::vector<WalPayload> out;
  std::map<TxnId, std::map<Key, Value>> writes;
  std::uint64_t commit_seq = 0;
  for (std::size_t i = h.init_ops(); i < h.ops().size(); ++i) {
    const auto& op = h.ops()[i];
    switch (op.kind) {
      case OpKind::Begin:
        out.emplace_back(BeginRec{op.txn, op.seq});
        break;
      case OpKind::Write:
        writes[op.txn][op.version.key] = op.value;
        break;
      case OpKind::Read:
        break;
      case OpKind::Abort:
        out.emplace_back(AbortRec{op.txn, op.seq});
        writes.erase(op.txn);
        break;
      case OpKind::Commit: {
        const auto& w = writes[op.txn];
        const auto& targets = deps.out(op.txn);
        out.emplace_back(CommitRec{op.txn, ++commit_seq, op.seq, {w.begin(), w.end()},
                                   static_cast<std::uint32_t>(targets.size())});
        if (!targets.empty()) {
          out.emplace_back(RwDepsRec{op.txn, {targets.begin(), targets.end()}});
        }
        writes.erase(op.txn);
        break;
      }
    }
  }
  return out;
}

VersionStore version_store_from(const History& h, Prefix p) {
  VersionStore store;
  std::map<TxnId, std::map<Key, Value>> writes;
  std::uint64_t commit_seq = 0;
  for (const auto& op : h.ops()) {
    if (op.txn != kInitTxn && op.seq > p.up_to) break;
    if (op.kind == OpKind::Write) {
      writes[op.txn][op.version.key] = op.value;
    } else if (op.kind == OpKind::Commit) {
      const auto seq = op.txn == kInitTxn ? 0 : ++commit_seq;
      for (const auto& [k, v] : writes[op.txn]) {
        store[k].versions.push_back({op.txn, v, seq, op.txn == kInitTxn ? 0 : op.seq});
      }
      writes.erase(op.txn);
    }
  }
  return store;
}

std::size_t prune_chain(VersionChain& chain, std::uint64_t horizon) {
  auto& v = chain.versions;
  std::size_t keep_from = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i].commit_seq <= horizon) keep_from = i;
  }
  if (keep_from == 0) return 0;
  v.erase(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(keep_from));
  chain.pruned = true;
  return keep_from;
}

std::uint64_t gc_horizon(const std::vector<std::uint64_t>& snapshot_watermarks,
                         const std::vector<std::uint64_t>& active_snapshot_seqs,
                         std::uint64_t current_commit_seq) {
  std::uint64_t h = current_commit_seq;
  for (auto w : snapshot_watermarks) h = std::min(h, w);
  for (auto s : active_snapshot_seqs) h = std::min(h, s);
  return h;
}

RssSnapshot materialize(const RssSet& rss, const VersionStore& store) {
  RssSnapshot snap;
  snap.rss = rss;
  std::uint64_t watermark = std::numeric_limits<std::uint64_t>::max();
  for (const auto& [key, chain] : store) {
    const auto& v = chain.versions;
    auto it = std::find_if(v.rbegin(), v.rend(), [&](const StoredVersion& sv) {
      return rss.contains(sv.creator, sv.end_pos);
    });
    if (it == v.rend()) {
      throw RetentionViolation("no retained member version of key '" + key + "'");
    }
    snap.read_map.emplace_hint(snap.read_map.end(), key, SnapshotEntry{it->creator, it->value, it->commit_seq});
    watermark = std::min(watermark, it->commit_seq);
  }
  snap.watermark = snap.read_map.empty() ? 0 : watermark;
  return snap;
}

void SnapshotRegistry::publish(std::shared_ptr<const RssSnapshot> snap) {
  std::function<void(const RssSnapshot&)> hook;
  {
    std::lock_guard lock(mu_);
    current_ = snap;
    live_.push_back(snap);
    ++published_;
    hook = hook_;
  }
  if (hook) hook(*snap);
}

std::shared_ptr<const RssSnapshot> SnapshotRegistry::current() const {
  std::lock_guard lock(mu_);
  return current_;
}

std::optional<std::uint64_t> SnapshotRegistry::min_live_watermark() const {
  std::lock_guard lock(mu_);
  std::optional<std::uint64_t> out;
  std::erase_if(live_, [](const auto& w) { return w.expired(); });
  for (const auto& w : live_) {
    if (auto s = w.lock()) out = out ? std::min(*out, s->watermark) : s->watermark;
  }
  return out;
}

std::uint64_t SnapshotRegistry::published_count() const {
  std::lock_guard lock(mu_);
  return published_;
}

void SnapshotRegistry::on_publish(std::function<void(const RssSnapshot&)> hook) {
  std::lock_guard lock(mu_);
  hook_ = std::move(hook);
}

RssManager::RssManager(std::vector<Key> keys) : keys_(std::move(keys)) {
  for (const auto& k : keys_) {
    store_[k].versions.push_back({kInitTxn, 0, 0, static_cast<std::uint64_t>(keys_.size())});
  }
  basis_ = keys_.size();  // position of the initializer's commit
  frontier_ = basis_ + 1;
}

void RssManager::apply(const WalRecord& rec, SteadyClock::time_point appended) {
  if (rec.lsn <= last_lsn_) return;
  if (rec.lsn != last_lsn_ + 1) {
    throw WalFormatError("WAL gap: expected lsn " + std::to_string(last_lsn_ + 1) +
                         ", got " + std::to_string(rec.lsn));
  }
  last_lsn_ = rec.lsn;

  if (!held_.empty()) {
    held_.emplace_back(rec, appended);
    const auto* deps = std::get_if<RwDepsRec>(&rec.payload);
    const auto& commit = std::get<CommitRec>(held_.front().first.payload);
    if (deps == nullptr || deps->txn != commit.txn) return;
    auto held = std::move(held_);
    held_.clear();
    apply_now(held.front().first, held.front().second);
    apply_now(held.back().first, held.back().second);
    for (std::size_t i = 1; i + 1 < held.size(); ++i) apply_now(held[i].first, held[i].second);
    return;
  }
  if (const auto* c = std::get_if<CommitRec>(&rec.payload); c && c->deps > 0) {
    held_.emplace_back(rec, appended);
    return;
  }
  apply_now(rec, appended);
}

void RssManager::apply_now(const WalRecord& rec, SteadyClock::time_point appended) {
  const auto end_active = [&](TxnId t) {
    auto it = active_.find(raw(t));
    if (it == active_.end()) return;
    active_begins_.erase(active_begins_.find(it->second));
    active_.erase(it);
  };

  if (const auto* b = std::get_if<BeginRec>(&rec.payload)) {
    active_[raw(b->txn)] = b->seq;
    active_begins_.insert(b->seq);
    basis_ = std::max(basis_, b->seq);
  } else if (const auto* c = std::get_if<CommitRec>(&rec.payload)) {
    end_active(c->txn);
    for (const auto& [k, v] : c->writes) {
      auto& chain = store_[k];
      if (chain.versions.empty() && !chain.pruned) {
        chain.versions.push_back({kInitTxn, 0, 0, 0});
      }
      chain.versions.push_back({c->txn, v, c->seq, c->pos});
    }
    applied_commit_seq_ = std::max(applied_commit_seq_, c->seq);
    obscure_[c->pos] = Pending{c->txn, c->seq, appended, false};
    obscure_pos_[raw(c->txn)] = c->pos;
    basis_ = std::max(basis_, c->pos);
  } else if (const auto* a = std::get_if<AbortRec>(&rec.payload)) {
    end_active(a->txn);
    aborted_[raw(a->txn)] = a->pos;
    if (auto it = readers_of_.find(raw(a->txn)); it != readers_of_.end()) {
      dep_edges_ -= it->second.size();
      readers_of_.erase(it);
    }
    basis_ = std::max(basis_, a->pos);
  } else if (const auto* d = std::get_if<RwDepsRec>(&rec.payload)) {
    auto pos = obscure_pos_.find(raw(d->txn));
    if (pos == obscure_pos_.end()) return;
    auto& pending = obscure_.at(pos->second);
    for (auto w : d->writers) {
      if (active_.contains(raw(w)) || obscure_pos_.contains(raw(w))) {
        readers_of_[raw(w)].push_back(raw(d->txn));
        ++dep_edges_;
      } else if (!aborted_.contains(raw(w))) {
        pending.hits_clear = true;
      }
    }
  }
}

void RssManager::advance_frontier() {
  frontier_ = active_begins_.empty() ? basis_ + 1 : *active_begins_.begin();
  while (!obscure_.empty() && obscure_.begin()->first < frontier_) {
    const auto p = obscure_.begin()->second;
    obscure_.erase(obscure_.begin());
    obscure_pos_.erase(raw(p.txn));
    clear_commit_seq_ = std::max(clear_commit_seq_, p.commit_seq);
    if (auto it = readers_of_.find(raw(p.txn)); it != readers_of_.end()) {
      for (auto r : it->second) {
        if (auto rp = obscure_pos_.find(r); rp != obscure_pos_.end()) {
          obscure_.at(rp->second).hits_clear = true;
        }
      }
      dep_edges_ -= it->second.size();
      readers_of_.erase(it);
    }
  }
  std::erase_if(aborted_, [&](const auto& kv) { return kv.second < frontier_; });
}

double RssManager::lag_ms(SteadyClock::time_point now) const {
  std::optional<SteadyClock::time_point> oldest;
  for (const auto& [_, p] : obscure_) {
    if (!p.hits_clear) {
      oldest = p.appended;
      break;
    }
  }
  if (!held_.empty() && (!oldest || held_.front().second < *oldest)) {
    oldest = held_.front().second;
  }
  if (!oldest) return 0;
  return std::chrono::duration<double, std::milli>(now - *oldest).count();
}

RssSnapshot RssManager::construct(SteadyClock::time_point now) {
  advance_frontier();
  RssSet rss{++epoch_, basis_, frontier_, {}};
  for (const auto& [_, p] : obscure_) {
    if (p.hits_clear) rss.extra.insert(p.txn);
  }
  auto snap = materialize(rss, store_);
  // Versions newer than a member's belong to non-clear transactions.
  snap.watermark = clear_commit_seq_;
  snap.published = now;
  snap.freshness_lag_ms = lag_ms(now);
  return snap;
}

RssSnapshot RssManager::latest_view(SteadyClock::time_point now) {
  advance_frontier();
  RssSet rss{++epoch_, basis_, std::numeric_limits<std::uint64_t>::max(), {}};
  auto snap = materialize(rss, store_);
  snap.watermark = applied_commit_seq_;
  snap.published = now;
  if (!held_.empty()) {
    snap.freshness_lag_ms =
        std::chrono::duration<double, std::milli>(now - held_.front().second).count();
  }
  return snap;
}

std::size_t RssManager::gc(std::uint64_t live_watermark) {
  const auto horizon = std::min(live_watermark, clear_commit_seq_);
  std::size_t n = 0;
  for (auto& [_, chain] : store_) n += prune_chain(chain, horizon);
  return n;
}

RssService::RssService(std::shared_ptr<WalLog> log,
                       std::shared_ptr<SnapshotRegistry> registry,
                       RssServiceConfig cfg,
                       std::function<void(std::uint64_t)> feedback)
    : log_(std::move(log)),
      registry_(std::move(registry)),
      cfg_(std::move(cfg)),
      feedback_(std::move(feedback)),
      manager_(cfg_.keys) {
  registry_->publish(std::make_shared<const RssSnapshot>(manager_.construct()));
}

RssService::~RssService() { stop(); }

void RssService::start() {
  if (thread_.joinable()) return;
  {
    std::lock_guard lock(wake_mu_);
    stop_ = false;
  }
  thread_ = std::thread([this] { loop(); });
}

void RssService::stop() {
  {
    std::lock_guard lock(wake_mu_);
    stop_ = true;
  }
  wake_.notify_all();
  if (thread_.joinable()) thread_.join();
}

std::shared_ptr<const RssSnapshot> RssService::construct_now() {
  std::lock_guard lock(build_mu_);
  for (const auto& e : log_->read_from(manager_.applied_lsn() + 1)) {
    manager_.apply(e.record, e.appended);
  }
  auto snap = std::make_shared<const RssSnapshot>(manager_.construct());
  registry_->publish(snap);
  const auto live = registry_->min_live_watermark().value_or(snap->watermark);
  manager_.gc(live);
  if (cfg_.truncate_log) log_->truncate_before(manager_.applied_lsn() + 1);
  if (feedback_) feedback_(live);
  return snap;
}

std::uint64_t RssService::epochs() const {
  std::lock_guard lock(build_mu_);
  return manager_.epoch();
}

void RssService::loop() {
  std::unique_lock lock(wake_mu_);
  while (!stop_) {
    wake_.wait_for(lock, cfg_.cadence, [&] { return stop_; });
    if (stop_) break;
    lock.unlock();
    construct_now();
    lock.lock();
  }
}

}  // namespace htapcc
