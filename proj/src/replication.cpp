#include "htapcc/replication.hpp"

#include <algorithm>

namespace htapcc {

Replica::Replica(ReplicaConfig cfg)
    : cfg_(std::move(cfg)),
      registry_(std::make_shared<SnapshotRegistry>()),
      manager_(cfg_.keys) {
  auto snap = cfg_.mode == ReplicaMode::Rss ? manager_.construct() : manager_.latest_view();
  registry_->publish(std::make_shared<const RssSnapshot>(std::move(snap)));
}

Replica::~Replica() { stop(); }

void Replica::deliver(const std::vector<WalLog::Entry>& entries) {
  bool construct = false;
  {
    std::lock_guard lock(mu_);
    for (const auto& e : entries) {
      const auto lsn = e.record.lsn;
      if (lsn <= manager_.applied_lsn() || ahead_.contains(lsn)) {
        ++stats_.duplicates;
        continue;
      }
      if (lsn != manager_.applied_lsn() + 1) ++stats_.reordered;
      ahead_.emplace(lsn, std::make_pair(e.record, e.appended));
    }
    apply_ready();
    construct = cfg_.construct_each_batch && manager_.applied_lsn() != constructed_at_lsn_;
  }
  if (construct) construct_now();
}

void Replica::deliver(const WalRecord& rec) {
  deliver(std::vector<WalLog::Entry>{{rec, SteadyClock::now()}});
}

void Replica::apply_ready() {
  while (!ahead_.empty() && ahead_.begin()->first == manager_.applied_lsn() + 1) {
    const auto& [rec, appended] = ahead_.begin()->second;
    manager_.apply(rec, appended);
    ++stats_.applied;
    ahead_.erase(ahead_.begin());
  }
}

std::uint64_t Replica::applied_lsn() const {
  std::lock_guard lock(mu_);
  return manager_.applied_lsn();
}

std::shared_ptr<const RssSnapshot> Replica::construct_now() {
  std::lock_guard lock(mu_);
  auto snap = std::make_shared<const RssSnapshot>(
      cfg_.mode == ReplicaMode::Rss ? manager_.construct() : manager_.latest_view());
  registry_->publish(snap);
  constructed_at_lsn_ = manager_.applied_lsn();
  const auto live = registry_->min_live_watermark().value_or(snap->watermark);
  manager_.gc(live);
  feedback_ = std::max(feedback_, live);
  ++stats_.constructions;
  stats_.freshness_lag_ms_sum += snap->freshness_lag_ms;
  return snap;
}

bool Replica::construct_if_changed() {
  {
    std::lock_guard lock(mu_);
    if (manager_.applied_lsn() == constructed_at_lsn_) return false;
  }
  construct_now();
  return true;
}

FeedbackMsg Replica::feedback() const {
  std::lock_guard lock(mu_);
  return {feedback_};
}

void Replica::start() {
  if (thread_.joinable()) return;
  {
    std::lock_guard lock(wake_mu_);
    stop_ = false;
  }
  thread_ = std::thread([this] { loop(); });
}

void Replica::stop() {
  {
    std::lock_guard lock(wake_mu_);
    stop_ = true;
  }
  wake_.notify_all();
  if (thread_.joinable()) thread_.join();
}

void Replica::loop() {
  std::unique_lock lock(wake_mu_);
  while (!stop_) {
    wake_.wait_for(lock, cfg_.cadence, [&] { return stop_; });
    if (stop_) break;
    lock.unlock();
    construct_now();
    lock.lock();
  }
}

ReplicaSession Replica::begin() {
  ReplicaSession s;
  s.id_ = TxnId{next_txn_.fetch_add(1)};
  s.snap_ = registry_->current();
  s.epoch_ = s.snap_->rss.epoch;
  session_count_.fetch_add(1, std::memory_order_relaxed);
  return s;
}

ReadResult Replica::read(ReplicaSession& s, const Key& key) const {
  if (s.closed_) throw SessionClosed(to_string(s.id_) + " has ended");
  auto it = s.snap_->read_map.find(key);
  if (it == s.snap_->read_map.end()) throw UnknownKey("unknown key '" + key + "'");
  if (cfg_.record_sessions) {
    s.reads_.push_back(Operation::read(s.id_, key, it->second.creator, it->second.value));
  }
  read_count_.fetch_add(1, std::memory_order_relaxed);
  return {it->second.value, {key, it->second.creator}};
}

void Replica::commit(ReplicaSession& s) {
  if (s.closed_) return;
  s.closed_ = true;
  s.snap_.reset();
  if (!cfg_.record_sessions) return;
  std::lock_guard lock(sessions_mu_);
  if (sessions_.size() < cfg_.session_cap) {
    sessions_.push_back({s.id_, s.epoch_, std::move(s.reads_)});
  }
}

std::vector<ReplicaTxnLog> Replica::sessions() const {
  std::lock_guard lock(sessions_mu_);
  return sessions_;
}

ReplicaStats Replica::stats() const {
  std::lock_guard lock(mu_);
  auto s = stats_;
  s.sessions = session_count_.load();
  s.reads = read_count_.load();
  return s;
}

LogShipper::LogShipper(std::shared_ptr<WalLog> log, Replica& replica,
                       TransportConfig cfg,
                       std::function<void(const FeedbackMsg&)> on_feedback)
    : log_(std::move(log)),
      replica_(replica),
      cfg_(cfg),
      on_feedback_(std::move(on_feedback)),
      rng_(cfg.seed) {
  cursor_ = replica_.applied_lsn() + 1;
}

LogShipper::~LogShipper() { stop(); }

void LogShipper::start() {
  if (thread_.joinable()) return;
  stop_ = false;
  thread_ = std::thread([this] { loop(); });
}

void LogShipper::stop() {
  stop_ = true;
  if (thread_.joinable()) thread_.join();
}

void LogShipper::disconnect() {
  std::lock_guard lock(mu_);
  reconnect_ = true;
}

std::size_t LogShipper::ship(std::vector<WalLog::Entry> entries) {
  std::lock_guard lock(mu_);
  if (reconnect_) {
    reconnect_ = false;
    cursor_ = replica_.applied_lsn() + 1;
    ++stats_.reconnects;
    return 0;
  }
  if (entries.empty()) return 0;
  const auto next = entries.back().record.lsn + 1;

  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<WalLog::Entry> wire;
  wire.reserve(entries.size());
  for (auto& e : entries) {
    if (cfg_.encode_on_wire) e.record = decode(encode(e.record));
    wire.push_back(e);
    if (cfg_.duplicate_rate > 0 && coin(rng_) < cfg_.duplicate_rate) {
      wire.push_back(e);
      ++stats_.duplicates;
    }
  }
  if (cfg_.reorder_rate > 0) {
    for (std::size_t i = 0; i + 1 < wire.size(); ++i) {
      if (coin(rng_) < cfg_.reorder_rate) std::swap(wire[i], wire[i + 1]);
    }
  }
  replica_.deliver(wire);
  stats_.shipped += entries.size();
  cursor_ = next;
  return entries.size();
}

void LogShipper::send_feedback() {
  auto msg = replica_.feedback();
  if (cfg_.encode_on_wire) msg = decode_feedback(encode(msg));
  if (on_feedback_) on_feedback_(msg);
  log_->truncate_before(replica_.applied_lsn() + 1);
  std::lock_guard lock(mu_);
  ++stats_.feedback_msgs;
}

std::size_t LogShipper::pump() {
  std::uint64_t from;
  {
    std::lock_guard lock(mu_);
    from = cursor_;
  }
  auto entries = log_->read_from(from, cfg_.batch_limit);
  const auto now = SteadyClock::now();
  auto due = std::find_if(entries.begin(), entries.end(), [&](const WalLog::Entry& e) {
    return e.appended + cfg_.latency > now;
  });
  entries.erase(due, entries.end());
  const auto n = ship(std::move(entries));
  send_feedback();
  return n;
}

TransportStats LogShipper::stats() const {
  std::lock_guard lock(mu_);
  return stats_;
}

void LogShipper::loop() {
  bool dirty = false;
  while (!stop_) {
    std::uint64_t from;
    {
      std::lock_guard lock(mu_);
      from = cursor_;
    }
    auto entries = log_->read_from(from, cfg_.batch_limit);
    if (entries.empty()) {
      if (cfg_.construct_on_quiescence && dirty) {
        replica_.construct_if_changed();
        send_feedback();
        dirty = false;
      }
      ship({});
      log_->wait_for(from, std::chrono::milliseconds(5));
      continue;
    }
    const auto due_at = entries.front().appended + cfg_.latency;
    if (due_at > SteadyClock::now()) {
      std::this_thread::sleep_until(std::min(due_at, SteadyClock::now() +
                                                         std::chrono::milliseconds(20)));
      continue;
    }
    const auto now = SteadyClock::now();
    auto due = std::find_if(entries.begin(), entries.end(), [&](const WalLog::Entry& e) {
      return e.appended + cfg_.latency > now;
    });
    entries.erase(due, entries.end());
    if (ship(std::move(entries)) > 0) {
      dirty = true;
      send_feedback();
    }
  }
}

}  // namespace htapcc
