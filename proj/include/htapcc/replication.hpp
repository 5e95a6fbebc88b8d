// Simulated log-shipping read replica: an in-process transport with injectable
// latency and faults, and a replica that rebuilds transaction state from the
// WAL and serves read-only sessions from its published snapshots.
#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <thread>
#include <vector>

#include "htapcc/engine.hpp"
#include "htapcc/rss.hpp"
#include "htapcc/wal.hpp"

namespace htapcc {

enum class ReplicaMode : std::uint8_t {
  Rss,     // serve read-safe snapshots
  Latest,  // serve every applied commit (plain snapshot reads)
};

struct ReplicaConfig {
  std::vector<Key> keys;
  ReplicaMode mode = ReplicaMode::Rss;
  std::chrono::milliseconds cadence{100};
  bool construct_each_batch = false;
  bool record_sessions = false;
  std::size_t session_cap = 100000;
};

// Replica transaction ids live above this offset so they never collide with
// primary ids when the two histories are merged for auditing.
inline constexpr std::uint64_t kReplicaTxnBase = std::uint64_t{1} << 40;

class ReplicaSession {
 public:
  TxnId id() const noexcept { return id_; }
  std::uint64_t epoch() const noexcept { return epoch_; }
  // Valid until commit.
  const RssSnapshot& snapshot() const { return *snap_; }

 private:
  friend class Replica;
  TxnId id_{};
  std::uint64_t epoch_ = 0;
  std::shared_ptr<const RssSnapshot> snap_;
  std::vector<Operation> reads_;
  bool closed_ = false;
};

struct ReplicaTxnLog {
  TxnId txn{};
  std::uint64_t epoch = 0;
  std::vector<Operation> reads;
};

struct ReplicaStats {
  std::uint64_t applied = 0;
  std::uint64_t duplicates = 0;
  std::uint64_t reordered = 0;  // records buffered ahead of a gap
  std::uint64_t constructions = 0;
  std::uint64_t sessions = 0;
  std::uint64_t reads = 0;
  std::uint64_t waits = 0;
  std::uint64_t aborts = 0;
  double freshness_lag_ms_sum = 0;
};

class Replica {
 public:
  explicit Replica(ReplicaConfig cfg);
  ~Replica();
  Replica(const Replica&) = delete;
  Replica& operator=(const Replica&) = delete;

  // Transport delivery. Duplicates are dropped by lsn; records ahead of a gap
  // are buffered until the gap is filled.
  void deliver(const std::vector<WalLog::Entry>& entries);
  void deliver(const WalRecord& rec);
  std::uint64_t applied_lsn() const;

  // Construction invoker: timer thread, or on demand.
  void start();
  void stop();
  std::shared_ptr<const RssSnapshot> construct_now();
  // Constructs when something was applied since the last construction.
  bool construct_if_changed();

  FeedbackMsg feedback() const;

  // Read-only sessions; never block and never abort.
  ReplicaSession begin();
  ReadResult read(ReplicaSession& s, const Key& key) const;
  void commit(ReplicaSession& s);

  std::shared_ptr<const RssSnapshot> current() const { return registry_->current(); }
  SnapshotRegistry& registry() { return *registry_; }
  std::vector<ReplicaTxnLog> sessions() const;
  ReplicaStats stats() const;

 private:
  void apply_ready();
  void loop();

  ReplicaConfig cfg_;
  std::shared_ptr<SnapshotRegistry> registry_;

  mutable std::mutex mu_;
  RssManager manager_;
  std::map<std::uint64_t, std::pair<WalRecord, SteadyClock::time_point>> ahead_;
  std::uint64_t constructed_at_lsn_ = 0;
  std::uint64_t feedback_ = 0;
  ReplicaStats stats_;

  std::atomic<std::uint64_t> next_txn_{kReplicaTxnBase + 1};
  mutable std::mutex sessions_mu_;
  std::vector<ReplicaTxnLog> sessions_;
  std::atomic<std::uint64_t> session_count_{0};
  mutable std::atomic<std::uint64_t> read_count_{0};

  std::mutex wake_mu_;
  std::condition_variable wake_;
  bool stop_ = false;
  std::thread thread_;
};

struct TransportConfig {
  std::chrono::milliseconds latency{0};
  double duplicate_rate = 0;  // probability a record is delivered twice
  double reorder_rate = 0;    // probability adjacent records swap
  std::size_t batch_limit = 512;
  std::uint64_t seed = 1;
  bool construct_on_quiescence = false;
  bool encode_on_wire = true;  // round-trip every record through JSON
};

struct TransportStats {
  std::uint64_t shipped = 0;
  std::uint64_t duplicates = 0;
  std::uint64_t reconnects = 0;
  std::uint64_t feedback_msgs = 0;
};

// Ships WAL records from the primary's log to a replica and carries feedback
// back. At-least-once and in order from the replica's point of view.
class LogShipper {
 public:
  LogShipper(std::shared_ptr<WalLog> log, Replica& replica, TransportConfig cfg,
             std::function<void(const FeedbackMsg&)> on_feedback = {});
  ~LogShipper();
  LogShipper(const LogShipper&) = delete;
  LogShipper& operator=(const LogShipper&) = delete;

  void start();
  void stop();
  // Drops the connection; shipping resumes from the replica's applied lsn.
  void disconnect();
  // Ships up to batch_limit due records synchronously. Returns records shipped.
  std::size_t pump();

  TransportStats stats() const;

 private:
  std::size_t ship(std::vector<WalLog::Entry> entries);
  void send_feedback();
  void loop();

  std::shared_ptr<WalLog> log_;
  Replica& replica_;
  TransportConfig cfg_;
  std::function<void(const FeedbackMsg&)> on_feedback_;
  std::mt19937_64 rng_;

  mutable std::mutex mu_;
  std::uint64_t cursor_ = 1;
  bool reconnect_ = false;
  TransportStats stats_;

  std::atomic<bool> stop_{false};
  std::thread thread_;
};

}  // namespace htapcc
