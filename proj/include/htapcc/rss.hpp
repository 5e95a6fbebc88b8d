// Read-safe snapshot construction: transaction classification, the member
// set, its materialized read map, publication and the incremental builder fed
// by the WAL.
#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <thread>
#include <unordered_map>
#include <vector>

#include "htapcc/history.hpp"
#include "htapcc/wal.hpp"

namespace htapcc {

using SteadyClock = std::chrono::steady_clock;

struct TxnClass {
  std::set<TxnId> active;  // begun, not ended
  std::set<TxnId> done;    // committed within the prefix
  std::set<TxnId> clear;   // done, and ended before every active txn began
  // Committed transactions ending before this position are in `clear`.
  std::uint64_t clear_frontier = 0;
};

// Aborted transactions are neither done nor active.
TxnClass classify(const std::map<TxnId, TxnRecord>& records, Prefix p);

// Outgoing rw-dependencies per committed reader, reader -> writers.
class DepGraphShard {
 public:
  // Records the reader's complete dependency list.
  void add(TxnId reader, const std::vector<TxnId>& writers);
  bool known(TxnId reader) const { return out_.contains(reader); }
  const std::set<TxnId>& out(TxnId reader) const;
  void erase(TxnId reader) { out_.erase(reader); }
  std::size_t edge_count() const;
  const std::map<TxnId, std::set<TxnId>>& sources() const noexcept { return out_; }

 private:
  std::map<TxnId, std::set<TxnId>> out_;
};

// Concurrent rw-dependencies between transactions committed within p.
DepGraphShard deps_from_history(const History& h, Prefix p);

struct RssSet {
  std::uint64_t epoch = 0;
  std::uint64_t basis_prefix = 0;
  // Committed transactions whose Commit precedes this position are members.
  std::uint64_t clear_frontier = 0;
  // Members outside that prefix.
  std::set<TxnId> extra;

  bool contains(TxnId t, std::uint64_t end_pos) const {
    return end_pos < clear_frontier || extra.contains(t);
  }
  std::set<TxnId> members(const std::map<TxnId, TxnRecord>& records) const;

  bool operator==(const RssSet&) const = default;
};

// nullopt when a committed non-clear transaction has no dependency data yet.
std::optional<RssSet> construct_rss(const TxnClass& cls,
                                    const std::map<TxnId, TxnRecord>& records,
                                    const DepGraphShard& deps, Prefix p,
                                    std::uint64_t epoch);

// classify + deps_from_history + construct_rss on a recorded history.
RssSet construct_rss_at(const History& h, Prefix p, std::uint64_t epoch = 1);

// The record stream a primary would have emitted for `h`, with each reader's
// concurrent rw-dependencies attached to its commit.
std::vector<WalPayload> wal_from_history(const History& h);

struct StoredVersion {
  TxnId creator{};
  Value value = 0;
  std::uint64_t commit_seq = 0;
  std::uint64_t end_pos = 0;  // history position of the creator's Commit
};

struct VersionChain {
  std::vector<StoredVersion> versions;  // ascending commit_seq
  bool pruned = false;
};

using VersionStore = std::map<Key, VersionChain>;

VersionStore version_store_from(const History& h, Prefix p);

// Drops every version that has a newer version with commit_seq <= horizon.
std::size_t prune_chain(VersionChain& chain, std::uint64_t horizon);

std::uint64_t gc_horizon(const std::vector<std::uint64_t>& snapshot_watermarks,
                         const std::vector<std::uint64_t>& active_snapshot_seqs,
                         std::uint64_t current_commit_seq);

class RetentionViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct SnapshotEntry {
  TxnId creator{};
  Value value = 0;
  std::uint64_t commit_seq = 0;

  bool operator==(const SnapshotEntry&) const = default;
};

struct RssSnapshot {
  RssSet rss;
  std::map<Key, SnapshotEntry> read_map;
  // GC horizon that keeps every version in read_map.
  std::uint64_t watermark = 0;
  SteadyClock::time_point published{};
  // Age of the oldest applied commit left out of this snapshot.
  double freshness_lag_ms = 0;
};

// Newest member version of every key. Throws RetentionViolation if a chain
// was pruned past the version the set needs.
RssSnapshot materialize(const RssSet& rss, const VersionStore& store);

// Publication point for snapshots. Old snapshots stay alive while sessions
// hold them; their watermarks pin garbage collection.
class SnapshotRegistry {
 public:
  void publish(std::shared_ptr<const RssSnapshot> snap);
  std::shared_ptr<const RssSnapshot> current() const;
  // Minimum watermark over every snapshot still referenced.
  std::optional<std::uint64_t> min_live_watermark() const;
  std::uint64_t published_count() const;
  void on_publish(std::function<void(const RssSnapshot&)> hook);

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const RssSnapshot> current_;
  mutable std::vector<std::weak_ptr<const RssSnapshot>> live_;
  std::uint64_t published_ = 0;
  std::function<void(const RssSnapshot&)> hook_;
};

// Incremental builder state fed by WAL records in lsn order.
class RssManager {
 public:
  explicit RssManager(std::vector<Key> keys);

  // Duplicates (lsn already seen) are ignored; a gap throws WalFormatError.
  // A commit announcing dependencies is held back until its deps record
  // arrives, so construction only ever sees a consistent prefix.
  void apply(const WalRecord& rec,
             SteadyClock::time_point appended = SteadyClock::now());

  RssSnapshot construct(SteadyClock::time_point now = SteadyClock::now());
  // Every applied commit visible; used when serving plain snapshot reads.
  RssSnapshot latest_view(SteadyClock::time_point now = SteadyClock::now());

  // Prunes the version store below min(live_watermark, clear horizon).
  std::size_t gc(std::uint64_t live_watermark);

  std::uint64_t applied_lsn() const noexcept { return last_lsn_; }
  std::uint64_t basis_prefix() const noexcept { return basis_; }
  std::uint64_t epoch() const noexcept { return epoch_; }
  std::size_t pending_txns() const noexcept { return obscure_.size(); }
  std::size_t active_txns() const noexcept { return active_.size(); }
  std::size_t dep_edges() const noexcept { return dep_edges_; }
  const VersionStore& store() const noexcept { return store_; }

 private:
  struct Pending {
    TxnId txn{};
    std::uint64_t commit_seq = 0;
    SteadyClock::time_point appended{};
    bool hits_clear = false;
  };

  void apply_now(const WalRecord& rec, SteadyClock::time_point appended);
  void advance_frontier();
  double lag_ms(SteadyClock::time_point now) const;

  std::vector<Key> keys_;
  VersionStore store_;
  std::uint64_t last_lsn_ = 0;
  std::uint64_t basis_ = 0;
  std::uint64_t frontier_ = 0;
  std::uint64_t clear_commit_seq_ = 0;
  std::uint64_t applied_commit_seq_ = 0;
  std::uint64_t epoch_ = 0;
  std::size_t dep_edges_ = 0;

  std::unordered_map<std::uint64_t, std::uint64_t> active_;  // txn -> begin pos
  std::multiset<std::uint64_t> active_begins_;
  std::map<std::uint64_t, Pending> obscure_;  // commit pos -> pending txn
  std::unordered_map<std::uint64_t, std::uint64_t> obscure_pos_;
  std::map<std::uint64_t, std::uint64_t> aborted_;  // txn -> abort pos
  // writer -> committed non-clear readers with an rw-dependency on it
  std::unordered_map<std::uint64_t, std::vector<std::uint64_t>> readers_of_;

  std::vector<std::pair<WalRecord, SteadyClock::time_point>> held_;
};

struct RssServiceConfig {
  std::vector<Key> keys;
  std::chrono::milliseconds cadence{100};
  bool truncate_log = true;
};

// Single-node builder: tails the primary's WAL, constructs on a timer or on
// demand, publishes and feeds the GC watermark back.
class RssService {
 public:
  RssService(std::shared_ptr<WalLog> log, std::shared_ptr<SnapshotRegistry> registry,
             RssServiceConfig cfg,
             std::function<void(std::uint64_t)> feedback = {});
  ~RssService();
  RssService(const RssService&) = delete;
  RssService& operator=(const RssService&) = delete;

  void start();
  void stop();
  // Drains the log, constructs and publishes synchronously.
  std::shared_ptr<const RssSnapshot> construct_now();

  std::uint64_t epochs() const;

 private:
  void loop();

  std::shared_ptr<WalLog> log_;
  std::shared_ptr<SnapshotRegistry> registry_;
  RssServiceConfig cfg_;
  std::function<void(std::uint64_t)> feedback_;
  mutable std::mutex build_mu_;
  RssManager manager_;
  std::mutex wake_mu_;
  std::condition_variable wake_;
  bool stop_ = false;
  std::thread thread_;
};

}  // namespace htapcc
