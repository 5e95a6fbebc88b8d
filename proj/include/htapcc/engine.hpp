// Multiversion storage engine with snapshot isolation and serializable
// snapshot isolation, deferrable read-only sessions, and read-only sessions
// served from published read-safe snapshots.
#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "htapcc/history.hpp"
#include "htapcc/rss.hpp"
#include "htapcc/wal.hpp"

namespace htapcc {

enum class IsolationMode : std::uint8_t { SI, SSI };

struct SessionFlags {
  bool read_only = false;
  bool deferrable = false;  // wait for a safe snapshot before the first read
  bool use_rss = false;     // read from the published snapshot; implies read_only
  bool unrecorded = false;  // read-only sessions only: left out of the exported history
};

struct EngineConfig {
  IsolationMode mode = IsolationMode::SSI;
  std::vector<Key> keys;
  std::chrono::milliseconds deferrable_timeout{10000};
  std::shared_ptr<WalLog> wal;                  // events are appended when set
  std::shared_ptr<SnapshotRegistry> snapshots;  // required by use_rss sessions
  bool record_history = true;
  std::size_t history_cap = 0;  // stop recording after this many ops; 0 = unbounded
  bool audit_reads = false;     // check every read against unpruned shadow chains
  std::size_t gc_interval_commits = 0;  // run gc() every N commits; 0 = manual
  bool emit_dependencies = true;        // attach rw-dependency records to commits
};

enum class AbortReason : std::uint8_t {
  None,
  WriteConflict,
  SerializationFailure,
  DeferrableTimeout,
  User,
  Shutdown,
};

std::string to_string(AbortReason r);

class EngineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The session was aborted by the engine; it is no longer usable.
class TxnAborted : public EngineError {
 public:
  TxnAborted(TxnId t, AbortReason reason);
  AbortReason reason() const noexcept { return reason_; }

 private:
  AbortReason reason_;
};

class UnknownKey : public EngineError {
 public:
  using EngineError::EngineError;
};

class ReadOnlyViolation : public EngineError {
 public:
  using EngineError::EngineError;
};

class SessionClosed : public EngineError {
 public:
  using EngineError::EngineError;
};

class EngineShutDown : public EngineError {
 public:
  using EngineError::EngineError;
};

class AuditFailure : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct ReadResult {
  Value value = 0;
  VersionId version;
};

struct CommitOutcome {
  bool committed = false;
  std::uint64_t commit_seq = 0;
  AbortReason reason = AbortReason::None;
};

struct EngineStats {
  std::uint64_t commits = 0;
  std::uint64_t aborts = 0;
  std::uint64_t write_conflicts = 0;
  std::uint64_t serialization_failures = 0;
  std::uint64_t deferrable_waits = 0;   // sessions that had to wait at all
  std::uint64_t deferrable_retries = 0; // unsafe snapshots discarded
  std::uint64_t deferrable_timeouts = 0;
  double deferrable_wait_ms = 0;
  std::uint64_t prot_commits = 0;
  std::uint64_t prot_waits = 0;   // blocking steps taken by snapshot sessions
  std::uint64_t prot_aborts = 0;  // engine-initiated aborts of snapshot sessions
  std::uint64_t reclaimed_versions = 0;
};

struct GcReport {
  std::uint64_t horizon = 0;
  std::size_t reclaimed = 0;
  std::size_t txns_dropped = 0;
};

namespace detail {
struct SessionState;
}

// Handle for one transaction. Not thread-safe; use from one thread at a time.
class Session {
 public:
  Session() = default;
  TxnId id() const;
  const SessionFlags& flags() const;
  // Commit sequence number the snapshot was taken at; for snapshot sessions,
  // the epoch of the bound snapshot.
  std::uint64_t snapshot() const;
  bool valid() const noexcept { return state_ != nullptr; }

 private:
  friend class Engine;
  explicit Session(std::shared_ptr<detail::SessionState> s) : state_(std::move(s)) {}
  std::shared_ptr<detail::SessionState> state_;
};

class Engine {
 public:
  explicit Engine(EngineConfig cfg);
  ~Engine();
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  Session begin(SessionFlags flags = {});
  ReadResult read(Session& s, const Key& key);
  VersionId write(Session& s, const Key& key, Value value);
  CommitOutcome commit(Session& s);
  void abort(Session& s);

  // For deferrable sessions: true once the first read would not block.
  // Performs the same safety evaluation as read() without waiting.
  bool try_safe_snapshot(Session& s);

  GcReport gc();
  // Oldest commit sequence still referenced by a remote snapshot.
  void apply_feedback(std::uint64_t watermark);
  void shutdown();

  // Prefix-consistent copy of the recorded history.
  History export_history() const;
  // Snapshot sessions that committed, with the epoch they were bound to.
  std::map<TxnId, std::uint64_t> snapshot_sessions() const;
  bool history_truncated() const;

  EngineStats stats() const;
  std::uint64_t last_commit_seq() const;
  std::size_t version_count() const;
  const EngineConfig& config() const noexcept { return cfg_; }

 private:
  struct Version {
    TxnId creator{};
    Value value = 0;
    std::uint64_t commit_seq = 0;
    std::uint64_t creator_begin = 0;
  };
  struct Txn;

  Txn& live(const Session& s);
  void record(Operation op, bool keep = true);
  std::uint64_t next_pos();
  void abort_locked(Txn& t, AbortReason reason);
  bool add_conflict(Txn& reader, Txn& writer);
  enum class Safety : std::uint8_t { Pending, Unsafe, Safe };
  Safety evaluate_safety(const Txn& t) const;
  void retake_snapshot(Txn& t);
  void wait_until_safe(std::unique_lock<std::mutex>& lock, Txn& t);
  static const Version* visible(const std::vector<Version>& chain, std::uint64_t snap);
  GcReport gc_locked();
  void emit(std::vector<WalPayload> batch);

  EngineConfig cfg_;
  std::set<Key> key_set_;

  mutable std::mutex mu_;
  std::condition_variable ended_;
  bool shut_down_ = false;

  std::unordered_map<Key, std::vector<Version>> chains_;
  std::unordered_map<Key, std::vector<Version>> shadow_;
  std::unordered_map<std::uint64_t, std::unique_ptr<Txn>> txns_;
  std::unordered_map<Key, std::vector<std::uint64_t>> readers_;
  std::unordered_map<Key, std::uint64_t> pending_writer_;
  std::multiset<std::uint64_t> snapshots_;  // snapshot seqs of tracked active txns
  std::uint64_t commit_counter_ = 0;
  std::uint64_t next_txn_ = 1;
  std::uint64_t pos_ = 0;
  std::optional<std::uint64_t> feedback_;

  std::vector<Operation> ops_;
  std::atomic<bool> truncated_{false};
  std::map<TxnId, std::uint64_t> prot_epochs_;
  EngineStats stats_;
};

}  // namespace htapcc
