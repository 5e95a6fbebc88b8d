// WAL records shipped from the primary: begin/commit/abort events and the
// outgoing rw-dependencies of each committed reader. JSON-lines on the wire.
#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <iosfwd>
#include <mutex>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "htapcc/history.hpp"

namespace htapcc {

struct BeginRec {
  TxnId txn{};
  std::uint64_t seq = 0;  // history position of the Begin

  bool operator==(const BeginRec&) const = default;
};

struct CommitRec {
  TxnId txn{};
  std::uint64_t seq = 0;  // commit sequence number (version order)
  std::uint64_t pos = 0;  // history position of the Commit
  std::vector<std::pair<Key, Value>> writes;  // sorted by key
  std::uint32_t deps = 0;  // writers listed in the RwDeps record that follows

  bool operator==(const CommitRec&) const = default;
};

struct AbortRec {
  TxnId txn{};
  std::uint64_t pos = 0;

  bool operator==(const AbortRec&) const = default;
};

// Outgoing rw-dependencies of `txn` known at its commit, as writer ids.
struct RwDepsRec {
  TxnId txn{};
  std::vector<TxnId> writers;

  bool operator==(const RwDepsRec&) const = default;
};

using WalPayload = std::variant<BeginRec, CommitRec, AbortRec, RwDepsRec>;

struct WalRecord {
  std::uint64_t lsn = 0;
  WalPayload payload;

  bool operator==(const WalRecord&) const = default;
};

// Replica -> primary control message.
struct FeedbackMsg {
  std::uint64_t watermark = 0;

  bool operator==(const FeedbackMsg&) const = default;
};

class WalFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string encode(const WalRecord& rec);  // one line, no trailing newline
WalRecord decode(std::string_view line);
std::string encode(const FeedbackMsg& msg);
FeedbackMsg decode_feedback(std::string_view line);

// Append-only record log on the primary. Batches are appended atomically and
// stamped with their append time so a shipper can inject latency.
class WalLog {
 public:
  using Clock = std::chrono::steady_clock;

  struct Entry {
    WalRecord record;
    Clock::time_point appended;
  };

  // Assigns consecutive lsns starting at last_lsn() + 1.
  void append(std::vector<WalPayload> batch);

  // Entries with lsn >= `from`, at most `max` of them. Batches are never split.
  std::vector<Entry> read_from(std::uint64_t from,
                               std::size_t max = static_cast<std::size_t>(-1)) const;

  // Blocks until an entry with lsn >= `from` exists or the timeout expires.
  bool wait_for(std::uint64_t from, std::chrono::milliseconds timeout) const;

  std::uint64_t last_lsn() const;
  // Drops entries with lsn < `lsn`; their records can no longer be re-read.
  void truncate_before(std::uint64_t lsn);
  std::uint64_t first_retained_lsn() const;

  void dump(std::ostream& out) const;  // .waljl
  static std::vector<WalRecord> load(std::istream& in);

 private:
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::deque<Entry> entries_;
  std::deque<std::uint32_t> batch_left_;  // records remaining in the batch, per entry
  std::uint64_t next_lsn_ = 1;
};

}  // namespace htapcc
