// Randomized schedule testing: single-threaded interleavings of engine
// sessions with snapshot construction and GC steps, oracle checks on the
// resulting history, and a schedule shrinker for counterexamples.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "htapcc/engine.hpp"
#include "htapcc/history.hpp"
#include "htapcc/rss.hpp"

namespace htapcc {

enum class FuzzRole : std::uint8_t {
  ReadWrite,
  ReadOnly,    // plain read-only session
  Snapshot,    // reads the published safe snapshot
  Deferrable,  // waits for a safe snapshot on the primary
};

struct FuzzStep {
  enum class Kind : std::uint8_t { Read, Write, Commit, Abort, Construct, Gc };
  Kind kind = Kind::Read;
  std::size_t slot = 0;  // transaction index for Read/Write/Commit/Abort
  std::size_t key = 0;
  Value value = 0;

  bool operator==(const FuzzStep&) const = default;
};

struct Schedule {
  std::size_t keys = 2;
  std::vector<FuzzRole> roles;  // one per slot
  std::vector<FuzzStep> steps;
};

struct FuzzConfig {
  std::uint64_t seed = 1;
  std::size_t max_txns = 8;
  std::size_t keys = 4;
  std::uint64_t iterations = 1000;
  IsolationMode mode = IsolationMode::SSI;
  double snapshot_rate = 0.25;
  double deferrable_rate = 0.1;
  double read_only_rate = 0.1;
  double abort_rate = 0.05;
  double construct_rate = 0.15;
  double gc_rate = 0.05;
  std::size_t max_ops_per_txn = 4;
};

Schedule generate_schedule(std::mt19937_64& rng, const FuzzConfig& cfg);

// Schedule whose interleaving reproduces the read-only anomaly shape.
Schedule read_only_anomaly_schedule();

struct RunOutcome {
  History history;
  std::vector<RssSnapshot> epochs;             // in publication order
  std::map<TxnId, std::uint64_t> snapshot_txns; // committed snapshot readers -> epoch
  std::set<TxnId> deferrable_txns;
  EngineStats stats;
  std::vector<std::string> errors;  // exceptions other than aborts
};

RunOutcome run_schedule(const Schedule& s, IsolationMode mode);

struct Violation {
  std::string check;
  std::string detail;
};

struct CheckCounts {
  std::uint64_t epochs = 0;
  std::uint64_t snapshot_reads = 0;
  std::uint64_t prefixes = 0;
};

// Oracle checks for a serializable-mode run. Empty when every property holds.
std::vector<Violation> check_run(const RunOutcome& run, std::mt19937_64& rng,
                                 CheckCounts* counts = nullptr);

// Removes transactions, then single steps, while `fails` keeps holding.
Schedule shrink(const Schedule& s, const std::function<bool(const Schedule&)>& fails);

// User operations in the history the schedule produces.
std::size_t schedule_ops(const Schedule& s, IsolationMode mode);

std::string to_string(const Schedule& s);

struct FuzzSummary {
  std::uint64_t iterations = 0;
  std::uint64_t committed_txns = 0;
  std::uint64_t snapshot_txns = 0;
  std::uint64_t deferrable_txns = 0;
  CheckCounts checked;
  std::uint64_t violations = 0;
  std::map<std::string, std::uint64_t> by_check;
  std::uint64_t nonserializable = 0;
  std::uint64_t read_only_anomalies = 0;
  std::optional<Violation> first;
  std::optional<std::string> counterexample;  // shrunk history, .mvh text
  std::size_t counterexample_ops = 0;
  double seconds = 0;
};

// Serializable mode: runs check_run on every iteration. Snapshot isolation
// mode: counts anomalies instead, which are expected findings, and shrinks the
// first one (read-only anomalies preferred) into the counterexample.
FuzzSummary run_fuzz(const FuzzConfig& cfg);

std::string to_json(const FuzzSummary& s);

}  // namespace htapcc
