// Mixed OLTP/OLAP key-value workload over the engine, single-node or with a
// log-shipped read replica, plus the post-run serializability audit.
#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "htapcc/history.hpp"
#include "htapcc/replication.hpp"

namespace htapcc {

enum class BenchMode : std::uint8_t {
  SSI,           // analytics run as ordinary serializable read-only txns
  SSI_SAFESNAP,  // analytics wait for a safe snapshot
  SSI_RSS,       // analytics read the published read-safe snapshot
  SI,            // snapshot isolation everywhere
};

// Labels: SSI, SSI_SAFESNAP, SSI_RSS, SI; replicated SI is labelled SSI_SI.
std::string to_string(BenchMode m, bool replicated = false);
// Accepts every label above. Sets `replicated` for SSI_SI.
std::optional<BenchMode> parse_bench_mode(const std::string& s, bool* replicated = nullptr);

struct WorkloadSpec {
  BenchMode mode = BenchMode::SSI_RSS;
  bool replicated = false;
  std::size_t oltp_clients = 8;
  std::size_t olap_clients = 4;
  std::chrono::milliseconds duration{10000};
  std::chrono::milliseconds warmup{1000};
  std::size_t key_count = 4096;
  std::size_t warehouses = 2;      // key partitions; OLTP client c homes on c % warehouses
  std::size_t write_txn_size = 2;  // read-modify-write keys per OLTP txn
  std::size_t oltp_reads = 8;      // additional keys read per OLTP txn
  std::size_t scan_size = 4096;    // keys read per OLAP query
  std::size_t scan_chunk = 64;     // keys fetched per OLAP round trip
  // Client/server round trip paid per OLTP statement and per OLAP fetch.
  std::chrono::microseconds statement_latency{100};
  double remote_rate = 0.1;        // OLTP txns touching another partition
  std::uint64_t seed = 1;
  std::size_t retry_cap = 10;
  std::chrono::milliseconds latency{0};   // replicated shipping delay
  std::chrono::milliseconds cadence{100}; // snapshot construction interval
  std::chrono::milliseconds deferrable_timeout{10000};
  std::size_t audit_threshold = 2'000'000;  // history operations
};

// Reads RSS_CADENCE_MS into spec.cadence when set.
void apply_environment(WorkloadSpec& spec);

struct RunReport {
  WorkloadSpec spec;
  double seconds = 0;
  std::uint64_t oltp_commits = 0;
  std::uint64_t oltp_attempts = 0;
  std::uint64_t oltp_aborts = 0;
  std::uint64_t oltp_failed = 0;  // gave up after the retry cap
  std::uint64_t olap_queries = 0;
  std::uint64_t olap_attempts = 0;
  std::uint64_t olap_aborts = 0;
  double oltp_tps = 0;
  double olap_qph = 0;
  double abort_rate = 0;  // (aborts + retries) / attempts, both client kinds
  std::uint64_t prot_waits = 0;
  std::uint64_t prot_aborts = 0;
  double freshness_ms = 0;  // mean snapshot lag, snapshot-serving modes only
  std::uint64_t snapshots_published = 0;
  // serializable, nonserializable, read-only-anomaly or skipped
  std::string verdict = "skipped";
  std::string audit_note;
  std::uint64_t audited_txns = 0;
};

RunReport run_bench(WorkloadSpec spec);

std::string csv_header();
std::string to_csv(const RunReport& r);
std::string to_json(const RunReport& r);

struct AuditResult {
  std::string verdict;
  std::optional<std::vector<TxnId>> cycle;
  std::size_t txns = 0;
};

// Serializability of a primary history with replica sessions appended after
// it. Cycles that disappear once read-only sessions are removed are reported
// as read-only anomalies.
AuditResult audit_with_readers(const History& primary,
                               const std::vector<ReplicaTxnLog>& readers);

}  // namespace htapcc
