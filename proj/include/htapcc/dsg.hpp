// Direct serialization graph over a committed projection, plus the
// brute-force checks used as ground truth by the tests and the fuzzer.
#pragma once

#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "htapcc/history.hpp"

namespace htapcc {

enum class DepKind : std::uint8_t { WW, WR, RW };

std::string to_string(DepKind k);

struct DependencyEdge {
  TxnId from{};
  TxnId to{};
  DepKind kind = DepKind::WW;
  bool vulnerable = false;  // lifetimes of from/to overlap

  auto operator<=>(const DependencyEdge&) const = default;
  bool operator==(const DependencyEdge&) const = default;
};

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Dsg {
 public:
  Dsg() = default;
  Dsg(std::set<TxnId> nodes, std::vector<DependencyEdge> edges);

  const std::set<TxnId>& nodes() const noexcept { return nodes_; }
  // Sorted by (from, to, kind), no duplicates.
  const std::vector<DependencyEdge>& edges() const noexcept { return edges_; }
  // Distinct successors of t in ascending order.
  const std::vector<TxnId>& successors(TxnId t) const;
  bool contains(TxnId t) const { return nodes_.contains(t); }

  // Subgraph induced on `keep`: edges with an endpoint outside are dropped.
  Dsg induced(const std::set<TxnId>& keep) const;

 private:
  std::set<TxnId> nodes_;
  std::vector<DependencyEdge> edges_;
  std::map<TxnId, std::vector<TxnId>> succ_;
};

// Throws OracleError if the input contains a transaction that did not commit.
Dsg build_dsg(const History& projection);

// One cycle, rotated to start at its smallest id; DFS visits nodes and
// successors in ascending order so the result is deterministic.
std::optional<std::vector<TxnId>> find_cycle(const Dsg& g);

// Reflexive-transitive reachability. Throws OracleError for unknown ids.
bool reachable(const Dsg& g, TxnId from, TxnId to);

// True iff no node outside `candidate` reaches a node inside it.
bool verify_rss(const Dsg& g, const std::set<TxnId>& candidate);

// True iff `candidate` is a protected read-only transaction with respect to
// `rss`: not a member, no writes, and every read targets the version written
// by the latest-committing member that wrote the key.
bool verify_prot(const History& h, TxnId candidate, const std::set<TxnId>& rss);

struct ReadOnlyAnomaly {
  std::vector<TxnId> cycle;
  TxnId read_only{};
};

struct AnomalyReport {
  bool serializable = true;
  std::optional<std::vector<TxnId>> cycle;
  std::optional<ReadOnlyAnomaly> read_only_anomaly;

  int exit_code() const {
    if (serializable) return 0;
    return read_only_anomaly ? 3 : 2;
  }
};

AnomalyReport classify_anomaly(const History& projection);

std::string to_json(const AnomalyReport& r);

}  // namespace htapcc
