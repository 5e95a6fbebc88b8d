// Multiversion history model: transactions, operations, version order and
// the text format (.mvh) used by the corpus and the CLI.
#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace htapcc {

// Transaction identifier. 0 is the virtual initializer T0.
enum class TxnId : std::uint64_t {};

inline constexpr TxnId kInitTxn{0};

constexpr std::uint64_t raw(TxnId t) noexcept {
  return static_cast<std::uint64_t>(t);
}

std::string to_string(TxnId t);  // "T3"

using Key = std::string;
using Value = std::int64_t;

// Version X_b: the version of `key` created by transaction `creator`.
struct VersionId {
  Key key;
  TxnId creator{};

  auto operator<=>(const VersionId&) const = default;
  bool operator==(const VersionId&) const = default;
};

std::string to_string(const VersionId& v);  // "y@T1"

enum class OpKind : std::uint8_t { Begin, Read, Write, Commit, Abort };

struct Operation {
  std::uint64_t seq = 0;
  TxnId txn{};
  OpKind kind = OpKind::Begin;
  VersionId version;  // Read / Write only
  Value value = 0;    // Read / Write only

  bool operator==(const Operation&) const = default;

  static Operation begin(TxnId t) { return {0, t, OpKind::Begin, {}, 0}; }
  static Operation commit(TxnId t) { return {0, t, OpKind::Commit, {}, 0}; }
  static Operation abort(TxnId t) { return {0, t, OpKind::Abort, {}, 0}; }
  static Operation read(TxnId t, Key k, TxnId from, Value v) {
    return {0, t, OpKind::Read, {std::move(k), from}, v};
  }
  static Operation write(TxnId t, Key k, Value v) {
    return {0, t, OpKind::Write, {std::move(k), t}, v};
  }
};

enum class TxnState : std::uint8_t { Active, Committed, Aborted };

struct TxnRecord {
  TxnId txn{};
  std::uint64_t begin_seq = 0;
  std::optional<std::uint64_t> end_seq;
  TxnState state = TxnState::Active;
  std::set<VersionId> read_set;
  std::set<VersionId> write_set;

  bool operator==(const TxnRecord&) const = default;
};

// Logical view of a history containing the operations with seq <= up_to.
// The initializer block (T0's writes and commit) belongs to every prefix.
struct Prefix {
  std::uint64_t up_to = 0;
};

class HistoryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public HistoryError {
 public:
  ParseError(std::size_t line, std::size_t column, const std::string& what);
  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

class SemanticError : public HistoryError {
 public:
  using HistoryError::HistoryError;
};

class History {
 public:
  // Empty history: only the initializer commit.
  History();

  // Builds a history from user operations (T0 must not appear). The T0 block
  // is synthesized for every key referenced by `ops` plus `extra_keys`, and
  // seq numbers are reassigned densely. Throws SemanticError on structural
  // violations: operation before Begin or after Commit/Abort, duplicate
  // Begin/End, reads of versions that were never written or whose writer had
  // not committed before the read.
  static History from_user_ops(std::vector<Operation> ops,
                               const std::set<Key>& extra_keys = {});

  const std::vector<Operation>& ops() const noexcept { return ops_; }
  // Per key, committed versions in commit order (T0's version first).
  const std::map<Key, std::vector<VersionId>>& version_order() const noexcept {
    return version_order_;
  }
  const std::set<Key>& keys() const noexcept { return keys_; }
  // Number of initializer operations at the head of ops().
  std::size_t init_ops() const noexcept { return keys_.size() + 1; }
  std::uint64_t last_seq() const noexcept { return ops_.back().seq; }
  Prefix full() const noexcept { return {last_seq()}; }
  // The user operations (everything after the T0 block).
  std::vector<Operation> user_ops() const;
  // Transactions whose Commit appears in the history, T0 included.
  std::set<TxnId> committed() const;

  bool operator==(const History& other) const {
    return ops_ == other.ops_ && keys_ == other.keys_;
  }

 private:
  friend History parse_history(std::string_view text);
  static void build(History& h, std::vector<Operation> user,
                    const std::set<Key>& extra,
                    const std::vector<bool>* value_known);

  std::vector<Operation> ops_;
  std::map<Key, std::vector<VersionId>> version_order_;
  std::set<Key> keys_;
};

// History DSL: bN, rN(key,Tm[,v]), wN(key,v), cN, aN; '#' starts a comment.
// A "#@t0 k1 k2 ..." line declares initializer keys beyond those referenced.
History parse_history(std::string_view text);
std::string serialize_history(const History& h);

// Operations of transactions whose Commit lies within the prefix.
History committed_projection(const History& h, Prefix p);

// Lifecycle records computed from the operations within the prefix.
std::map<TxnId, TxnRecord> txn_records(const History& h, Prefix p);

// Removes every operation of the given transactions.
History without_txns(const History& h, const std::set<TxnId>& drop);

// Position of the operation at which `t` ends, if any.
std::optional<std::uint64_t> end_seq_of(const History& h, TxnId t);

}  // namespace htapcc
