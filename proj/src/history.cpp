#include "htapcc/history.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>
#include <unordered_map>

namespace htapcc {

std::string to_string(TxnId t) { return "T" + std::to_string(raw(t)); }

std::string to_string(const VersionId& v) {
  return v.key + "@" + to_string(v.creator);
}

ParseError::ParseError(std::size_t line, std::size_t column,
                       const std::string& what)
    : ParseError::HistoryError(std::to_string(line) + ":" +
                               std::to_string(column) + ": " + what),
      line_(line),
      column_(column) {}

namespace {

struct TxnProgress {
  bool begun = false;
  bool ended = false;
  bool committed = false;
  std::map<Key, Value> writes;
};

// Validates user operations and fills read values. `value_known[i]` false
// means the caller did not supply the value of read i.
void validate_and_fill(std::vector<Operation>& ops,
                       const std::vector<bool>* value_known) {
  std::unordered_map<std::uint64_t, TxnProgress> txns;
  // Keys each transaction writes anywhere in the history, for diagnostics.
  std::unordered_map<std::uint64_t, std::set<Key>> ever_written;
  for (const auto& op : ops) {
    if (op.kind == OpKind::Write) ever_written[raw(op.txn)].insert(op.version.key);
  }

  for (std::size_t i = 0; i < ops.size(); ++i) {
    auto& op = ops[i];
    const auto where = " (operation " + std::to_string(i) + ", " +
                       to_string(op.txn) + ")";
    if (op.txn == kInitTxn) {
      throw SemanticError("T0 is implicit and cannot appear" + where);
    }
    auto& tp = txns[raw(op.txn)];
    if (op.kind == OpKind::Begin) {
      if (tp.begun) throw SemanticError("duplicate begin" + where);
      tp.begun = true;
      continue;
    }
    if (!tp.begun) throw SemanticError("operation before begin" + where);
    if (tp.ended) {
      if (op.kind == OpKind::Commit && tp.committed) {
        throw SemanticError("duplicate commit" + where);
      }
      throw SemanticError("operation after commit/abort" + where);
    }
    switch (op.kind) {
      case OpKind::Write:
        if (op.version.key.empty()) throw SemanticError("empty key" + where);
        op.version.creator = op.txn;
        tp.writes[op.version.key] = op.value;
        break;
      case OpKind::Read: {
        const auto& key = op.version.key;
        if (key.empty()) throw SemanticError("empty key" + where);
        const TxnId from = op.version.creator;
        Value expected = 0;
        if (from == kInitTxn) {
          expected = 0;
        } else if (from == op.txn) {
          auto it = tp.writes.find(key);
          if (it == tp.writes.end()) {
            throw SemanticError("read of own version " + to_string(op.version) +
                                " before writing it" + where);
          }
          expected = it->second;
        } else {
          auto ew = ever_written.find(raw(from));
          if (ew == ever_written.end() || !ew->second.contains(key)) {
            throw SemanticError("read of version " + to_string(op.version) +
                                " that is never written" + where);
          }
          auto wt = txns.find(raw(from));
          if (wt == txns.end() || !wt->second.committed) {
            throw SemanticError("read of version " + to_string(op.version) +
                                " whose writer has not committed" + where);
          }
          expected = wt->second.writes.at(key);
        }
        const bool known = value_known == nullptr || (*value_known)[i];
        if (known && op.value != expected) {
          throw SemanticError("read of " + to_string(op.version) +
                              " observes " + std::to_string(op.value) +
                              " but the version holds " +
                              std::to_string(expected) + where);
        }
        op.value = expected;
        break;
      }
      case OpKind::Commit:
        tp.ended = true;
        tp.committed = true;
        break;
      case OpKind::Abort:
        tp.ended = true;
        break;
      case OpKind::Begin:
        break;
    }
  }
}

}  // namespace

History::History() {
  ops_.push_back(Operation::commit(kInitTxn));
}

History History::from_user_ops(std::vector<Operation> ops,
                               const std::set<Key>& extra_keys) {
  History h;
  build(h, std::move(ops), extra_keys, nullptr);
  return h;
}

void History::build(History& h, std::vector<Operation> user,
                    const std::set<Key>& extra,
                    const std::vector<bool>* value_known) {
  validate_and_fill(user, value_known);
  auto& out_keys = h.keys_;
  auto& out_ops = h.ops_;
  auto& out_order = h.version_order_;

  out_keys = extra;
  for (const auto& op : user) {
    if (op.kind == OpKind::Read || op.kind == OpKind::Write) {
      out_keys.insert(op.version.key);
    }
  }

  out_ops.clear();
  out_ops.reserve(user.size() + out_keys.size() + 1);
  std::uint64_t seq = 0;
  for (const auto& k : out_keys) {
    out_ops.push_back({seq++, kInitTxn, OpKind::Write, {k, kInitTxn}, 0});
  }
  out_ops.push_back({seq++, kInitTxn, OpKind::Commit, {}, 0});

  std::unordered_map<std::uint64_t, std::set<Key>> written;
  out_order.clear();
  for (const auto& k : out_keys) out_order[k].push_back({k, kInitTxn});
  for (auto& op : user) {
    op.seq = seq++;
    if (op.kind == OpKind::Write) written[raw(op.txn)].insert(op.version.key);
    if (op.kind == OpKind::Commit) {
      auto it = written.find(raw(op.txn));
      if (it != written.end()) {
        for (const auto& k : it->second) out_order[k].push_back({k, op.txn});
      }
    }
    out_ops.push_back(std::move(op));
  }
}

std::vector<Operation> History::user_ops() const {
  return {ops_.begin() + static_cast<std::ptrdiff_t>(init_ops()), ops_.end()};
}

std::set<TxnId> History::committed() const {
  std::set<TxnId> out;
  for (const auto& op : ops_) {
    if (op.kind == OpKind::Commit) out.insert(op.txn);
  }
  return out;
}

// ---------------------------------------------------------------------------
// DSL

namespace {

class Lexer {
 public:
  explicit Lexer(std::string_view text) : text_(text) {}

  struct Token {
    std::string_view text;
    std::size_t line;
    std::size_t column;
  };

  // Returns false at end of input. Collects "#@t0" directives on the way.
  bool next(Token& tok) {
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (c == '#') {
        const auto eol = text_.find('\n', pos_);
        const auto end = eol == std::string_view::npos ? text_.size() : eol;
        directive(text_.substr(pos_, end - pos_));
        advance(end - pos_);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        advance(1);
        continue;
      }
      const auto start = pos_;
      const auto line = line_;
      const auto col = col_;
      while (pos_ < text_.size() &&
             !std::isspace(static_cast<unsigned char>(text_[pos_])) &&
             text_[pos_] != '#') {
        advance(1);
      }
      tok = {text_.substr(start, pos_ - start), line, col};
      return true;
    }
    return false;
  }

  const std::set<Key>& declared_keys() const { return declared_; }

 private:
  void advance(std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      if (text_[pos_] == '\n') {
        ++line_;
        col_ = 1;
      } else {
        ++col_;
      }
      ++pos_;
    }
  }

  void directive(std::string_view comment) {
    constexpr std::string_view kT0 = "#@t0";
    if (comment.substr(0, kT0.size()) != kT0) return;
    std::istringstream in{std::string(comment.substr(kT0.size()))};
    std::string k;
    while (in >> k) declared_.insert(k);
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
  std::size_t col_ = 1;
  std::set<Key> declared_;
};

bool valid_key(std::string_view k) {
  if (k.empty()) return false;
  return std::all_of(k.begin(), k.end(), [](char c) {
    return !std::isspace(static_cast<unsigned char>(c)) && c != ',' &&
           c != '(' && c != ')' && c != '#';
  });
}

template <typename Int>
bool parse_int(std::string_view s, Int& out) {
  if (s.empty()) return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc{} && ptr == last;
}

std::vector<std::string_view> split_args(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

}  // namespace

History parse_history(std::string_view text) {
  Lexer lex(text);
  Lexer::Token tok;
  std::vector<Operation> ops;
  std::vector<bool> known;
  std::vector<std::pair<std::size_t, std::size_t>> where;

  while (lex.next(tok)) {
    const auto fail = [&](const std::string& msg) -> ParseError {
      return ParseError(tok.line, tok.column,
                        msg + " in token '" + std::string(tok.text) + "'");
    };
    const std::string_view t = tok.text;
    const char kind = t[0];
    if (std::string_view("brwca").find(kind) == std::string_view::npos) {
      throw fail("unknown operation");
    }
    const auto paren = t.find('(');
    const std::string_view num = t.substr(1, paren == std::string_view::npos
                                                 ? std::string_view::npos
                                                 : paren - 1);
    std::uint64_t id = 0;
    if (!parse_int(num, id)) throw fail("expected transaction number");
    if (id == 0) throw fail("T0 is implicit");
    const TxnId txn{id};

    std::vector<std::string_view> args;
    if (paren != std::string_view::npos) {
      if (t.back() != ')') throw fail("missing ')'");
      args = split_args(t.substr(paren + 1, t.size() - paren - 2));
    }

    bool value_known = true;
    switch (kind) {
      case 'b':
      case 'c':
      case 'a':
        if (paren != std::string_view::npos) throw fail("unexpected arguments");
        ops.push_back(kind == 'b'   ? Operation::begin(txn)
                      : kind == 'c' ? Operation::commit(txn)
                                    : Operation::abort(txn));
        break;
      case 'w': {
        if (args.size() != 2) throw fail("write expects (key,value)");
        if (!valid_key(args[0])) throw fail("invalid key");
        Value v = 0;
        if (!parse_int(args[1], v)) throw fail("invalid value");
        ops.push_back(Operation::write(txn, Key(args[0]), v));
        break;
      }
      case 'r': {
        if (args.size() != 2 && args.size() != 3) {
          throw fail("read expects (key,Tm[,value])");
        }
        if (!valid_key(args[0])) throw fail("invalid key");
        std::uint64_t from = 0;
        if (args[1].size() < 2 || args[1][0] != 'T' ||
            !parse_int(args[1].substr(1), from)) {
          throw fail("invalid version creator");
        }
        Value v = 0;
        if (args.size() == 3) {
          if (!parse_int(args[2], v)) throw fail("invalid value");
        } else {
          value_known = false;
        }
        ops.push_back(Operation::read(txn, Key(args[0]), TxnId{from}, v));
        break;
      }
      default:
        break;
    }
    known.push_back(value_known);
    where.emplace_back(tok.line, tok.column);
  }

  History h;
  try {
    History::build(h, std::move(ops), lex.declared_keys(), &known);
  } catch (const SemanticError& e) {
    // Re-anchor the message to the source position of the failing token.
    const std::string msg = e.what();
    const auto at = msg.find("(operation ");
    if (at != std::string::npos) {
      const auto idx = std::stoull(msg.substr(at + 11));
      if (idx < where.size()) {
        throw SemanticError(std::to_string(where[idx].first) + ":" +
                            std::to_string(where[idx].second) + ": " + msg);
      }
    }
    throw;
  }
  return h;
}

namespace {

std::string token(const Operation& op) {
  const auto n = std::to_string(raw(op.txn));
  switch (op.kind) {
    case OpKind::Begin:
      return "b" + n;
    case OpKind::Commit:
      return "c" + n;
    case OpKind::Abort:
      return "a" + n;
    case OpKind::Write:
      return "w" + n + "(" + op.version.key + "," + std::to_string(op.value) +
             ")";
    case OpKind::Read:
      return "r" + n + "(" + op.version.key + "," +
             to_string(op.version.creator) + "," + std::to_string(op.value) +
             ")";
  }
  return {};
}

}  // namespace

std::string serialize_history(const History& h) {
  std::string out = "#@t0";
  for (const auto& k : h.keys()) out += " " + k;
  out += "\n";
  constexpr std::size_t kPerLine = 16;
  std::size_t on_line = 0;
  for (std::size_t i = h.init_ops(); i < h.ops().size(); ++i) {
    if (on_line > 0) out += ' ';
    out += token(h.ops()[i]);
    if (++on_line == kPerLine) {
      out += '\n';
      on_line = 0;
    }
  }
  if (on_line > 0) out += '\n';
  return out;
}

History committed_projection(const History& h, Prefix p) {
  std::set<TxnId> keep;
  for (const auto& op : h.ops()) {
    if (op.kind == OpKind::Commit && (op.txn == kInitTxn || op.seq <= p.up_to)) {
      keep.insert(op.txn);
    }
  }
  std::vector<Operation> ops;
  for (std::size_t i = h.init_ops(); i < h.ops().size(); ++i) {
    const auto& op = h.ops()[i];
    if (keep.contains(op.txn)) ops.push_back(op);
  }
  return History::from_user_ops(std::move(ops), h.keys());
}

std::map<TxnId, TxnRecord> txn_records(const History& h, Prefix p) {
  std::map<TxnId, TxnRecord> out;
  for (std::size_t i = 0; i < h.ops().size(); ++i) {
    const auto& op = h.ops()[i];
    if (op.txn != kInitTxn && op.seq > p.up_to) break;
    auto [it, fresh] = out.try_emplace(op.txn);
    auto& rec = it->second;
    if (fresh) {
      rec.txn = op.txn;
      rec.begin_seq = op.seq;
    }
    switch (op.kind) {
      case OpKind::Begin:
        rec.begin_seq = op.seq;
        break;
      case OpKind::Read:
        rec.read_set.insert(op.version);
        break;
      case OpKind::Write:
        rec.write_set.insert(op.version);
        break;
      case OpKind::Commit:
        rec.end_seq = op.seq;
        rec.state = TxnState::Committed;
        break;
      case OpKind::Abort:
        rec.end_seq = op.seq;
        rec.state = TxnState::Aborted;
        break;
    }
  }
  return out;
}

History without_txns(const History& h, const std::set<TxnId>& drop) {
  std::vector<Operation> ops;
  for (std::size_t i = h.init_ops(); i < h.ops().size(); ++i) {
    const auto& op = h.ops()[i];
    if (!drop.contains(op.txn)) ops.push_back(op);
  }
  return History::from_user_ops(std::move(ops), h.keys());
}

std::optional<std::uint64_t> end_seq_of(const History& h, TxnId t) {
  for (const auto& op : h.ops()) {
    if (op.txn == t && (op.kind == OpKind::Commit || op.kind == OpKind::Abort)) {
      return op.seq;
    }
  }
  return std::nullopt;
}

}  // namespace htapcc
