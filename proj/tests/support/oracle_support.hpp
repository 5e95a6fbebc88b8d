// Independent reference implementations used to cross-check the oracle.
#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "htapcc/dsg.hpp"
#include "htapcc/history.hpp"

namespace htapcc::testing {

inline constexpr const char* kHsText =
    "b1 b2 b3 r2(x,T0,0) r2(y,T0,0) r1(y,T0,0) w1(y,20) c1 r3(x,T0,0) "
    "r3(y,T1,20) w2(x,-11) c2 c3";

using EdgeTuple = std::tuple<std::uint64_t, std::uint64_t, DepKind, bool>;

// Pairwise scan straight from the operation list: no version-order table.
inline std::set<EdgeTuple> naive_edges(const History& proj) {
  struct Info {
    std::uint64_t begin = 0, end = 0;
    bool begun = false;
    std::set<Key> writes;
    std::vector<VersionId> reads;
  };
  std::map<std::uint64_t, Info> txns;
  for (const auto& op : proj.ops()) {
    auto& t = txns[raw(op.txn)];
    if (!t.begun) {
      t.begin = op.seq;
      t.begun = true;
    }
    if (op.kind == OpKind::Commit) t.end = op.seq;
    if (op.kind == OpKind::Write) t.writes.insert(op.version.key);
    if (op.kind == OpKind::Read) t.reads.push_back(op.version);
  }
  // Is `b` the first committed writer of k after `a` in commit order?
  const auto next_writer = [&](std::uint64_t a, std::uint64_t b, const Key& k) {
    const auto& ta = txns.at(a);
    const auto& tb = txns.at(b);
    if (a == b || !tb.writes.contains(k) || tb.end <= ta.end) return false;
    for (const auto& [c, tc] : txns) {
      if (c != a && c != b && tc.writes.contains(k) && ta.end < tc.end && tc.end < tb.end) {
        return false;
      }
    }
    return true;
  };
  std::set<EdgeTuple> out;
  for (const auto& [a, ta] : txns) {
    for (const auto& [b, tb] : txns) {
      if (a == b) continue;
      const bool vul = ta.begin < tb.end && tb.begin < ta.end;
      for (const auto& k : ta.writes) {
        if (next_writer(a, b, k)) out.insert({a, b, DepKind::WW, vul});
      }
      for (const auto& v : tb.reads) {
        if (raw(v.creator) == a) out.insert({a, b, DepKind::WR, vul});
      }
      for (const auto& v : ta.reads) {
        if (txns.contains(raw(v.creator)) && next_writer(raw(v.creator), b, v.key)) {
          out.insert({a, b, DepKind::RW, vul});
        }
      }
    }
  }
  return out;
}

inline std::set<EdgeTuple> edge_tuples(const Dsg& g) {
  std::set<EdgeTuple> out;
  for (const auto& e : g.edges()) out.insert({raw(e.from), raw(e.to), e.kind, e.vulnerable});
  return out;
}

// Cycle detection through the transitive closure (Floyd-Warshall).
inline bool closure_has_cycle(const Dsg& g) {
  std::vector<TxnId> nodes(g.nodes().begin(), g.nodes().end());
  std::map<TxnId, std::size_t> idx;
  for (std::size_t i = 0; i < nodes.size(); ++i) idx[nodes[i]] = i;
  const auto n = nodes.size();
  std::vector<std::vector<char>> r(n, std::vector<char>(n, 0));
  for (const auto& e : g.edges()) r[idx[e.from]][idx[e.to]] = 1;
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!r[i][k]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (r[k][j]) r[i][j] = 1;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (r[i][i]) return true;
  }
  return false;
}

inline bool is_cycle_in(const Dsg& g, const std::vector<TxnId>& cycle) {
  if (cycle.empty()) return false;
  for (std::size_t i = 0; i < cycle.size(); ++i) {
    const auto& succ = g.successors(cycle[i]);
    const auto next = cycle[(i + 1) % cycle.size()];
    if (std::find(succ.begin(), succ.end(), next) == succ.end()) return false;
  }
  return true;
}

// Every history over keys {x, y} where each of n transactions reads one key
// and then writes one key. A read may observe T0 or any earlier writer of the
// key. Two layouts: fully serial, and all Begins first.
inline void enumerate_template(std::size_t n, const std::function<void(const History&)>& fn) {
  const Key keys[2] = {"x", "y"};
  struct Choice {
    int rk, wk;
    std::uint64_t from;
  };
  std::vector<Choice> picks(n);
  std::function<void(std::size_t)> rec = [&](std::size_t i) {
    if (i == n) {
      for (int layout = 0; layout < 2; ++layout) {
        std::vector<Operation> ops;
        if (layout == 1) {
          for (std::size_t t = 1; t <= n; ++t) ops.push_back(Operation::begin(TxnId{t}));
        }
        for (std::size_t t = 1; t <= n; ++t) {
          const auto& c = picks[t - 1];
          const TxnId id{t};
          if (layout == 0) ops.push_back(Operation::begin(id));
          ops.push_back(Operation::read(id, keys[c.rk], TxnId{c.from}, 0));
          ops.push_back(Operation::write(id, keys[c.wk], static_cast<Value>(t)));
          ops.push_back(Operation::commit(id));
        }
        // Values of reads are filled in from the writer.
        for (auto& op : ops) {
          if (op.kind == OpKind::Read) op.value = static_cast<Value>(raw(op.version.creator));
        }
        fn(History::from_user_ops(std::move(ops), {"x", "y"}));
      }
      return;
    }
    for (int rk = 0; rk < 2; ++rk) {
      for (int wk = 0; wk < 2; ++wk) {
        std::vector<std::uint64_t> sources{0};
        for (std::size_t j = 0; j < i; ++j) {
          if (picks[j].wk == rk) sources.push_back(j + 1);
        }
        for (auto from : sources) {
          picks[i] = {rk, wk, from};
          rec(i + 1);
        }
      }
    }
  };
  rec(0);
}

}  // namespace htapcc::testing
