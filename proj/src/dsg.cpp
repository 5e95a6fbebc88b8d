#include "htapcc/dsg.hpp"

#include <algorithm>
#include <deque>
#include <unordered_map>

#include <json.hpp>

namespace htapcc {

std::string to_string(DepKind k) {
  switch (k) {
    case DepKind::WW:
      return "ww";
    case DepKind::WR:
      return "wr";
    case DepKind::RW:
      return "rw";
  }
  return "?";
}

Dsg::Dsg(std::set<TxnId> nodes, std::vector<DependencyEdge> edges)
    : nodes_(std::move(nodes)), edges_(std::move(edges)) {
  std::sort(edges_.begin(), edges_.end(),
            [](const DependencyEdge& a, const DependencyEdge& b) {
              return std::tie(a.from, a.to, a.kind) < std::tie(b.from, b.to, b.kind);
            });
  edges_.erase(std::unique(edges_.begin(), edges_.end(),
                           [](const DependencyEdge& a, const DependencyEdge& b) {
                             return a.from == b.from && a.to == b.to &&
                                    a.kind == b.kind;
                           }),
               edges_.end());
  for (const auto& e : edges_) {
    auto& s = succ_[e.from];
    if (s.empty() || s.back() != e.to) s.push_back(e.to);
  }
}

const std::vector<TxnId>& Dsg::successors(TxnId t) const {
  static const std::vector<TxnId> kNone;
  auto it = succ_.find(t);
  return it == succ_.end() ? kNone : it->second;
}

Dsg Dsg::induced(const std::set<TxnId>& keep) const {
  std::set<TxnId> nodes;
  for (auto t : keep) {
    if (nodes_.contains(t)) nodes.insert(t);
  }
  std::vector<DependencyEdge> edges;
  for (const auto& e : edges_) {
    if (nodes.contains(e.from) && nodes.contains(e.to)) edges.push_back(e);
  }
  return Dsg(std::move(nodes), std::move(edges));
}

Dsg build_dsg(const History& proj) {
  struct Span {
    std::uint64_t begin;
    std::uint64_t end;
  };
  std::unordered_map<std::uint64_t, Span> spans;
  std::unordered_map<std::uint64_t, bool> ended;
  for (const auto& op : proj.ops()) {
    auto [it, fresh] = spans.try_emplace(raw(op.txn), Span{op.seq, op.seq});
    if (op.kind == OpKind::Commit) {
      it->second.end = op.seq;
      ended[raw(op.txn)] = true;
    } else if (op.kind == OpKind::Abort) {
      throw OracleError("projection contains aborted " + to_string(op.txn));
    }
  }
  std::set<TxnId> nodes;
  for (const auto& [t, s] : spans) {
    if (!ended.contains(t)) {
      throw OracleError("projection contains uncommitted " + to_string(TxnId{t}));
    }
    nodes.insert(TxnId{t});
  }

  const auto concurrent = [&](TxnId a, TxnId b) {
    const auto& sa = spans.at(raw(a));
    const auto& sb = spans.at(raw(b));
    return sa.begin < sb.end && sb.begin < sa.end;
  };

  std::vector<DependencyEdge> edges;
  const auto add = [&](TxnId from, TxnId to, DepKind kind) {
    if (from == to) return;
    edges.push_back({from, to, kind, concurrent(from, to)});
  };

  // (key, creator) -> index in that key's version order
  std::map<std::pair<Key, TxnId>, std::size_t> index;
  for (const auto& [key, order] : proj.version_order()) {
    for (std::size_t i = 0; i < order.size(); ++i) {
      index[{key, order[i].creator}] = i;
      if (i + 1 < order.size()) add(order[i].creator, order[i + 1].creator, DepKind::WW);
    }
  }
  for (const auto& op : proj.ops()) {
    if (op.kind != OpKind::Read) continue;
    const auto& v = op.version;
    add(v.creator, op.txn, DepKind::WR);
    auto it = index.find({v.key, v.creator});
    if (it == index.end()) {
      throw OracleError("read of uncommitted version " + to_string(v));
    }
    const auto& order = proj.version_order().at(v.key);
    if (it->second + 1 < order.size()) {
      add(op.txn, order[it->second + 1].creator, DepKind::RW);
    }
  }
  return Dsg(std::move(nodes), std::move(edges));
}

std::optional<std::vector<TxnId>> find_cycle(const Dsg& g) {
  enum Color : std::uint8_t { White, Gray, Black };
  std::map<TxnId, Color> color;
  for (auto n : g.nodes()) color[n] = White;

  struct Frame {
    TxnId node;
    std::size_t next;
  };
  std::vector<Frame> stack;
  for (auto root : g.nodes()) {
    if (color[root] != White) continue;
    stack.push_back({root, 0});
    color[root] = Gray;
    while (!stack.empty()) {
      auto& top = stack.back();
      const auto& succ = g.successors(top.node);
      if (top.next == succ.size()) {
        color[top.node] = Black;
        stack.pop_back();
        continue;
      }
      const TxnId s = succ[top.next++];
      if (color[s] == Gray) {
        std::vector<TxnId> cycle;
        auto it = std::find_if(stack.begin(), stack.end(),
                               [&](const Frame& f) { return f.node == s; });
        for (; it != stack.end(); ++it) cycle.push_back(it->node);
        std::rotate(cycle.begin(), std::min_element(cycle.begin(), cycle.end()),
                    cycle.end());
        return cycle;
      }
      if (color[s] == White) {
        color[s] = Gray;
        stack.push_back({s, 0});
      }
    }
  }
  return std::nullopt;
}

namespace {

void require_node(const Dsg& g, TxnId t) {
  if (!g.contains(t)) throw OracleError("unknown transaction " + to_string(t));
}

}  // namespace

bool reachable(const Dsg& g, TxnId from, TxnId to) {
  require_node(g, from);
  require_node(g, to);
  if (from == to) return true;
  std::set<TxnId> seen{from};
  std::deque<TxnId> queue{from};
  while (!queue.empty()) {
    const auto t = queue.front();
    queue.pop_front();
    for (auto s : g.successors(t)) {
      if (s == to) return true;
      if (seen.insert(s).second) queue.push_back(s);
    }
  }
  return false;
}

bool verify_rss(const Dsg& g, const std::set<TxnId>& candidate) {
  for (auto t : candidate) require_node(g, t);
  // Everything reachable from some node outside the candidate set.
  std::set<TxnId> seen;
  std::deque<TxnId> queue;
  for (auto n : g.nodes()) {
    if (!candidate.contains(n)) {
      seen.insert(n);
      queue.push_back(n);
    }
  }
  while (!queue.empty()) {
    const auto t = queue.front();
    queue.pop_front();
    for (auto s : g.successors(t)) {
      if (candidate.contains(s)) return false;
      if (seen.insert(s).second) queue.push_back(s);
    }
  }
  return true;
}

bool verify_prot(const History& h, TxnId candidate, const std::set<TxnId>& rss) {
  const auto records = txn_records(h, h.full());
  auto rec = records.find(candidate);
  if (rec == records.end() || rec->second.state != TxnState::Committed) {
    throw OracleError(to_string(candidate) + " is not committed");
  }
  if (rss.contains(candidate) || !rec->second.write_set.empty()) return false;

  // Latest-committing member writer per key: version order is commit order.
  std::map<Key, TxnId> latest;
  for (const auto& [key, order] : h.version_order()) {
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if (rss.contains(it->creator)) {
        latest[key] = it->creator;
        break;
      }
    }
  }
  for (const auto& op : h.ops()) {
    if (op.txn != candidate || op.kind != OpKind::Read) continue;
    auto it = latest.find(op.version.key);
    if (it == latest.end() || it->second != op.version.creator) return false;
  }
  return true;
}

namespace {

// Shortest cycle through `s` (BFS over successors back to s).
std::optional<std::vector<TxnId>> cycle_through(const Dsg& g, TxnId s) {
  std::map<TxnId, TxnId> parent;
  std::deque<TxnId> queue;
  for (auto n : g.successors(s)) {
    if (n == s) continue;
    if (parent.try_emplace(n, s).second) queue.push_back(n);
  }
  while (!queue.empty()) {
    const auto t = queue.front();
    queue.pop_front();
    for (auto n : g.successors(t)) {
      if (n == s) {
        std::vector<TxnId> cycle{t};
        for (auto p = parent.at(t); p != s; p = parent.at(p)) cycle.push_back(p);
        cycle.push_back(s);
        std::reverse(cycle.begin(), cycle.end());
        return cycle;
      }
      if (parent.try_emplace(n, t).second) queue.push_back(n);
    }
  }
  return std::nullopt;
}

}  // namespace

AnomalyReport classify_anomaly(const History& proj) {
  AnomalyReport report;
  const auto g = build_dsg(proj);
  report.cycle = find_cycle(g);
  report.serializable = !report.cycle.has_value();
  if (report.serializable) return report;

  const auto records = txn_records(proj, proj.full());
  for (const auto& [t, rec] : records) {
    if (t == kInitTxn || !rec.write_set.empty()) continue;
    auto cycle = cycle_through(g, t);
    if (!cycle) continue;
    std::set<TxnId> rest(cycle->begin(), cycle->end());
    rest.erase(t);
    if (find_cycle(g.induced(rest))) continue;
    // Report the cycle starting at its smallest member, like find_cycle.
    std::rotate(cycle->begin(), std::min_element(cycle->begin(), cycle->end()),
                cycle->end());
    report.read_only_anomaly = ReadOnlyAnomaly{std::move(*cycle), t};
    break;
  }
  return report;
}

std::string to_json(const AnomalyReport& r) {
  using nlohmann::json;
  const auto ids = [](const std::vector<TxnId>& v) {
    json a = json::array();
    for (auto t : v) a.push_back(to_string(t));
    return a;
  };
  json j;
  j["serializable"] = r.serializable;
  j["cycle"] = r.cycle ? ids(*r.cycle) : json(nullptr);
  if (r.read_only_anomaly) {
    j["readOnlyAnomaly"] = {{"cycle", ids(r.read_only_anomaly->cycle)},
                            {"readOnly", to_string(r.read_only_anomaly->read_only)}};
  } else {
    j["readOnlyAnomaly"] = nullptr;
  }
  return j.dump();
}

}  // namespace htapcc
