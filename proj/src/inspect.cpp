#include "htapcc/inspect.hpp"

#include <charconv>
#include <cstdio>
#include <stdexcept>

#include <json.hpp>

#include "htapcc/dsg.hpp"

namespace htapcc {

namespace {

bool read_map_matches(const History& h, const std::set<TxnId>& members,
                      const std::map<Key, SnapshotEntry>& read_map) {
  for (const auto& [key, order] : h.version_order()) {
    std::optional<TxnId> newest;
    for (const auto& v : order) {
      if (members.contains(v.creator)) newest = v.creator;
    }
    const auto it = read_map.find(key);
    if (it == read_map.end() || !newest || it->second.creator != *newest) return false;
  }
  return read_map.size() == h.version_order().size();
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t x = 1469598103934665603ULL;
  for (unsigned char c : s) {
    x ^= c;
    x *= 1099511628211ULL;
  }
  return x;
}

}  // namespace

RssDump rss_dump(const History& h, Prefix p) {
  RssDump d;
  d.prefix = p;
  const auto records = txn_records(h, p);
  d.cls = classify(records, p);
  d.deps = deps_from_history(h, p);
  d.rss = construct_rss_at(h, p);
  d.members = d.rss.members(records);
  d.snapshot = materialize(d.rss, version_store_from(h, p));
  const auto g = build_dsg(committed_projection(h, p));
  d.verified = verify_rss(g, d.members) && read_map_matches(h, d.members, d.snapshot.read_map);
  return d;
}

Prefix parse_prefix(const History& h, std::string_view spec) {
  const auto bad = [&] { return std::invalid_argument("invalid prefix: " + std::string(spec)); };
  if (spec.empty()) throw bad();
  std::uint64_t n = 0;
  const bool is_end = spec[0] == 'c' || spec[0] == 'a';
  const auto digits = is_end ? spec.substr(1) : spec;
  const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), n);
  if (ec != std::errc{} || ptr != digits.data() + digits.size() || digits.empty()) throw bad();
  if (!is_end) {
    if (n > h.last_seq()) throw bad();
    return {n};
  }
  const auto end = end_seq_of(h, TxnId{n});
  if (!end || n == 0) throw bad();
  const auto& op = h.ops()[*end];
  if ((spec[0] == 'c') != (op.kind == OpKind::Commit)) throw bad();
  return {*end};
}

std::string to_json(const RssDump& d) {
  using nlohmann::ordered_json;
  const auto ids = [](const std::set<TxnId>& s) {
    ordered_json a = ordered_json::array();
    for (auto t : s) a.push_back(to_string(t));
    return a;
  };
  ordered_json deps = ordered_json::array();
  for (const auto& [reader, writers] : d.deps.sources()) {
    for (auto w : writers) deps.push_back({{"reader", to_string(reader)}, {"writer", to_string(w)}});
  }
  ordered_json read_map = ordered_json::object();
  for (const auto& [key, e] : d.snapshot.read_map) {
    read_map[key] = {{"creator", to_string(e.creator)}, {"value", e.value}};
  }
  char digest[17];
  std::snprintf(digest, sizeof digest, "%016llx",
                static_cast<unsigned long long>(fnv1a(read_map.dump())));
  ordered_json j;
  j["prefix"] = d.prefix.up_to;
  j["done"] = ids(d.cls.done);
  j["clear"] = ids(d.cls.clear);
  j["active"] = ids(d.cls.active);
  j["counts"] = {{"done", d.cls.done.size()},
                 {"clear", d.cls.clear.size()},
                 {"active", d.cls.active.size()},
                 {"depEdges", d.deps.edge_count()},
                 {"members", d.members.size()}};
  j["deps"] = std::move(deps);
  j["rss"] = {{"clearFrontier", d.rss.clear_frontier}, {"extra", ids(d.rss.extra)}};
  j["members"] = ids(d.members);
  j["readMap"] = std::move(read_map);
  j["readMapDigest"] = digest;
  j["verdict"] = d.verified ? "verified" : "failed";
  return j.dump(2);
}

}  // namespace htapcc
