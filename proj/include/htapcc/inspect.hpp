// Offline snapshot construction over a recorded history, with an oracle
// cross-check, for diagnostics.
#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>

#include "htapcc/history.hpp"
#include "htapcc/rss.hpp"

namespace htapcc {

struct RssDump {
  Prefix prefix;
  TxnClass cls;
  DepGraphShard deps;
  RssSet rss;
  std::set<TxnId> members;
  RssSnapshot snapshot;
  bool verified = false;  // members form an RSS and read_map is consistent with them
};

RssDump rss_dump(const History& h, Prefix p);

// Accepts a history position ("9") or an end operation of a transaction
// ("c1", "a2"). Throws std::invalid_argument otherwise or past the end.
Prefix parse_prefix(const History& h, std::string_view spec);

std::string to_json(const RssDump& d);

}  // namespace htapcc
