#include "htapcc/wal.hpp"

#include <istream>
#include <ostream>

#include <json.hpp>

namespace htapcc {

using ojson = nlohmann::ordered_json;

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

}  // namespace

std::string encode(const WalRecord& rec) {
  ojson j;
  j["lsn"] = rec.lsn;
  std::visit(
      overloaded{
          [&](const BeginRec& r) {
            j["t"] = "begin";
            j["txn"] = raw(r.txn);
            j["seq"] = r.seq;
          },
          [&](const CommitRec& r) {
            j["t"] = "commit";
            j["txn"] = raw(r.txn);
            j["seq"] = r.seq;
            j["pos"] = r.pos;
            ojson writes = ojson::array();
            for (const auto& [k, v] : r.writes) writes.push_back(ojson::array({k, v}));
            j["writes"] = std::move(writes);
            j["deps"] = r.deps;
          },
          [&](const AbortRec& r) {
            j["t"] = "abort";
            j["txn"] = raw(r.txn);
            j["pos"] = r.pos;
          },
          [&](const RwDepsRec& r) {
            j["t"] = "deps";
            j["txn"] = raw(r.txn);
            ojson writers = ojson::array();
            for (auto w : r.writers) writers.push_back(raw(w));
            j["writers"] = std::move(writers);
          },
      },
      rec.payload);
  return j.dump();
}

WalRecord decode(std::string_view line) {
  ojson j;
  try {
    j = ojson::parse(line);
    WalRecord rec;
    rec.lsn = j.at("lsn").get<std::uint64_t>();
    const auto t = j.at("t").get<std::string>();
    const TxnId txn{j.at("txn").get<std::uint64_t>()};
    if (t == "begin") {
      rec.payload = BeginRec{txn, j.at("seq").get<std::uint64_t>()};
    } else if (t == "commit") {
      CommitRec c{txn, j.at("seq").get<std::uint64_t>(),
                  j.at("pos").get<std::uint64_t>(), {}, 0};
      for (const auto& w : j.at("writes")) {
        c.writes.emplace_back(w.at(0).get<std::string>(), w.at(1).get<Value>());
      }
      c.deps = j.value("deps", 0u);
      rec.payload = std::move(c);
    } else if (t == "abort") {
      rec.payload = AbortRec{txn, j.at("pos").get<std::uint64_t>()};
    } else if (t == "deps") {
      RwDepsRec d{txn, {}};
      for (const auto& w : j.at("writers")) d.writers.push_back(TxnId{w.get<std::uint64_t>()});
      rec.payload = std::move(d);
    } else {
      throw WalFormatError("unknown record type '" + t + "'");
    }
    return rec;
  } catch (const nlohmann::json::exception& e) {
    throw WalFormatError(std::string("malformed WAL record: ") + e.what());
  }
}

std::string encode(const FeedbackMsg& msg) {
  ojson j;
  j["t"] = "feedback";
  j["watermark"] = msg.watermark;
  return j.dump();
}

FeedbackMsg decode_feedback(std::string_view line) {
  try {
    const auto j = ojson::parse(line);
    if (j.at("t").get<std::string>() != "feedback") {
      throw WalFormatError("not a feedback message");
    }
    return {j.at("watermark").get<std::uint64_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw WalFormatError(std::string("malformed feedback: ") + e.what());
  }
}

void WalLog::append(std::vector<WalPayload> batch) {
  if (batch.empty()) return;
  {
    std::lock_guard lock(mu_);
    const auto now = Clock::now();
    auto left = static_cast<std::uint32_t>(batch.size());
    for (auto& p : batch) {
      entries_.push_back({WalRecord{next_lsn_++, std::move(p)}, now});
      batch_left_.push_back(left--);
    }
  }
  cv_.notify_all();
}

std::vector<WalLog::Entry> WalLog::read_from(std::uint64_t from,
                                             std::size_t max) const {
  std::lock_guard lock(mu_);
  std::vector<Entry> out;
  if (entries_.empty()) return out;
  const auto first = entries_.front().record.lsn;
  std::size_t i = from <= first ? 0 : static_cast<std::size_t>(from - first);
  for (; i < entries_.size(); ++i) {
    // Stop only at a batch boundary once the budget is used up.
    if (!out.empty() && out.size() >= max && batch_left_[i - 1] == 1) break;
    out.push_back(entries_[i]);
  }
  return out;
}

bool WalLog::wait_for(std::uint64_t from, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mu_);
  return cv_.wait_for(lock, timeout, [&] { return next_lsn_ > from; });
}

std::uint64_t WalLog::last_lsn() const {
  std::lock_guard lock(mu_);
  return next_lsn_ - 1;
}

void WalLog::truncate_before(std::uint64_t lsn) {
  std::lock_guard lock(mu_);
  while (!entries_.empty() && entries_.front().record.lsn < lsn) {
    entries_.pop_front();
    batch_left_.pop_front();
  }
}

std::uint64_t WalLog::first_retained_lsn() const {
  std::lock_guard lock(mu_);
  return entries_.empty() ? next_lsn_ : entries_.front().record.lsn;
}

void WalLog::dump(std::ostream& out) const {
  std::lock_guard lock(mu_);
  for (const auto& e : entries_) out << encode(e.record) << '\n';
}

std::vector<WalRecord> WalLog::load(std::istream& in) {
  std::vector<WalRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(decode(line));
  }
  return out;
}

}  // namespace htapcc
