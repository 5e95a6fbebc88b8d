#include <gtest/gtest.h>

#include "htapcc/dsg.hpp"
#include "htapcc/inspect.hpp"
#include "htapcc/rss.hpp"
#include "support/oracle_support.hpp"

using namespace htapcc;
using htapcc::testing::kHsText;

namespace {

const TxnId T0 = kInitTxn;
const TxnId T1{1}, T2{2}, T3{3};

std::vector<WalRecord> numbered(const std::vector<WalPayload>& payloads) {
  std::vector<WalRecord> out;
  for (const auto& p : payloads) out.push_back({out.size() + 1, p});
  return out;
}

}  // namespace

TEST(Classify, AfterFirstCommit) {
  const auto h = parse_history(kHsText);
  const Prefix p{*end_seq_of(h, T1)};
  const auto cls = classify(txn_records(h, p), p);
  EXPECT_EQ(cls.done, (std::set<TxnId>{T0, T1}));
  EXPECT_EQ(cls.clear, (std::set<TxnId>{T0}));
  EXPECT_EQ(cls.active, (std::set<TxnId>{T2, T3}));
}

TEST(Classify, QuiescentPrefixClearsEverything) {
  const auto h = parse_history(kHsText);
  const auto cls = classify(txn_records(h, h.full()), h.full());
  EXPECT_EQ(cls.done, (std::set<TxnId>{T0, T1, T2, T3}));
  EXPECT_EQ(cls.clear, cls.done);
  EXPECT_TRUE(cls.active.empty());
}

TEST(Classify, AbortReleasesTheQuantifier) {
  const auto h = parse_history("b1 b2 w1(x,1) c1 a2 b3");
  const auto at_c1 = classify(txn_records(h, {*end_seq_of(h, T1)}), {*end_seq_of(h, T1)});
  EXPECT_EQ(at_c1.clear, (std::set<TxnId>{T0}));
  const auto cls = classify(txn_records(h, h.full()), h.full());
  EXPECT_EQ(cls.clear, (std::set<TxnId>{T0, T1}));
  EXPECT_EQ(cls.active, (std::set<TxnId>{TxnId{3}}));
  EXPECT_FALSE(cls.done.contains(T2));
}

TEST(ConstructRss, ReadOnlyAnomalyPrefixes) {
  const auto h = parse_history(kHsText);
  const auto c1 = *end_seq_of(h, T1);
  const auto c2 = *end_seq_of(h, T2);
  const auto at_c1 = construct_rss_at(h, {c1});
  EXPECT_EQ(at_c1.members(txn_records(h, {c1})), (std::set<TxnId>{T0}));
  const auto at_c2 = construct_rss_at(h, {c2});
  EXPECT_EQ(at_c2.members(txn_records(h, {c2})), (std::set<TxnId>{T0}));
  const auto all = construct_rss_at(h, h.full());
  EXPECT_EQ(all.members(txn_records(h, h.full())), (std::set<TxnId>{T0, T1, T2, T3}));
}

TEST(ConstructRss, AddsDirectReadersOfClearWriters) {
  // T1 commits while T3 is active, so T1 is not clear, but T1 read x before
  // T2 overwrote it and T2 is clear.
  const auto h = parse_history("b1 r1(x,T0,0) b2 w2(x,5) c2 b3 w1(y,1) c1");
  const Prefix p = h.full();
  const auto records = txn_records(h, p);
  const auto cls = classify(records, p);
  EXPECT_EQ(cls.clear, (std::set<TxnId>{T0, T2}));
  const auto rss = construct_rss_at(h, p);
  EXPECT_EQ(rss.extra, std::set<TxnId>{T1});
  EXPECT_EQ(rss.members(records), (std::set<TxnId>{T0, T1, T2}));
  EXPECT_TRUE(verify_rss(build_dsg(committed_projection(h, p)), rss.members(records)));
}

TEST(ConstructRss, DefersWithoutDependencyData) {
  const auto h = parse_history(kHsText);
  const Prefix p{*end_seq_of(h, T2)};
  const auto records = txn_records(h, p);
  const auto cls = classify(records, p);
  DepGraphShard deps;
  deps.add(T1, {});
  EXPECT_FALSE(construct_rss(cls, records, deps, p, 1).has_value());
  deps.add(T2, {T1});
  const auto rss = construct_rss(cls, records, deps, p, 4);
  ASSERT_TRUE(rss.has_value());
  EXPECT_EQ(rss->epoch, 4u);
  EXPECT_EQ(rss->basis_prefix, p.up_to);
}

TEST(Materialize, Examples) {
  const auto h = parse_history(kHsText);
  const auto store = version_store_from(h, h.full());
  RssSet only_t0{1, h.full().up_to, 1, {}};
  const auto zero = materialize(only_t0, store);
  EXPECT_EQ(zero.read_map.at("x"), (SnapshotEntry{T0, 0, 0}));
  EXPECT_EQ(zero.read_map.at("y"), (SnapshotEntry{T0, 0, 0}));
  EXPECT_EQ(zero.watermark, 0u);

  RssSet with_t1{2, h.full().up_to, 1, {T1}};
  const auto snap = materialize(with_t1, store);
  EXPECT_EQ(snap.read_map.at("y"), (SnapshotEntry{T1, 20, 1}));
  EXPECT_EQ(snap.read_map.at("x"), (SnapshotEntry{T0, 0, 0}));

  const auto all = materialize(construct_rss_at(h, h.full()), store);
  EXPECT_EQ(all.read_map.at("x"), (SnapshotEntry{T2, -11, 2}));
  EXPECT_EQ(all.read_map.at("y"), (SnapshotEntry{T1, 20, 1}));
}

TEST(Materialize, PrunedPastMemberIsHardFailure) {
  const auto h = parse_history("b1 w1(x,1) c1 b2 w2(x,2) c2");
  auto store = version_store_from(h, h.full());
  EXPECT_EQ(prune_chain(store.at("x"), 2), 2u);
  EXPECT_THROW(materialize(RssSet{1, 0, 1, {}}, store), RetentionViolation);
}

TEST(GcHorizon, Examples) {
  EXPECT_EQ(gc_horizon({}, {}, 17), 17u);
  EXPECT_EQ(gc_horizon({4, 9}, {}, 17), 4u);
  EXPECT_EQ(gc_horizon({9}, {6, 12}, 17), 6u);
}

TEST(PruneChain, KeepsNewestAtOrBelowHorizon) {
  VersionChain c;
  for (std::uint64_t s : {0, 2, 5, 9}) c.versions.push_back({TxnId{s}, 0, s, s});
  EXPECT_EQ(prune_chain(c, 1), 0u);
  EXPECT_EQ(prune_chain(c, 6), 2u);
  ASSERT_EQ(c.versions.size(), 2u);
  EXPECT_EQ(c.versions.front().commit_seq, 5u);
  EXPECT_TRUE(c.pruned);
}

TEST(SnapshotRegistry, OldEpochPinsWatermarkUntilReleased) {
  SnapshotRegistry reg;
  auto e1 = std::make_shared<RssSnapshot>();
  e1->rss.epoch = 1;
  e1->watermark = 3;
  reg.publish(e1);
  std::shared_ptr<const RssSnapshot> session = reg.current();
  e1.reset();
  auto e2 = std::make_shared<RssSnapshot>();
  e2->rss.epoch = 2;
  e2->watermark = 8;
  reg.publish(e2);
  e2.reset();
  EXPECT_EQ(reg.current()->rss.epoch, 2u);
  EXPECT_EQ(session->rss.epoch, 1u);
  EXPECT_EQ(reg.min_live_watermark(), 3u);
  session.reset();
  EXPECT_EQ(reg.min_live_watermark(), 8u);
  EXPECT_EQ(reg.published_count(), 2u);
}

TEST(RssManager, EmptyStreamServesZeros) {
  RssManager m({"x", "y"});
  const auto snap = m.construct();
  EXPECT_EQ(snap.rss.epoch, 1u);
  EXPECT_EQ(snap.read_map.at("x"), (SnapshotEntry{T0, 0, 0}));
  EXPECT_EQ(snap.read_map.at("y"), (SnapshotEntry{T0, 0, 0}));
}

TEST(RssManager, ReadOnlyAnomalyStream) {
  const auto h = parse_history(kHsText);
  const auto stream = numbered(wal_from_history(h));
  RssManager m({"x", "y"});
  const auto c2 = *end_seq_of(h, T2);
  std::size_t i = 0;
  for (; i < stream.size(); ++i) {
    m.apply(stream[i]);
    if (const auto* c = std::get_if<CommitRec>(&stream[i].payload); c && c->pos == c2) break;
  }
  // T2's commit announces a dependency and is held until it arrives.
  EXPECT_EQ(m.basis_prefix(), *end_seq_of(h, T1));
  m.apply(stream[++i]);
  EXPECT_EQ(m.basis_prefix(), c2);
  auto snap = m.construct();
  EXPECT_EQ(snap.rss.clear_frontier, 1 + h.init_ops() + 1);  // T3's Begin
  EXPECT_TRUE(snap.rss.extra.empty());
  EXPECT_EQ(snap.read_map.at("x").creator, T0);
  EXPECT_EQ(snap.read_map.at("y").creator, T0);
  for (++i; i < stream.size(); ++i) m.apply(stream[i]);
  snap = m.construct();
  EXPECT_EQ(snap.read_map.at("x"), (SnapshotEntry{T2, -11, 2}));
  EXPECT_EQ(snap.read_map.at("y"), (SnapshotEntry{T1, 20, 1}));
  EXPECT_EQ(snap.rss.epoch, 2u);
}

TEST(RssManager, DuplicatesIgnoredGapsRejected) {
  RssManager m({"x"});
  m.apply({1, BeginRec{T1, 2}});
  m.apply({1, BeginRec{T1, 2}});
  EXPECT_EQ(m.applied_lsn(), 1u);
  EXPECT_THROW(m.apply({3, BeginRec{T2, 3}}), WalFormatError);
}

TEST(RssManager, MatchesOfflineConstructionAtEveryPrefix) {
  const auto h = parse_history(
      "b1 r1(x,T0,0) b2 w2(x,5) c2 b3 w1(y,1) c1 r3(y,T0,0) b4 w4(z,1) c4 c3");
  const auto stream = numbered(wal_from_history(h));
  RssManager m({"x", "y", "z"});
  for (const auto& rec : stream) {
    m.apply(rec);
    const auto snap = m.construct();
    const Prefix p{m.basis_prefix()};
    const auto records = txn_records(h, p);
    const auto offline = construct_rss_at(h, p);
    EXPECT_EQ(snap.rss.members(records), offline.members(records)) << "lsn " << rec.lsn;
    const auto store = version_store_from(h, p);
    EXPECT_EQ(snap.read_map, materialize(offline, store).read_map);
  }
}

TEST(RssManager, GcNeverPrunesBelowClearHorizon) {
  const auto h = parse_history("b9 b1 w1(x,1) c1 b2 w2(x,2) c2");
  RssManager m({"x"});
  for (const auto& rec : numbered(wal_from_history(h))) m.apply(rec);
  auto snap = m.construct();
  EXPECT_EQ(snap.read_map.at("x").creator, T0);
  // T9 is still active: T1, T2 are not clear, so their predecessor stays.
  EXPECT_EQ(m.gc(100), 0u);
  EXPECT_EQ(materialize(snap.rss, m.store()).read_map.at("x").creator, T0);
}

TEST(RssDump, AfterFirstCommit) {
  const auto h = parse_history(kHsText);
  const auto d = rss_dump(h, parse_prefix(h, "c1"));
  EXPECT_EQ(d.prefix.up_to, *end_seq_of(h, T1));
  EXPECT_EQ(d.cls.clear, std::set<TxnId>{T0});
  EXPECT_EQ(d.cls.active, (std::set<TxnId>{T2, T3}));
  EXPECT_EQ(d.members, std::set<TxnId>{T0});
  EXPECT_EQ(d.snapshot.read_map.at("y"), (SnapshotEntry{T0, 0, 0}));
  EXPECT_TRUE(d.verified);
  EXPECT_NE(to_json(d).find("\"verdict\": \"verified\""), std::string::npos);
}

TEST(RssDump, QuiescentPrefixHasEveryCommittedTransaction) {
  const auto h = parse_history(kHsText);
  const auto d = rss_dump(h, h.full());
  EXPECT_EQ(d.members, h.committed());
  EXPECT_EQ(d.snapshot.read_map.at("x").creator, T2);
  EXPECT_TRUE(d.verified);
}

TEST(RssDump, VerifiedAtEveryPrefix) {
  const auto h = parse_history(
      "b1 b2 r1(x,T0,0) r2(y,T0,0) w1(y,1) w2(x,2) c1 b3 r3(y,T1,1) c3 c2 b4 r4(x,T2,2) w4(y,4) c4");
  for (std::uint64_t p = h.init_ops() - 1; p <= h.last_seq(); ++p) {
    EXPECT_TRUE(rss_dump(h, {p}).verified) << "prefix " << p;
  }
}

TEST(ParsePrefix, PositionsAndTransactionEnds) {
  const auto h = parse_history("b1 w1(x,1) c1 b2 a2");
  EXPECT_EQ(parse_prefix(h, "3").up_to, 3u);
  EXPECT_EQ(parse_prefix(h, "c1").up_to, *end_seq_of(h, T1));
  EXPECT_EQ(parse_prefix(h, "a2").up_to, *end_seq_of(h, T2));
  EXPECT_THROW(parse_prefix(h, "a1"), std::invalid_argument);
  EXPECT_THROW(parse_prefix(h, "c9"), std::invalid_argument);
  EXPECT_THROW(parse_prefix(h, "99"), std::invalid_argument);
  EXPECT_THROW(parse_prefix(h, "x"), std::invalid_argument);
  EXPECT_THROW(parse_prefix(h, ""), std::invalid_argument);
}
