#include <random>

#include <gtest/gtest.h>

#include "bucketserve/bucket_manager.hpp"
#include "bucketserve/errors.hpp"

using namespace bucketserve;

namespace {

QueuedRequest req(RequestId id, Tokens len, Seconds at = 0.0,
                  TaskClass c = TaskClass::Online) {
  return {id, len, at, c};
}

}  // namespace

TEST(Assign, SingleBucketAbsorbsEverything) {
  BucketSet set(4096);
  EXPECT_EQ(set.assign(req(0, 83)), 0u);
  EXPECT_EQ(set.total_requests(), 1u);
}

TEST(Assign, HalfOpenBoundaries) {
  auto set = BucketSet::from_ranges(1024, {{0, 256}, {256, 1024}});
  EXPECT_EQ(set.assign(req(0, 256)), 1u);
  EXPECT_EQ(set.assign(req(1, 255)), 0u);
  EXPECT_EQ(set.assign(req(2, 0)), 0u);
  EXPECT_THROW(set.assign(req(3, 1024)), DomainError);
  EXPECT_THROW(set.assign(req(4, -1)), DomainError);
}

TEST(Adjust, SplitAtMidpoint) {
  BucketSet set(2048);
  for (int i = 0; i < 12; ++i) set.assign(req(i, 100 + i));
  for (int i = 12; i < 20; ++i) set.assign(req(i, 1500));
  auto changes = set.adjust_buckets(16, 3.0);
  ASSERT_EQ(set.size(), 2u);
  EXPECT_EQ(set.bucket(0).range(), (TokenRange{0, 1024}));
  EXPECT_EQ(set.bucket(1).range(), (TokenRange{1024, 2048}));
  EXPECT_EQ(set.bucket(0).size(), 12u);
  EXPECT_EQ(set.bucket(1).size(), 8u);
  ASSERT_EQ(changes.size(), 1u);
  EXPECT_EQ(changes[0].kind, ChangeKind::Split);
  EXPECT_EQ(changes[0].midpoint, 1024);
  EXPECT_DOUBLE_EQ(changes[0].time, 3.0);
}

TEST(Adjust, MergeWhenBelowNmax) {
  auto set = BucketSet::from_ranges(2048, {{0, 1024}, {1024, 2048}});
  set.assign(req(0, 10, 2.0));
  set.assign(req(1, 1500, 1.0));
  set.assign(req(2, 20, 3.0));
  auto changes = set.adjust_buckets(16);
  ASSERT_EQ(set.size(), 1u);
  EXPECT_EQ(set.bucket(0).range(), (TokenRange{0, 2048}));
  ASSERT_EQ(set.bucket(0).size(), 3u);
  // Arrival order is preserved across the merge.
  EXPECT_EQ(set.bucket(0).requests()[0].id, 1);
  EXPECT_EQ(set.bucket(0).requests()[1].id, 0);
  ASSERT_EQ(changes.size(), 1u);
  EXPECT_EQ(changes[0].kind, ChangeKind::Merge);
  // Already merged: nothing further to do.
  EXPECT_TRUE(set.adjust_buckets(16).empty());
}

TEST(Adjust, NoSplitBelowThreshold) {
  BucketSet set(2048);
  for (int i = 0; i < 8; ++i) set.assign(req(i, 100));
  for (int i = 8; i < 20; ++i) set.assign(req(i, 1500));
  EXPECT_TRUE(set.adjust_buckets(16).empty());
  EXPECT_EQ(set.size(), 1u);
}

TEST(Adjust, NoSplitAtOrBelowMinSize) {
  BucketSet set(2048);
  for (int i = 0; i < 16; ++i) set.assign(req(i, 100));
  EXPECT_TRUE(set.adjust_buckets(16).empty());
}

TEST(Adjust, OnePassPerCall) {
  BucketSet set(4096);
  for (int i = 0; i < 40; ++i) set.assign(req(i, 10));
  set.adjust_buckets(4);
  EXPECT_EQ(set.size(), 2u);
  set.adjust_buckets(4);
  EXPECT_EQ(set.size(), 3u);
}

TEST(Adjust, WidthOneBucketIsSkipped) {
  auto set = BucketSet::from_ranges(4, {{0, 1}, {1, 4}});
  for (int i = 0; i < 10; ++i) set.assign(req(i, 0));
  auto changes = set.adjust_buckets(2);
  ASSERT_EQ(changes.size(), 1u);
  EXPECT_EQ(changes[0].kind, ChangeKind::Skip);
  EXPECT_EQ(changes[0].parent, (TokenRange{0, 1}));
  EXPECT_EQ(set.size(), 2u);
}

TEST(Adjust, ShortCountUsesRealMidpoint) {
  Bucket b(TokenRange{0, 5});  // real midpoint 2.5, split point 2
  for (Tokens s : {0, 1, 2, 3, 4}) b.push(req(s, s));
  EXPECT_EQ(b.below_midpoint(), 3u);
  EXPECT_EQ(b.midpoint(), 2);
}

TEST(Adjust, ThetaOneNeverSplits) {
  BucketSet set(4096, 1.0);
  for (int i = 0; i < 100; ++i) set.assign(req(i, 1));
  EXPECT_TRUE(set.adjust_buckets(2).empty());
}

TEST(Adjust, CountersLinearInBuckets) {
  std::vector<TokenRange> r;
  for (Tokens i = 0; i < 64; ++i) r.push_back({i * 64, (i + 1) * 64});
  auto set = BucketSet::from_ranges(4096, r);
  for (int i = 0; i < 200; ++i) set.assign(req(i, (i * 37) % 4096));
  set.reset_counters();
  set.adjust_buckets(1000000);  // merges
  EXPECT_LE(set.counters().buckets_visited, 64u * 2);
}

TEST(Partition, Checks) {
  EXPECT_FALSE(BucketSet(4096).check_partition());
  auto gap = BucketSet::from_ranges(300, {{0, 100}, {200, 300}});
  auto v = gap.check_partition();
  ASSERT_TRUE(v);
  EXPECT_EQ(v->kind, PartitionViolation::Kind::Gap);
  EXPECT_EQ(v->range, (TokenRange{100, 200}));
  auto mis = BucketSet::from_ranges(300, {{0, 100}, {100, 200}, {200, 300}});
  mis.push_unchecked(1, req(7, 50));
  v = mis.check_partition();
  ASSERT_TRUE(v);
  EXPECT_EQ(v->kind, PartitionViolation::Kind::Misfiled);
  EXPECT_EQ(v->request, 7);
  auto over = BucketSet::from_ranges(300, {{0, 150}, {100, 300}});
  EXPECT_EQ(over.check_partition()->kind, PartitionViolation::Kind::Overlap);
}

TEST(Partition, FuzzKeepsInvariant) {
  std::mt19937_64 rng(5);
  BucketSet set(4096, 0.5);
  RequestId next = 0;
  std::vector<RequestId> live;
  for (int op = 0; op < 20000; ++op) {
    auto r = rng() % 10;
    if (r < 6) {
      Tokens len = static_cast<Tokens>(rng() % 2 ? rng() % 200 : rng() % 4096);
      set.assign(req(next++, len, op));
    } else if (r < 8) {
      set.adjust_buckets(1 + rng() % 64, op);
    } else if (set.total_requests() > 0) {
      auto& b = set.bucket(rng() % set.size());
      if (!b.empty()) {
        RequestId id = b.requests()[rng() % b.size()].id;
        b.erase(std::span<const RequestId>(&id, 1));
      }
    }
    auto v = set.check_partition();
    ASSERT_FALSE(v) << v->describe();
  }
}

TEST(Bucket, CountsTrackMutations) {
  Bucket b(TokenRange{0, 100});
  b.push(req(0, 10, 0, TaskClass::Online));
  b.push(req(1, 60, 1, TaskClass::Offline));
  b.push(req(2, 70, 2, TaskClass::Offline));
  EXPECT_EQ(b.below_midpoint(), 1u);
  EXPECT_EQ(b.count(TaskClass::Offline), 2u);
  EXPECT_EQ(b.token_mass(TaskClass::Offline), 130);
  std::vector<RequestId> ids{0, 2};
  b.erase(ids);
  EXPECT_EQ(b.size(), 1u);
  EXPECT_EQ(b.below_midpoint(), 0u);
  EXPECT_EQ(b.token_mass(TaskClass::Offline), 60);
  EXPECT_EQ(b.oldest(TaskClass::Online), nullptr);
  EXPECT_EQ(b.oldest(TaskClass::Offline)->id, 1);
}

TEST(Oracle, PointMass) {
  auto h = LengthHistogram::from_samples(std::vector<Tokens>{300, 300, 300});
  auto e = optimal_boundary_oracle(h, 0, 1000, 1e-6);
  EXPECT_TRUE(e.converged);
  EXPECT_NEAR(e.boundary, 300.0, 1e-6);
}

TEST(Oracle, TwoPointMasses) {
  auto h = LengthHistogram::from_samples(std::vector<Tokens>{100, 900});
  auto e = optimal_boundary_oracle(h, 0, 1000, 1e-6);
  EXPECT_TRUE(e.converged);
  EXPECT_NEAR(e.boundary, 100.0, 1e-6);
  EXPECT_LE(e.iterations, 5);
}

TEST(Oracle, UniformHalvesTowardZero) {
  std::vector<double> edges, counts;
  for (int i = 0; i <= 1000; ++i) edges.push_back(i);
  counts.assign(1000, 1.0);
  LengthHistogram h(edges, counts);
  auto e = optimal_boundary_oracle(h, 0, 1000, 1e-3);
  EXPECT_LT(e.boundary, 5.0);
  EXPECT_THROW(optimal_boundary_oracle(h, 0, 1000, 0.0), DomainError);
}

TEST(Assign, MatchesLinearScanWithinComparisonBound) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Tokens> cuts{0, 4096};
    for (int k = static_cast<int>(rng() % 40); k > 0; --k) cuts.push_back(1 + static_cast<Tokens>(rng() % 4095));
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    std::vector<TokenRange> ranges;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) ranges.push_back({cuts[i], cuts[i + 1]});
    auto set = BucketSet::from_ranges(4096, ranges);
    for (int i = 0; i < 50; ++i) {
      Tokens len = static_cast<Tokens>(rng() % 4096);
      auto before = set.counters().range_comparisons;
      std::size_t got = set.assign(req(i, len));
      auto expected = static_cast<std::size_t>(
          std::find_if(ranges.begin(), ranges.end(),
                       [&](const TokenRange& r) { return r.contains(static_cast<double>(len)); }) -
          ranges.begin());
      EXPECT_EQ(got, expected);
      EXPECT_LE(set.counters().range_comparisons - before, ranges.size());
    }
  }
}
