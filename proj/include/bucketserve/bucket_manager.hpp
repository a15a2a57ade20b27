#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bucketserve/memory_model.hpp"
#include "bucketserve/request.hpp"

namespace bucketserve {

// What the scheduler sees of a waiting request: no output length.
struct QueuedRequest {
  RequestId id = 0;
  Tokens input_len = 1;
  Seconds arrival_time = 0.0;
  TaskClass task_class = TaskClass::Online;
  bool operator==(const QueuedRequest&) const = default;
};

QueuedRequest queued_view(const Request& r);

// A half-open length interval with its FIFO queue. Per-class counts, token
// mass and the below-midpoint count are maintained on every mutation so
// that bucket-level decisions are O(1).
class Bucket {
 public:
  explicit Bucket(TokenRange range) : range_(range) {}

  const TokenRange& range() const { return range_; }
  // Integer split point. The short count below uses the real midpoint, so a
  // width-1 bucket can qualify for a split that then has to be skipped.
  Tokens midpoint() const { return (range_.low + range_.up) / 2; }
  const std::vector<QueuedRequest>& requests() const { return queue_; }
  std::size_t size() const { return queue_.size(); }
  bool empty() const { return queue_.empty(); }

  std::size_t below_midpoint() const { return below_mid_; }
  std::size_t count(TaskClass c) const { return class_count_[index(c)]; }
  Tokens token_mass(TaskClass c) const { return class_tokens_[index(c)]; }

  // Oldest queued request of class `c` (queues are kept in arrival order).
  const QueuedRequest* oldest(TaskClass c) const;

  void push(const QueuedRequest& r);
  // Removes the listed ids; order of the remaining queue is unchanged.
  void erase(std::span<const RequestId> ids);

 private:
  bool short_of_mid(Tokens s) const { return 2 * s < range_.low + range_.up; }
  static std::size_t index(TaskClass c) { return c == TaskClass::Online ? 0 : 1; }

  TokenRange range_;
  std::vector<QueuedRequest> queue_;
  std::size_t below_mid_ = 0;
  std::size_t class_count_[2] = {0, 0};
  Tokens class_tokens_[2] = {0, 0};
};

enum class ChangeKind { Split, Merge, Skip };

std::string_view to_string(ChangeKind k);

struct StructuralChange {
  Seconds time = 0.0;
  ChangeKind kind = ChangeKind::Split;
  TokenRange parent;
  std::optional<Tokens> midpoint;
  bool operator==(const StructuralChange&) const = default;
};

struct PartitionViolation {
  enum class Kind { Gap, Overlap, BadBounds, Misfiled };
  Kind kind;
  TokenRange range;  // the gap/overlap, or the bucket holding a misfiled request
  std::optional<RequestId> request;
  std::string describe() const;
};

// Work counters for complexity assertions.
struct BucketOpCounters {
  std::uint64_t range_comparisons = 0;  // assign
  std::uint64_t buckets_visited = 0;    // adjust_buckets
  std::uint64_t requests_moved = 0;     // split partitioning and merges
};

// Ordered bucket list covering [0, L_max). Single writer.
class BucketSet {
 public:
  explicit BucketSet(Tokens l_max, double split_threshold = 0.5);

  // Arbitrary ranges, no validation. For tests of check_partition and for
  // benchmarking with a fixed bucket count.
  static BucketSet from_ranges(Tokens l_max, std::vector<TokenRange> ranges,
                               double split_threshold = 0.5);

  Tokens l_max() const { return l_max_; }
  double split_threshold() const { return theta_; }
  std::size_t size() const { return buckets_.size(); }
  const std::vector<Bucket>& buckets() const { return buckets_; }
  Bucket& bucket(std::size_t i) { return buckets_.at(i); }
  const Bucket& bucket(std::size_t i) const { return buckets_.at(i); }
  std::vector<TokenRange> ranges() const;
  std::size_t total_requests() const;

  // Linear scan; appends to the matching bucket and returns its index.
  // Throws DomainError if input_len is outside [0, L_max).
  std::size_t assign(const QueuedRequest& r);

  // Places `r` in bucket `i` without a membership check (test hook).
  void push_unchecked(std::size_t i, const QueuedRequest& r);

  // One pass of the adjustment step. `n_max` doubles as the minimum split
  // size. Returns the structural changes made.
  std::vector<StructuralChange> adjust_buckets(std::size_t n_max,
                                               Seconds now = 0.0);

  std::optional<PartitionViolation> check_partition() const;

  const BucketOpCounters& counters() const { return counters_; }
  void reset_counters() { counters_ = {}; }

 private:
  BucketSet(Tokens l_max, double theta, std::vector<Bucket> buckets);

  Tokens l_max_;
  double theta_;
  std::vector<Bucket> buckets_;
  BucketOpCounters counters_;
};

struct BoundaryEstimate {
  double boundary = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Fixed-point iteration U <- E[S | low <= S < U] starting from U = up,
// stopping once successive values differ by < tol * (up - low), the
// interval runs out of mass, or after 100 iterations. Reference only; the
// runtime uses midpoint bisection. Throws DomainError if [low, up) holds no
// mass or tol <= 0.
BoundaryEstimate optimal_boundary_oracle(const LengthHistogram& hist,
                                         Tokens low, Tokens up, double tol);

}  // namespace bucketserve
