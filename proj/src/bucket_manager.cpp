#include "bucketserve/bucket_manager.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "bucketserve/errors.hpp"

namespace bucketserve {

QueuedRequest queued_view(const Request& r) {
  return QueuedRequest{r.id, r.input_len, r.arrival_time, r.task_class};
}

const QueuedRequest* Bucket::oldest(TaskClass c) const {
  if (count(c) == 0) return nullptr;
  for (const auto& r : queue_)
    if (r.task_class == c) return &r;
  return nullptr;
}

void Bucket::push(const QueuedRequest& r) {
  queue_.push_back(r);
  if (short_of_mid(r.input_len)) ++below_mid_;
  ++class_count_[index(r.task_class)];
  class_tokens_[index(r.task_class)] += r.input_len;
}

void Bucket::erase(std::span<const RequestId> ids) {
  if (ids.empty()) return;
  std::unordered_set<RequestId> drop(ids.begin(), ids.end());
  auto keep_end = std::stable_partition(
      queue_.begin(), queue_.end(),
      [&](const QueuedRequest& r) { return !drop.contains(r.id); });
  for (auto it = keep_end; it != queue_.end(); ++it) {
    if (short_of_mid(it->input_len)) --below_mid_;
    --class_count_[index(it->task_class)];
    class_tokens_[index(it->task_class)] -= it->input_len;
  }
  queue_.erase(keep_end, queue_.end());
}

std::string_view to_string(ChangeKind k) {
  switch (k) {
    case ChangeKind::Split: return "split";
    case ChangeKind::Merge: return "merge";
    case ChangeKind::Skip: return "skip";
  }
  return "?";
}

std::string PartitionViolation::describe() const {
  std::string r = "[" + std::to_string(range.low) + ", " +
                  std::to_string(range.up) + ")";
  switch (kind) {
    case Kind::Gap: return "gap at " + r;
    case Kind::Overlap: return "overlap at " + r;
    case Kind::BadBounds: return "bad bucket bounds " + r;
    case Kind::Misfiled:
      return "request " + std::to_string(request.value_or(-1)) +
             " misfiled in " + r;
  }
  return "?";
}

BucketSet::BucketSet(Tokens l_max, double split_threshold)
    : BucketSet(l_max, split_threshold, {Bucket(TokenRange{0, l_max})}) {}

BucketSet::BucketSet(Tokens l_max, double theta, std::vector<Bucket> buckets)
    : l_max_(l_max), theta_(theta), buckets_(std::move(buckets)) {
  if (l_max < 1) throw DomainError("L_max must be >= 1");
  if (!(theta >= 0.0 && theta <= 1.0))
    throw DomainError("split threshold must lie in [0, 1]");
}

BucketSet BucketSet::from_ranges(Tokens l_max, std::vector<TokenRange> ranges,
                                 double split_threshold) {
  std::vector<Bucket> buckets;
  buckets.reserve(ranges.size());
  for (const auto& r : ranges) buckets.emplace_back(r);
  return BucketSet(l_max, split_threshold, std::move(buckets));
}

std::vector<TokenRange> BucketSet::ranges() const {
  std::vector<TokenRange> out;
  out.reserve(buckets_.size());
  for (const auto& b : buckets_) out.push_back(b.range());
  return out;
}

std::size_t BucketSet::total_requests() const {
  std::size_t total = 0;
  for (const auto& b : buckets_) total += b.size();
  return total;
}

std::size_t BucketSet::assign(const QueuedRequest& r) {
  if (r.input_len < 0 || r.input_len >= l_max_)
    throw DomainError("input_len " + std::to_string(r.input_len) +
                      " outside [0, " + std::to_string(l_max_) + ")");
  // Ranges are sorted and contiguous: binary search on the lower bounds.
  std::size_t lo = 0, hi = buckets_.size();
  while (hi - lo > 1) {
    std::size_t mid = lo + (hi - lo) / 2;
    ++counters_.range_comparisons;
    if (buckets_[mid].range().low <= r.input_len) lo = mid;
    else hi = mid;
  }
  ++counters_.range_comparisons;
  if (lo >= buckets_.size() || !buckets_[lo].range().contains(static_cast<double>(r.input_len)))
    throw DomainError("no bucket holds length " + std::to_string(r.input_len));
  buckets_[lo].push(r);
  return lo;
}

void BucketSet::push_unchecked(std::size_t i, const QueuedRequest& r) {
  buckets_.at(i).push(r);
}

std::vector<StructuralChange> BucketSet::adjust_buckets(std::size_t n_max,
                                                        Seconds now) {
  std::vector<StructuralChange> changes;
  std::size_t total = 0;
  for (const auto& b : buckets_) {
    ++counters_.buckets_visited;
    total += b.size();
  }

  if (total < n_max) {
    if (buckets_.size() == 1 && buckets_.front().range() == TokenRange{0, l_max_})
      return changes;
    std::vector<QueuedRequest> all;
    all.reserve(total);
    for (const auto& b : buckets_)
      all.insert(all.end(), b.requests().begin(), b.requests().end());
    std::sort(all.begin(), all.end(),
              [](const QueuedRequest& a, const QueuedRequest& b) {
                if (a.arrival_time != b.arrival_time)
                  return a.arrival_time < b.arrival_time;
                return a.id < b.id;
              });
    Bucket merged(TokenRange{0, l_max_});
    for (const auto& r : all) merged.push(r);
    counters_.requests_moved += all.size();
    buckets_.clear();
    buckets_.push_back(std::move(merged));
    changes.push_back({now, ChangeKind::Merge, TokenRange{0, l_max_}, {}});
    return changes;
  }

  auto wants_split = [&](const Bucket& b) {
    const std::size_t n = b.size();
    return n > n_max &&
           static_cast<double>(b.below_midpoint()) / static_cast<double>(n) > theta_;
  };
  if (std::none_of(buckets_.begin(), buckets_.end(), wants_split)) {
    counters_.buckets_visited += buckets_.size();
    return changes;
  }

  std::vector<Bucket> next;
  next.reserve(buckets_.size() * 2);
  for (auto& b : buckets_) {
    ++counters_.buckets_visited;
    const std::size_t n = b.size();
    if (!wants_split(b)) {
      next.push_back(std::move(b));
      continue;
    }
    const Tokens mid = b.midpoint();
    if (mid <= b.range().low) {
      changes.push_back({now, ChangeKind::Skip, b.range(), mid});
      next.push_back(std::move(b));
      continue;
    }
    Bucket left(TokenRange{b.range().low, mid});
    Bucket right(TokenRange{mid, b.range().up});
    for (const auto& r : b.requests()) (r.input_len < mid ? left : right).push(r);
    counters_.requests_moved += n;
    changes.push_back({now, ChangeKind::Split, b.range(), mid});
    next.push_back(std::move(left));
    next.push_back(std::move(right));
  }
  buckets_ = std::move(next);
  return changes;
}

std::optional<PartitionViolation> BucketSet::check_partition() const {
  using Kind = PartitionViolation::Kind;
  if (buckets_.empty())
    return PartitionViolation{Kind::Gap, TokenRange{0, l_max_}, {}};
  for (const auto& b : buckets_)
    if (b.range().low < 0 || b.range().low >= b.range().up ||
        b.range().up > l_max_)
      return PartitionViolation{Kind::BadBounds, b.range(), {}};
  if (buckets_.front().range().low != 0)
    return PartitionViolation{Kind::Gap,
                              TokenRange{0, buckets_.front().range().low}, {}};
  for (std::size_t i = 0; i + 1 < buckets_.size(); ++i) {
    Tokens up = buckets_[i].range().up;
    Tokens low = buckets_[i + 1].range().low;
    if (up < low) return PartitionViolation{Kind::Gap, TokenRange{up, low}, {}};
    if (up > low)
      return PartitionViolation{Kind::Overlap, TokenRange{low, up}, {}};
  }
  if (buckets_.back().range().up != l_max_)
    return PartitionViolation{
        Kind::Gap, TokenRange{buckets_.back().range().up, l_max_}, {}};
  for (const auto& b : buckets_)
    for (const auto& r : b.requests())
      if (!b.range().contains(static_cast<double>(r.input_len)))
        return PartitionViolation{Kind::Misfiled, b.range(), r.id};
  return std::nullopt;
}

BoundaryEstimate optimal_boundary_oracle(const LengthHistogram& hist,
                                         Tokens low, Tokens up, double tol) {
  if (!(tol > 0)) throw DomainError("tolerance must be > 0");
  if (!(low < up)) throw DomainError("empty interval");
  const double lo = static_cast<double>(low);
  if (hist.mass(lo, static_cast<double>(up)) <= 0)
    throw DomainError("no mass in [" + std::to_string(low) + ", " +
                      std::to_string(up) + ")");
  const double step_floor = tol * static_cast<double>(up - low);
  BoundaryEstimate est{static_cast<double>(up), 0, false};
  while (est.iterations < 100) {
    // First step uses the bucket's own half-open range; afterwards the
    // candidate boundary itself is included so a point mass is a fixed point.
    auto next = hist.conditional_mean(lo, est.boundary, est.iterations > 0);
    if (!next) break;
    ++est.iterations;
    double delta = std::abs(*next - est.boundary);
    est.boundary = *next;
    if (delta < step_floor) {
      est.converged = true;
      break;
    }
  }
  return est;
}

}  // namespace bucketserve
