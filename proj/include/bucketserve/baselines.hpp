#pragma once

#include <deque>
#include <optional>
#include <string>
#include <variant>

#include "bucketserve/batch_controller.hpp"

namespace bucketserve {

struct BucketServePolicy {};
struct StaticBatchPolicy {
  std::size_t fixed_n = 8;
};
struct ContinuousNoBucketPolicy {};

using PolicyKind =
    std::variant<BucketServePolicy, StaticBatchPolicy, ContinuousNoBucketPolicy>;

// "bucketserve", "static:<n>" or "continuous". Throws ConfigError.
PolicyKind parse_policy(const std::string& s);
std::string to_config_string(const PolicyKind& p);
// Report label: "bucketserve", "static-proxy" or "continuous-proxy".
std::string policy_label(const PolicyKind& p);

struct StaticResult {
  std::optional<BatchPlan> plan;
  int halvings = 0;
  std::vector<RequestId> rejected;
};

// Fixed-size FCFS batching without buckets. Takes the first fixed_n
// requests (fewer only when `flush` is set, i.e. no more arrivals are
// coming) and charges them padded at S_max + reserve_tokens per row.
// If that exceeds safe_memory - pledged the batch size is halved until it
// fits. Requests that cannot fit even alone are rejected.
StaticResult schedule_static(std::deque<QueuedRequest>& queue,
                             std::size_t fixed_n, const ModelConfig& model,
                             Bytes safe_memory, Bytes pledged, bool flush,
                             Seconds now, Tokens reserve_tokens = 0);

// Continuous batching over one global FCFS queue: form_batch on the single
// implicit bucket [0, L_max) with Fcfs ordering.
FormResult schedule_continuous_nobucket(Bucket& queue, TaskClass c,
                                        const ModelConfig& model,
                                        Bytes safe_memory, Bytes pledged,
                                        MemoryAccounting accounting,
                                        Seconds now);

}  // namespace bucketserve
