#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bucketserve/bucket_manager.hpp"
#include "bucketserve/memory_model.hpp"

namespace bucketserve {

enum class DispatchPolicy { Sjf, Ljf, EarliestArrival, Fcfs };

std::string_view to_string(DispatchPolicy p);
DispatchPolicy parse_dispatch_policy(const std::string& s);

struct ClassPolicies {
  DispatchPolicy online = DispatchPolicy::EarliestArrival;
  DispatchPolicy offline = DispatchPolicy::Sjf;
  DispatchPolicy for_class(TaskClass c) const {
    return c == TaskClass::Online ? online : offline;
  }
};

// Requests released together for prefill. Bucket-pure and class-pure.
struct BatchPlan {
  std::vector<RequestId> ids;  // dispatch order
  std::vector<Tokens> lengths;
  Tokens s_max = 0;
  Tokens token_sum = 0;
  Bytes footprint = 0;
  Seconds created_at = 0.0;
  TokenRange source_bucket;
  TaskClass task_class = TaskClass::Online;
  std::size_t size() const { return ids.size(); }
};

// Sjf: ascending input_len; Ljf: descending; ties by arrival then id.
// Fcfs/EarliestArrival: ascending arrival, ties by id.
std::vector<QueuedRequest> order_requests(std::span<const QueuedRequest> requests,
                                          DispatchPolicy policy);

// Online: the bucket holding the globally oldest waiting online request.
// Offline: the bucket with the largest queued offline token mass (lowest
// index on ties). nullopt if no bucket holds a request of that class.
std::optional<std::size_t> select_bucket(const BucketSet& set, TaskClass c);

struct BatchContext {
  const ModelConfig* model = nullptr;
  Bytes safe_memory = 0;
  Bytes pledged = 0;  // already committed to in-flight batches
  MemoryAccounting accounting = MemoryAccounting::Padded;
  DispatchPolicy policy = DispatchPolicy::Fcfs;
  Seconds now = 0.0;
};

struct FormResult {
  std::optional<BatchPlan> plan;
  // Requests whose solo footprint exceeds safe_memory; removed for good.
  std::vector<RequestId> rejected;
};

// Longest prefix of `ordered` whose footprint fits `headroom`.
std::size_t admissible_prefix(std::span<const QueuedRequest> ordered,
                              const ModelConfig& model, Bytes headroom,
                              MemoryAccounting accounting);

// Orders the class-`c` requests of `bucket` by ctx.policy and admits the
// longest prefix fitting safe_memory - pledged. Admitted and rejected
// requests are removed from the bucket; the rest keep their order.
FormResult form_batch(Bucket& bucket, TaskClass c, const BatchContext& ctx);

// Live token budget and the N_max handed to the bucket manager.
class BatchController {
 public:
  BatchController(ModelConfig model, Bytes safe_memory);

  struct Limits {
    Bytes safe_memory = 0;
    Tokens token_budget = 0;
  };

  Limits on_memory_change(Bytes new_safe);
  const Limits& limits() const { return limits_; }

  // floor(token_budget / mean queued input length); 0 when the budget is 0.
  std::size_t n_max(double mean_queued_len) const;

 private:
  ModelConfig model_;
  Limits limits_;
};

}  // namespace bucketserve
