#include "bucketserve/batch_controller.hpp"

#include <algorithm>
#include <cmath>

#include "bucketserve/errors.hpp"

namespace bucketserve {

std::string_view to_string(DispatchPolicy p) {
  switch (p) {
    case DispatchPolicy::Sjf: return "sjf";
    case DispatchPolicy::Ljf: return "ljf";
    case DispatchPolicy::EarliestArrival: return "earliest_arrival";
    case DispatchPolicy::Fcfs: return "fcfs";
  }
  return "?";
}

DispatchPolicy parse_dispatch_policy(const std::string& s) {
  if (s == "sjf") return DispatchPolicy::Sjf;
  if (s == "ljf") return DispatchPolicy::Ljf;
  if (s == "earliest_arrival") return DispatchPolicy::EarliestArrival;
  if (s == "fcfs") return DispatchPolicy::Fcfs;
  throw ConfigError("policy", "unknown dispatch policy '" + s + "'");
}

std::vector<QueuedRequest> order_requests(std::span<const QueuedRequest> requests,
                                          DispatchPolicy policy) {
  std::vector<QueuedRequest> out(requests.begin(), requests.end());
  auto by_arrival = [](const QueuedRequest& a, const QueuedRequest& b) {
    if (a.arrival_time != b.arrival_time) return a.arrival_time < b.arrival_time;
    return a.id < b.id;
  };
  switch (policy) {
    case DispatchPolicy::Sjf:
      std::sort(out.begin(), out.end(), [&](const auto& a, const auto& b) {
        if (a.input_len != b.input_len) return a.input_len < b.input_len;
        return by_arrival(a, b);
      });
      break;
    case DispatchPolicy::Ljf:
      std::sort(out.begin(), out.end(), [&](const auto& a, const auto& b) {
        if (a.input_len != b.input_len) return a.input_len > b.input_len;
        return by_arrival(a, b);
      });
      break;
    case DispatchPolicy::EarliestArrival:
    case DispatchPolicy::Fcfs:
      std::sort(out.begin(), out.end(), by_arrival);
      break;
  }
  return out;
}

std::optional<std::size_t> select_bucket(const BucketSet& set, TaskClass c) {
  std::optional<std::size_t> best;
  if (c == TaskClass::Online) {
    const QueuedRequest* oldest = nullptr;
    for (std::size_t i = 0; i < set.size(); ++i) {
      const QueuedRequest* r = set.bucket(i).oldest(c);
      if (!r) continue;
      if (!oldest || r->arrival_time < oldest->arrival_time ||
          (r->arrival_time == oldest->arrival_time && r->id < oldest->id)) {
        oldest = r;
        best = i;
      }
    }
    return best;
  }
  Tokens best_mass = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Bucket& b = set.bucket(i);
    if (b.count(c) == 0) continue;
    if (!best || b.token_mass(c) > best_mass) {
      best = i;
      best_mass = b.token_mass(c);
    }
  }
  return best;
}

std::size_t admissible_prefix(std::span<const QueuedRequest> ordered,
                              const ModelConfig& model, Bytes headroom,
                              MemoryAccounting accounting) {
  const Bytes per_token = model.bytes_per_token();
  Tokens s_max = 0;
  Tokens sum = 0;
  std::size_t n = 0;
  for (const auto& r : ordered) {
    Tokens next_max = std::max(s_max, r.input_len);
    Tokens next_sum = sum + r.input_len;
    Tokens charged = accounting == MemoryAccounting::Exact
                         ? next_sum
                         : next_max * static_cast<Tokens>(n + 1);
    if (static_cast<unsigned __int128>(charged) * per_token > headroom) break;
    s_max = next_max;
    sum = next_sum;
    ++n;
  }
  return n;
}

FormResult form_batch(Bucket& bucket, TaskClass c, const BatchContext& ctx) {
  if (!ctx.model) throw DomainError("form_batch without a model");
  const ModelConfig& model = *ctx.model;
  FormResult result;

  std::vector<QueuedRequest> candidates;
  candidates.reserve(bucket.count(c));
  const Bytes per_token = model.bytes_per_token();
  for (const auto& r : bucket.requests()) {
    if (r.task_class != c) continue;
    if (static_cast<unsigned __int128>(r.input_len) * per_token > ctx.safe_memory)
      result.rejected.push_back(r.id);
    else
      candidates.push_back(r);
  }
  bucket.erase(result.rejected);
  if (candidates.empty()) return result;

  auto ordered = order_requests(candidates, ctx.policy);
  Bytes headroom = ctx.safe_memory > ctx.pledged ? ctx.safe_memory - ctx.pledged : 0;
  std::size_t n = admissible_prefix(ordered, model, headroom, ctx.accounting);
  if (n == 0) return result;

  BatchPlan plan;
  plan.created_at = ctx.now;
  plan.source_bucket = bucket.range();
  plan.task_class = c;
  for (std::size_t i = 0; i < n; ++i) {
    plan.ids.push_back(ordered[i].id);
    plan.lengths.push_back(ordered[i].input_len);
    plan.s_max = std::max(plan.s_max, ordered[i].input_len);
    plan.token_sum += ordered[i].input_len;
  }
  plan.footprint = kv_footprint(model, plan.lengths, ctx.accounting);
  bucket.erase(plan.ids);
  result.plan = std::move(plan);
  return result;
}

BatchController::BatchController(ModelConfig model, Bytes safe_memory)
    : model_(model) {
  on_memory_change(safe_memory);
}

BatchController::Limits BatchController::on_memory_change(Bytes new_safe) {
  limits_.safe_memory = new_safe;
  limits_.token_budget = token_budget(model_, new_safe);
  return limits_;
}

std::size_t BatchController::n_max(double mean_queued_len) const {
  if (limits_.token_budget <= 0) return 0;
  if (!(mean_queued_len > 0)) return static_cast<std::size_t>(limits_.token_budget);
  return static_cast<std::size_t>(
      std::floor(static_cast<double>(limits_.token_budget) / mean_queued_len));
}

}  // namespace bucketserve
