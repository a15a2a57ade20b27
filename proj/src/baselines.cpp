#include "bucketserve/baselines.hpp"

#include <algorithm>
#include <charconv>
#include <limits>

#include "bucketserve/errors.hpp"

namespace bucketserve {

PolicyKind parse_policy(const std::string& s) {
  if (s == "bucketserve") return BucketServePolicy{};
  if (s == "continuous") return ContinuousNoBucketPolicy{};
  if (s.rfind("static:", 0) == 0) {
    std::size_t n = 0;
    const char* b = s.data() + 7;
    const char* e = s.data() + s.size();
    auto res = std::from_chars(b, e, n);
    if (res.ec != std::errc() || res.ptr != e || n < 1)
      throw ConfigError("policy", "static batch size must be an integer >= 1");
    return StaticBatchPolicy{n};
  }
  throw ConfigError("policy", "unknown policy '" + s + "'");
}

std::string to_config_string(const PolicyKind& p) {
  if (std::holds_alternative<BucketServePolicy>(p)) return "bucketserve";
  if (auto* s = std::get_if<StaticBatchPolicy>(&p))
    return "static:" + std::to_string(s->fixed_n);
  return "continuous";
}

std::string policy_label(const PolicyKind& p) {
  if (std::holds_alternative<BucketServePolicy>(p)) return "bucketserve";
  if (std::holds_alternative<StaticBatchPolicy>(p)) return "static-proxy";
  return "continuous-proxy";
}

StaticResult schedule_static(std::deque<QueuedRequest>& queue,
                             std::size_t fixed_n, const ModelConfig& model,
                             Bytes safe_memory, Bytes pledged, bool flush,
                             Seconds now, Tokens reserve_tokens) {
  if (fixed_n < 1) throw DomainError("fixed_n must be >= 1");
  StaticResult result;
  // Rows stay padded to S_max + t through decode, so the reservation may
  // exceed L_max.
  auto padded_bytes = [&](Tokens s_max, std::size_t n) {
    auto v = static_cast<unsigned __int128>(model.bytes_per_token()) *
             static_cast<unsigned __int128>(s_max + reserve_tokens) * n;
    if (v > std::numeric_limits<Bytes>::max())
      throw DomainError("static batch footprint overflows 64 bits");
    return static_cast<Bytes>(v);
  };

  std::erase_if(queue, [&](const QueuedRequest& r) {
    bool oversize = padded_bytes(r.input_len, 1) > safe_memory;
    if (oversize) result.rejected.push_back(r.id);
    return oversize;
  });
  if (queue.empty() || (queue.size() < fixed_n && !flush)) return result;

  std::size_t n = std::min(fixed_n, queue.size());
  Bytes headroom = safe_memory > pledged ? safe_memory - pledged : 0;
  auto footprint = [&](std::size_t count) {
    Tokens s_max = 0;
    for (std::size_t i = 0; i < count; ++i)
      s_max = std::max(s_max, queue[i].input_len);
    return padded_bytes(s_max, count);
  };
  while (footprint(n) > headroom) {
    if (n == 1) return result;
    n /= 2;
    ++result.halvings;
  }

  BatchPlan plan;
  plan.created_at = now;
  plan.source_bucket = TokenRange{0, model.max_seq_len};
  plan.task_class = queue.front().task_class;
  for (std::size_t i = 0; i < n; ++i) {
    plan.ids.push_back(queue[i].id);
    plan.lengths.push_back(queue[i].input_len);
    plan.s_max = std::max(plan.s_max, queue[i].input_len);
    plan.token_sum += queue[i].input_len;
  }
  plan.footprint = footprint(n);
  queue.erase(queue.begin(), queue.begin() + static_cast<std::ptrdiff_t>(n));
  result.plan = std::move(plan);
  return result;
}

FormResult schedule_continuous_nobucket(Bucket& queue, TaskClass c,
                                        const ModelConfig& model,
                                        Bytes safe_memory, Bytes pledged,
                                        MemoryAccounting accounting,
                                        Seconds now) {
  BatchContext ctx{&model, safe_memory, pledged, accounting,
                   DispatchPolicy::Fcfs, now};
  return form_batch(queue, c, ctx);
}

}  // namespace bucketserve
