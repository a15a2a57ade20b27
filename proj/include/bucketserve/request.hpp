#pragma once

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace bucketserve {

using RequestId = std::int64_t;
using Tokens = std::int64_t;
using Bytes = std::uint64_t;
using Seconds = double;

enum class TaskClass { Online, Offline };
enum class RequestStatus { Pending, Completed, Rejected };

std::string_view to_string(TaskClass c);

struct RequestTimestamps {
  std::optional<Seconds> enqueue;
  std::optional<Seconds> prefill_start;
  std::optional<Seconds> prefill_end;
  std::optional<Seconds> transfer_end;
  std::optional<Seconds> first_token;
  std::optional<Seconds> completion;
  bool operator==(const RequestTimestamps&) const = default;
};

// One inference job. output_len is hidden from the schedulers; only the
// decode simulator consumes it, one token per step.
struct Request {
  RequestId id = 0;
  Seconds arrival_time = 0.0;
  Tokens input_len = 1;
  Tokens output_len = 1;
  TaskClass task_class = TaskClass::Online;
  std::optional<Seconds> slo_ttft;
  std::optional<Seconds> slo_e2e;
  RequestTimestamps ts;
  RequestStatus status = RequestStatus::Pending;

  bool operator==(const Request&) const = default;
};

// Requests sorted by arrival_time, unique ids.
using Trace = std::vector<Request>;

}  // namespace bucketserve
