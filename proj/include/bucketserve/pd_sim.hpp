#pragma once

#include <deque>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

#include "bucketserve/baselines.hpp"
#include "bucketserve/batch_controller.hpp"
#include "bucketserve/memory_model.hpp"
#include "bucketserve/metrics.hpp"
#include "bucketserve/request.hpp"

namespace bucketserve {

// Linear execution-time model: prefill is compute-bound (per token), decode
// is bandwidth-bound (per resident KV byte). Coefficients are calibration
// knobs, not measurements.
struct CostModel {
  Seconds prefill_base = 5e-3;
  Seconds prefill_per_token = 0.5e-6;
  Seconds decode_step_base = 3e-3;
  // ~60 ms for a step over a 40 GiB resident KV footprint.
  double decode_per_kv_byte = 0.057 / static_cast<double>(40ULL << 30);
  double transfer_bandwidth = 600e9;  // bytes/s
  Seconds transfer_latency = 1e-4;
  bool operator==(const CostModel&) const = default;
};

void validate(const CostModel& cost);

struct ClusterConfig {
  std::size_t prefill_workers = 1;
  std::size_t decode_workers = 1;
  GpuConfig gpu;
  bool operator==(const ClusterConfig&) const = default;
};

// What happens to a decode slot suspended for memory: Retain keeps its KV
// (free resume), Recompute re-runs prefill over its context on resume.
enum class ResumeMode { Retain, Recompute };

struct SimConfig {
  ModelConfig model;
  ClusterConfig cluster;
  CostModel cost;
  PolicyKind policy = BucketServePolicy{};
  ClassPolicies dispatch;
  MemoryAccounting accounting = MemoryAccounting::Padded;
  double split_threshold = 0.5;
  Seconds tick_interval = 0.05;
  SloConfig slo;
  // Decode headroom reserved per row by the static baseline.
  Tokens max_output_tokens = 512;
  ResumeMode resume = ResumeMode::Retain;
  // Throw InternalError on the first memory-safety breach; otherwise count.
  bool abort_on_violation = true;
  std::ostream* event_log = nullptr;  // JSON-lines, optional
};

void validate(const SimConfig& cfg);

// prefill_base + prefill_per_token * tokens, where tokens = token_sum
// (exact) or s_max * batch size (padded).
Seconds prefill_time(const BatchPlan& plan, const CostModel& cost,
                     MemoryAccounting accounting);

// transfer_latency + bytes / transfer_bandwidth.
Seconds transfer_time(Bytes bytes, const CostModel& cost);

// decode_step_base + decode_per_kv_byte * resident KV bytes.
Seconds decode_step_time(Bytes resident_kv, const CostModel& cost);

// One continuous-batching decode slot.
struct DecodeSlot {
  std::size_t request = 0;  // index into the simulated request table
  Tokens context = 0;       // input_len + generated so far
  Tokens remaining = 0;     // hidden from the scheduler
  bool resumed = false;     // set when re-admitted after a suspension
};

// Memory-side state of one decode worker. The event loop lives in run().
class DecodeWorker {
 public:
  DecodeWorker(const ModelConfig& model, Bytes safe_memory)
      : per_token_(model.bytes_per_token()), safe_(safe_memory) {}

  enum class Admission { Admitted, Deferred };

  Bytes safe_memory() const { return safe_; }
  Bytes footprint() const;           // exact bytes of all slot contexts
  Bytes projected_footprint() const; // every slot grown by one token
  Bytes free_memory() const;

  // Admits iff nobody is waiting and the one-token lookahead fits;
  // otherwise appends to the wait queue.
  Admission admit(const DecodeSlot& slot);

  struct StepOutcome {
    std::vector<std::size_t> completed;
  };
  // Every active slot emits one token; finished slots leave.
  StepOutcome step();

  // Suspends most-recently-admitted slots until the next step's projection
  // fits. Suspended slots go to the front of the wait queue.
  std::size_t handle_growth_overflow();

  // Readmits waiting slots in order while the projection fits.
  std::vector<DecodeSlot> admit_waiting();

  const std::vector<DecodeSlot>& slots() const { return slots_; }
  const std::deque<DecodeSlot>& waiting() const { return waiting_; }
  bool stepping = false;

 private:
  bool fits_with(Tokens extra_context) const;

  Bytes per_token_;
  Bytes safe_;
  Tokens context_sum_ = 0;
  std::vector<DecodeSlot> slots_;
  std::deque<DecodeSlot> waiting_;
};

// Least-loaded placement: most free memory, ties to the lower index.
std::size_t pick_decode_worker(std::span<const DecodeWorker> workers);

enum class EventKind {
  Arrival,
  SchedulerTick,
  PrefillDone,
  TransferDone,
  DecodeStepDone,
  Completion
};

std::string_view to_string(EventKind k);

struct SimResult {
  MetricsReport report;
  Trace requests;  // final per-request state
  std::vector<std::vector<RequestId>> batches;  // prefill batches in dispatch order
  std::vector<MonitorSnapshot> snapshots;
};

// Runs the trace to quiescence. Deterministic for identical inputs apart
// from the wall-clock timing section.
SimResult run(const Trace& trace, const SimConfig& cfg);

}  // namespace bucketserve
