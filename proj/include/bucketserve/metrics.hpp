#pragma once

#include <deque>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bucketserve/request.hpp"

namespace bucketserve {

struct SloConfig {
  std::optional<Seconds> ttft;
  std::optional<Seconds> e2e;
  bool operator==(const SloConfig&) const = default;
};

struct Percentiles {
  double p50 = 0, p90 = 0, p99 = 0;
  bool operator==(const Percentiles&) const = default;
};

// Linear interpolation between closest ranks. Empty input -> nullopt.
std::optional<Percentiles> percentiles(std::vector<double> values);

struct PhaseBreakdown {
  Seconds queue = 0, prefill = 0, transfer = 0, decode = 0;
  Seconds sum() const { return queue + prefill + transfer + decode; }
  bool operator==(const PhaseBreakdown&) const = default;
};

// Wall-clock measurements. Kept out of machine output unless asked for,
// since they differ between otherwise identical runs.
struct TimingReport {
  double wall_total_s = 0;
  double bucketing_wall_s = 0;  // assign + adjust_buckets
  double bucketing_fraction = 0;
  std::uint64_t assign_calls = 0;
  std::uint64_t adjust_calls = 0;
  bool operator==(const TimingReport&) const = default;
};

struct MetricsReport {
  std::string policy;
  std::size_t requests = 0;
  std::size_t completed = 0;
  std::size_t rejected = 0;
  Seconds makespan_s = 0;
  double client_rps = 0;
  double server_rps = 0;
  double tokens_per_s = 0;  // generated tokens / makespan
  std::uint64_t output_tokens = 0;
  std::uint64_t input_tokens = 0;

  std::optional<double> slo_attainment;
  std::size_t slo_online_requests = 0;
  std::optional<Percentiles> ttft;
  std::optional<Percentiles> e2e;
  PhaseBreakdown phase_totals;
  Seconds e2e_total = 0;

  std::size_t batches = 0;
  double mean_batch_size = 0;
  std::optional<double> mean_batch_waste;
  std::vector<std::pair<Seconds, double>> expected_waste_trajectory;

  std::size_t splits = 0;
  std::size_t merges = 0;
  std::size_t skipped_splits = 0;
  std::size_t suspensions = 0;
  std::size_t static_halvings = 0;
  std::size_t oversize_rejections = 0;

  Bytes safe_memory = 0;
  Bytes peak_prefill_footprint = 0;
  Bytes peak_decode_footprint = 0;
  std::uint64_t memory_checks = 0;
  std::uint64_t memory_violations = 0;

  double utilization_prefill = 0;
  double utilization_decode = 0;
  std::size_t monitor_snapshots = 0;
  std::size_t peak_queue_len = 0;

  std::optional<TimingReport> timing;

  bool operator==(const MetricsReport&) const = default;
};

// Fraction of online requests meeting every configured deadline; a
// request's own slo_* fields override `slo`. Rejected or unfinished online
// requests count as misses, offline requests are excluded. nullopt when no
// online request has any deadline.
std::optional<double> slo_attainment(std::span<const Request> requests,
                                     const SloConfig& slo);

struct LoadPoint {
  double load_rps = 0;
  double attainment = 0;
};

enum class GoodputFlag { Measured, Interpolated, NeverMet, Saturated };
std::string_view to_string(GoodputFlag f);

struct GoodputResult {
  double rps = 0;
  GoodputFlag flag = GoodputFlag::Measured;
};

// Largest measured load whose attainment >= threshold, interpolated
// linearly towards the next (failing) point. Points are sorted by load.
GoodputResult goodput_at(double threshold, std::span<const LoadPoint> points);

// Interval bookkeeping for the utilization proxy.
class UtilizationTracker {
 public:
  void add(Seconds start, Seconds end, double weight);
  // Weighted busy time inside [t0, t1] over (t1 - t0) * workers, in [0, 1].
  double ratio(Seconds t0, Seconds t1, std::size_t workers) const;

 private:
  struct Interval {
    Seconds start, end;
    double weight;
  };
  std::vector<Interval> intervals_;
};

struct MonitorSnapshot {
  Seconds time = 0;
  std::vector<Bytes> worker_memory;   // prefill workers then decode workers
  std::vector<std::size_t> bucket_queue;
  std::size_t prefill_queue = 0;
  std::size_t decode_queue = 0;
  double arrival_rate = 0;  // trailing 1 s window
  double mean_queued_len = 0;
  Seconds recent_batch_latency = 0;
};

enum class StreamKind {
  Arrival,
  Completion,
  Rejection,
  Structural,
  Suspension,
  Batch
};

struct MonitorEvent {
  Seconds time = 0;
  StreamKind stream = StreamKind::Arrival;
  // Split/merge/skip for Structural events.
  std::string detail;
};

// Global monitor: per-stream counters, trailing arrival rate, snapshots.
class Monitor {
 public:
  // Throws InternalError if `e` is older than the stream's last event.
  void record_event(const MonitorEvent& e);
  void record_snapshot(MonitorSnapshot s);

  std::size_t count(StreamKind s) const { return counts_[idx(s)]; }
  std::size_t structural(const std::string& kind) const;
  double arrival_rate(Seconds now) const;
  const std::vector<MonitorSnapshot>& snapshots() const { return snapshots_; }

  static constexpr Seconds kRateWindow = 1.0;

 private:
  static std::size_t idx(StreamKind s) { return static_cast<std::size_t>(s); }

  std::size_t counts_[6] = {};
  Seconds last_[6] = {-1e300, -1e300, -1e300, -1e300, -1e300, -1e300};
  std::size_t splits_ = 0, merges_ = 0, skips_ = 0;
  mutable std::deque<Seconds> recent_arrivals_;
  std::vector<MonitorSnapshot> snapshots_;
};

enum class ReportFormat { Json, Table };

nlohmann::json to_json(const MetricsReport& r, bool include_timing);
MetricsReport report_from_json(const nlohmann::json& j);
void emit_report(std::ostream& out, const MetricsReport& r, ReportFormat f,
                 bool include_timing = false);

// Aggregated sweep point (mean over repeats; *_sd empty for one repeat).
struct SweepRow {
  double load_rps = 0;
  double server_rps = 0;
  std::optional<double> slo_attainment;
  double tokens_per_s = 0;
  std::optional<double> server_rps_sd;
  std::optional<double> slo_attainment_sd;
  std::optional<double> tokens_per_s_sd;
};

inline constexpr const char* kSweepCsvHeader =
    "load_rps,server_rps,slo_attainment,tokens_per_s";

SweepRow aggregate_sweep_point(double load_rps,
                               std::span<const MetricsReport> repeats);
void emit_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);
void emit_sweep_csv_header(std::ostream& out);
void emit_sweep_csv_row(std::ostream& out, const SweepRow& row);

}  // namespace bucketserve
