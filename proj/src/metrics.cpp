#include "bucketserve/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "bucketserve/errors.hpp"

namespace bucketserve {

std::optional<Percentiles> percentiles(std::vector<double> values) {
  if (values.empty()) return std::nullopt;
  std::sort(values.begin(), values.end());
  auto at = [&](double q) {
    double pos = q * static_cast<double>(values.size() - 1);
    auto lo = static_cast<std::size_t>(std::floor(pos));
    std::size_t hi = std::min(lo + 1, values.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return values[lo] + (values[hi] - values[lo]) * frac;
  };
  return Percentiles{at(0.50), at(0.90), at(0.99)};
}

std::optional<double> slo_attainment(std::span<const Request> requests,
                                     const SloConfig& slo) {
  std::size_t judged = 0, met = 0;
  for (const auto& r : requests) {
    if (r.task_class != TaskClass::Online) continue;
    auto ttft = r.slo_ttft ? r.slo_ttft : slo.ttft;
    auto e2e = r.slo_e2e ? r.slo_e2e : slo.e2e;
    if (!ttft && !e2e) continue;
    ++judged;
    if (r.status != RequestStatus::Completed) continue;
    bool ok = true;
    if (ttft) ok = ok && *r.ts.first_token - r.arrival_time <= *ttft;
    if (e2e) ok = ok && *r.ts.completion - r.arrival_time <= *e2e;
    if (ok) ++met;
  }
  if (judged == 0) return std::nullopt;
  return static_cast<double>(met) / static_cast<double>(judged);
}

std::string_view to_string(GoodputFlag f) {
  switch (f) {
    case GoodputFlag::Measured: return "measured";
    case GoodputFlag::Interpolated: return "interpolated";
    case GoodputFlag::NeverMet: return "never_met";
    case GoodputFlag::Saturated: return "saturated";
  }
  return "?";
}

GoodputResult goodput_at(double threshold, std::span<const LoadPoint> points) {
  if (points.empty()) throw DomainError("goodput_at needs at least one point");
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < points.size(); ++i)
    if (points[i].attainment >= threshold) best = i;
  if (!best) return {points.front().load_rps, GoodputFlag::NeverMet};
  std::size_t i = *best;
  if (i + 1 == points.size()) return {points[i].load_rps, GoodputFlag::Saturated};
  const auto& a = points[i];
  const auto& b = points[i + 1];
  if (a.attainment == threshold || a.attainment == b.attainment)
    return {a.load_rps, GoodputFlag::Measured};
  double frac = (a.attainment - threshold) / (a.attainment - b.attainment);
  return {a.load_rps + frac * (b.load_rps - a.load_rps), GoodputFlag::Interpolated};
}

void UtilizationTracker::add(Seconds start, Seconds end, double weight) {
  if (end > start && weight > 0)
    intervals_.push_back({start, end, std::min(1.0, weight)});
}

double UtilizationTracker::ratio(Seconds t0, Seconds t1,
                                 std::size_t workers) const {
  if (!(t1 > t0) || workers == 0) return 0.0;
  double busy = 0.0;
  for (const auto& iv : intervals_) {
    double s = std::max(iv.start, t0), e = std::min(iv.end, t1);
    if (e > s) busy += (e - s) * iv.weight;
  }
  return std::clamp(busy / ((t1 - t0) * static_cast<double>(workers)), 0.0, 1.0);
}

void Monitor::record_event(const MonitorEvent& e) {
  std::size_t i = idx(e.stream);
  if (e.time < last_[i])
    throw InternalError("monitor stream went back in time: " +
                        std::to_string(e.time) + " < " + std::to_string(last_[i]));
  last_[i] = e.time;
  ++counts_[i];
  if (e.stream == StreamKind::Arrival) {
    recent_arrivals_.push_back(e.time);
    while (!recent_arrivals_.empty() &&
           recent_arrivals_.front() < e.time - kRateWindow)
      recent_arrivals_.pop_front();
  }
  if (e.stream == StreamKind::Structural) {
    if (e.detail == "split") ++splits_;
    else if (e.detail == "merge") ++merges_;
    else if (e.detail == "skip") ++skips_;
  }
}

void Monitor::record_snapshot(MonitorSnapshot s) {
  snapshots_.push_back(std::move(s));
}

std::size_t Monitor::structural(const std::string& kind) const {
  if (kind == "split") return splits_;
  if (kind == "merge") return merges_;
  if (kind == "skip") return skips_;
  return 0;
}

double Monitor::arrival_rate(Seconds now) const {
  while (!recent_arrivals_.empty() && recent_arrivals_.front() < now - kRateWindow)
    recent_arrivals_.pop_front();
  return static_cast<double>(recent_arrivals_.size()) / kRateWindow;
}

namespace {

using nlohmann::json;

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_double(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

json percentiles_json(const std::optional<Percentiles>& p) {
  if (!p) return nullptr;
  return {{"p50", p->p50}, {"p90", p->p90}, {"p99", p->p99}};
}

std::optional<Percentiles> percentiles_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return Percentiles{j.at("p50").get<double>(), j.at("p90").get<double>(),
                     j.at("p99").get<double>()};
}

}  // namespace

json to_json(const MetricsReport& r, bool include_timing) {
  json trajectory = json::array();
  for (auto& [t, w] : r.expected_waste_trajectory) trajectory.push_back({t, w});
  json j = {
      {"policy", r.policy},
      {"requests", r.requests},
      {"completed", r.completed},
      {"rejected", r.rejected},
      {"makespan_s", r.makespan_s},
      {"client_rps", r.client_rps},
      {"server_rps", r.server_rps},
      {"tokens_per_s", r.tokens_per_s},
      {"output_tokens", r.output_tokens},
      {"input_tokens", r.input_tokens},
      {"slo", {{"attainment", opt(r.slo_attainment)},
               {"online_requests", r.slo_online_requests}}},
      {"latency", {{"ttft", percentiles_json(r.ttft)},
                   {"e2e", percentiles_json(r.e2e)}}},
      {"phase_totals_s", {{"queue", r.phase_totals.queue},
                          {"prefill", r.phase_totals.prefill},
                          {"transfer", r.phase_totals.transfer},
                          {"decode", r.phase_totals.decode}}},
      {"e2e_total_s", r.e2e_total},
      {"batching", {{"batches", r.batches},
                    {"mean_batch_size", r.mean_batch_size},
                    {"mean_batch_waste", opt(r.mean_batch_waste)},
                    {"expected_waste_trajectory", trajectory},
                    {"static_halvings", r.static_halvings},
                    {"oversize_rejections", r.oversize_rejections}}},
      {"bucketing", {{"splits", r.splits},
                     {"merges", r.merges},
                     {"skipped_splits", r.skipped_splits}}},
      {"decode", {{"suspensions", r.suspensions}}},
      {"memory", {{"safe_memory", r.safe_memory},
                  {"peak_prefill_footprint", r.peak_prefill_footprint},
                  {"peak_decode_footprint", r.peak_decode_footprint},
                  {"checks", r.memory_checks},
                  {"violations", r.memory_violations}}},
      {"utilization_proxy", {{"prefill", r.utilization_prefill},
                             {"decode", r.utilization_decode}}},
      {"monitor", {{"snapshots", r.monitor_snapshots},
                   {"peak_queue_len", r.peak_queue_len}}},
  };
  if (include_timing && r.timing) {
    const auto& t = *r.timing;
    j["timing"] = {{"wall_total_s", t.wall_total_s},
                   {"bucketing_wall_s", t.bucketing_wall_s},
                   {"bucketing_fraction", t.bucketing_fraction},
                   {"assign_calls", t.assign_calls},
                   {"adjust_calls", t.adjust_calls}};
  }
  return j;
}

MetricsReport report_from_json(const json& j) {
  MetricsReport r;
  r.policy = j.at("policy").get<std::string>();
  r.requests = j.at("requests").get<std::size_t>();
  r.completed = j.at("completed").get<std::size_t>();
  r.rejected = j.at("rejected").get<std::size_t>();
  r.makespan_s = j.at("makespan_s").get<double>();
  r.client_rps = j.at("client_rps").get<double>();
  r.server_rps = j.at("server_rps").get<double>();
  r.tokens_per_s = j.at("tokens_per_s").get<double>();
  r.output_tokens = j.at("output_tokens").get<std::uint64_t>();
  r.input_tokens = j.at("input_tokens").get<std::uint64_t>();
  r.slo_attainment = opt_double(j.at("slo").at("attainment"));
  r.slo_online_requests = j.at("slo").at("online_requests").get<std::size_t>();
  r.ttft = percentiles_from(j.at("latency").at("ttft"));
  r.e2e = percentiles_from(j.at("latency").at("e2e"));
  const auto& p = j.at("phase_totals_s");
  r.phase_totals = {p.at("queue").get<double>(), p.at("prefill").get<double>(),
                    p.at("transfer").get<double>(), p.at("decode").get<double>()};
  r.e2e_total = j.at("e2e_total_s").get<double>();
  const auto& b = j.at("batching");
  r.batches = b.at("batches").get<std::size_t>();
  r.mean_batch_size = b.at("mean_batch_size").get<double>();
  r.mean_batch_waste = opt_double(b.at("mean_batch_waste"));
  for (const auto& e : b.at("expected_waste_trajectory"))
    r.expected_waste_trajectory.emplace_back(e.at(0).get<double>(),
                                             e.at(1).get<double>());
  r.static_halvings = b.at("static_halvings").get<std::size_t>();
  r.oversize_rejections = b.at("oversize_rejections").get<std::size_t>();
  r.splits = j.at("bucketing").at("splits").get<std::size_t>();
  r.merges = j.at("bucketing").at("merges").get<std::size_t>();
  r.skipped_splits = j.at("bucketing").at("skipped_splits").get<std::size_t>();
  r.suspensions = j.at("decode").at("suspensions").get<std::size_t>();
  const auto& m = j.at("memory");
  r.safe_memory = m.at("safe_memory").get<Bytes>();
  r.peak_prefill_footprint = m.at("peak_prefill_footprint").get<Bytes>();
  r.peak_decode_footprint = m.at("peak_decode_footprint").get<Bytes>();
  r.memory_checks = m.at("checks").get<std::uint64_t>();
  r.memory_violations = m.at("violations").get<std::uint64_t>();
  r.utilization_prefill = j.at("utilization_proxy").at("prefill").get<double>();
  r.utilization_decode = j.at("utilization_proxy").at("decode").get<double>();
  r.monitor_snapshots = j.at("monitor").at("snapshots").get<std::size_t>();
  r.peak_queue_len = j.at("monitor").at("peak_queue_len").get<std::size_t>();
  if (j.contains("timing")) {
    const auto& t = j.at("timing");
    r.timing = TimingReport{t.at("wall_total_s").get<double>(),
                            t.at("bucketing_wall_s").get<double>(),
                            t.at("bucketing_fraction").get<double>(),
                            t.at("assign_calls").get<std::uint64_t>(),
                            t.at("adjust_calls").get<std::uint64_t>()};
  }
  return r;
}

namespace {

void table(std::ostream& out, const MetricsReport& r) {
  auto row = [&](const std::string& k, const std::string& v) {
    out << std::left << std::setw(28) << k << v << '\n';
  };
  auto num = [](double v) {
    std::ostringstream s;
    s << std::setprecision(6) << v;
    return s.str();
  };
  auto pct = [&](const std::optional<Percentiles>& p) {
    if (!p) return std::string("-");
    return num(p->p50) + " / " + num(p->p90) + " / " + num(p->p99);
  };
  row("policy", r.policy);
  row("requests", std::to_string(r.requests));
  row("completed", std::to_string(r.completed));
  row("rejected", std::to_string(r.rejected));
  row("makespan (s)", num(r.makespan_s));
  row("client rps", num(r.client_rps));
  row("server rps", num(r.server_rps));
  row("tokens/s", num(r.tokens_per_s));
  row("slo attainment", r.slo_attainment ? num(*r.slo_attainment) : "-");
  row("ttft p50/p90/p99 (s)", pct(r.ttft));
  row("e2e p50/p90/p99 (s)", pct(r.e2e));
  row("queue/prefill/xfer/decode",
      num(r.phase_totals.queue) + " / " + num(r.phase_totals.prefill) + " / " +
          num(r.phase_totals.transfer) + " / " + num(r.phase_totals.decode));
  row("batches", std::to_string(r.batches));
  row("mean batch size", num(r.mean_batch_size));
  row("mean batch waste", r.mean_batch_waste ? num(*r.mean_batch_waste) : "-");
  row("splits/merges/skips", std::to_string(r.splits) + " / " +
                                 std::to_string(r.merges) + " / " +
                                 std::to_string(r.skipped_splits));
  row("suspensions", std::to_string(r.suspensions));
  row("static halvings", std::to_string(r.static_halvings));
  row("oversize rejections", std::to_string(r.oversize_rejections));
  row("safe memory (bytes)", std::to_string(r.safe_memory));
  row("peak prefill footprint", std::to_string(r.peak_prefill_footprint));
  row("peak decode footprint", std::to_string(r.peak_decode_footprint));
  row("memory violations", std::to_string(r.memory_violations));
  row("util proxy prefill/decode",
      num(r.utilization_prefill) + " / " + num(r.utilization_decode));
  if (r.timing) {
    row("wall clock (s)", num(r.timing->wall_total_s));
    row("bucketing wall (s)", num(r.timing->bucketing_wall_s));
    row("bucketing fraction", num(r.timing->bucketing_fraction));
  }
}

std::string csv_num(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

std::string csv_opt(const std::optional<double>& v) {
  return v ? csv_num(*v) : std::string();
}

}  // namespace

void emit_report(std::ostream& out, const MetricsReport& r, ReportFormat f,
                 bool include_timing) {
  if (f == ReportFormat::Json)
    out << to_json(r, include_timing).dump(2) << '\n';
  else
    table(out, r);
}

SweepRow aggregate_sweep_point(double load_rps,
                               std::span<const MetricsReport> repeats) {
  if (repeats.empty()) throw DomainError("sweep point without runs");
  auto stats = [&](auto get) -> std::pair<std::optional<double>, std::optional<double>> {
    std::vector<double> xs;
    for (const auto& r : repeats)
      if (auto v = get(r)) xs.push_back(*v);
    if (xs.empty()) return {std::nullopt, std::nullopt};
    double mean = std::accumulate(xs.begin(), xs.end(), 0.0) /
                  static_cast<double>(xs.size());
    if (xs.size() < 2) return {mean, std::nullopt};
    double ss = 0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
  };
  SweepRow row;
  row.load_rps = load_rps;
  auto srv = stats([](const MetricsReport& r) { return std::optional(r.server_rps); });
  auto att = stats([](const MetricsReport& r) { return r.slo_attainment; });
  auto tps = stats([](const MetricsReport& r) { return std::optional(r.tokens_per_s); });
  row.server_rps = *srv.first;
  row.server_rps_sd = srv.second;
  row.slo_attainment = att.first;
  row.slo_attainment_sd = att.second;
  row.tokens_per_s = *tps.first;
  row.tokens_per_s_sd = tps.second;
  return row;
}

void emit_sweep_csv_header(std::ostream& out) {
  out << kSweepCsvHeader << ",server_rps_sd,slo_attainment_sd,tokens_per_s_sd\n";
}

void emit_sweep_csv_row(std::ostream& out, const SweepRow& r) {
  out << csv_num(r.load_rps) << ',' << csv_num(r.server_rps) << ','
      << csv_opt(r.slo_attainment) << ',' << csv_num(r.tokens_per_s) << ','
      << csv_opt(r.server_rps_sd) << ',' << csv_opt(r.slo_attainment_sd) << ','
      << csv_opt(r.tokens_per_s_sd) << '\n';
}

void emit_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
  emit_sweep_csv_header(out);
  for (const auto& r : rows) emit_sweep_csv_row(out, r);
}

}  // namespace bucketserve
