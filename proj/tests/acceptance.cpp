// Acceptance checks: one PASS/FAIL line per criterion, details indented.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "bucketserve/bucket_manager.hpp"
#include "bucketserve/errors.hpp"
#include "bucketserve/memory_model.hpp"
#include "bucketserve/pd_sim.hpp"
#include "bucketserve/scenario.hpp"
#include "bucketserve/workload.hpp"

using namespace bucketserve;
using Clock = std::chrono::steady_clock;

namespace {

std::string g_scenario;
std::string g_bucketsim;

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "  failed: " << what << '\n';
    }
  }
};

// ---- 1 -------------------------------------------------------------------

std::size_t prefix_scan(const std::vector<Tokens>& v, Tokens budget) {
  Tokens sum = 0;
  std::size_t n = 0;
  for (Tokens x : v) {
    sum += x;
    if (sum > budget) break;
    ++n;
  }
  return n;
}

void formula_oracles(Outcome& o) {
  auto t0 = Clock::now();
  std::mt19937_64 rng(1);
  std::size_t mismatches = 0;
  for (int i = 0; i < 10000; ++i) {
    std::vector<Tokens> v(rng() % 513);
    for (auto& x : v) x = 1 + static_cast<Tokens>(rng() % 4096);
    Tokens budget = static_cast<Tokens>(rng() % 1'000'001);
    mismatches += max_safe_batch(v, budget) != prefix_scan(v, budget);
  }
  double t_batch = since(t0);
  o.detail << "  max_safe_batch mismatches: " << mismatches << " / 10000 (" << t_batch << " s)\n";
  o.require(mismatches == 0, "max_safe_batch disagrees with prefix scan");
  o.require(t_batch < 1.0, "max_safe_batch oracle over 1 s");

  ModelConfig m;  // 40/40/128, B = 2
  Bytes padded = kv_footprint_padded(m, 1024, 8);
  Bytes by_hand = 2ULL * 40 * 40 * 128 * 1024 * 2 * 8;
  o.detail << "  kv_footprint_padded(40,40,128,2,1024,8) = " << padded << '\n';
  o.require(padded == 6710886400ULL && by_hand == padded, "padded footprint");

  GpuConfig g;
  g.total_mem = 40ULL << 30;
  g.model_mem = 30ULL << 30;
  g.reserve_fraction = 0.10;
  Bytes safe = safe_memory(g);
  o.detail << "  safe_memory(40 GiB, 30 GiB, 0.10) = " << safe << '\n';
  o.require(safe == 9663676416ULL, "safe memory");
}

// ---- 2 -------------------------------------------------------------------

void refinement(Outcome& o) {
  std::mt19937_64 rng(2);
  const Tokens l_max = 4096;
  std::size_t violations = 0;
  double max_gain = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    // Random binned histogram over [0, l_max).
    std::size_t bins = 1 + rng() % 60;
    std::vector<double> cuts;
    for (std::size_t i = 0; i + 1 < bins; ++i)
      cuts.push_back(1 + static_cast<double>(rng() % (l_max - 1)));
    cuts.push_back(0);
    cuts.push_back(static_cast<double>(l_max));
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    std::vector<double> counts(cuts.size() - 1);
    for (auto& c : counts) c = rng() % 3 == 0 ? 0.0 : static_cast<double>(rng() % 1000);
    if (std::accumulate(counts.begin(), counts.end(), 0.0) == 0) counts[0] = 1;
    LengthHistogram h(cuts, counts);

    // Random existing partition, then split one bucket at an interior point.
    std::vector<Tokens> bounds{0, l_max};
    for (std::size_t k = rng() % 5; k > 0; --k) bounds.push_back(1 + static_cast<Tokens>(rng() % (l_max - 1)));
    std::sort(bounds.begin(), bounds.end());
    bounds.erase(std::unique(bounds.begin(), bounds.end()), bounds.end());
    std::vector<TokenRange> pre;
    for (std::size_t i = 0; i + 1 < bounds.size(); ++i) pre.push_back({bounds[i], bounds[i + 1]});
    std::size_t which = rng() % pre.size();
    TokenRange b = pre[which];
    if (b.up - b.low < 2) continue;
    Tokens cut = b.low + 1 + static_cast<Tokens>(rng() % static_cast<std::uint64_t>(b.up - b.low - 1));
    std::vector<TokenRange> post = pre;
    post[which] = {b.low, cut};
    post.insert(post.begin() + static_cast<std::ptrdiff_t>(which) + 1, TokenRange{cut, b.up});
    double w0 = expected_waste(h, pre), w1 = expected_waste(h, post);
    violations += !(w1 <= w0);
    max_gain = std::max(max_gain, w0 - w1);
  }
  o.detail << "  violations: " << violations << " / 1000, largest waste reduction " << max_gain << '\n';
  o.require(violations == 0, "a split increased expected waste");
}

// ---- 3 -------------------------------------------------------------------

QueuedRequest q(RequestId id, Tokens len, Seconds at = 0) { return {id, len, at, TaskClass::Online}; }

void algorithm_conformance(Outcome& o) {
  {
    BucketSet set(2048);
    for (int i = 0; i < 12; ++i) set.assign(q(i, 100 + 50 * i));
    for (int i = 12; i < 20; ++i) set.assign(q(i, 1024 + 100 * (i - 12)));
    set.adjust_buckets(16);
    bool ok = set.size() == 2 && set.bucket(0).range() == TokenRange{0, 1024} &&
              set.bucket(1).range() == TokenRange{1024, 2048} && set.bucket(0).size() == 12 &&
              set.bucket(1).size() == 8;
    o.detail << "  split 20 (12 short), n_max 16: " << (ok ? "[0,1024)x12 [1024,2048)x8" : "mismatch") << '\n';
    o.require(ok, "split example");
  }
  {
    auto set = BucketSet::from_ranges(2048, {{0, 1024}, {1024, 2048}});
    set.assign(q(0, 10));
    set.assign(q(1, 1500));
    set.assign(q(2, 700));
    set.adjust_buckets(16);
    bool ok = set.size() == 1 && set.bucket(0).range() == TokenRange{0, 2048} && set.bucket(0).size() == 3;
    o.detail << "  merge 3 requests, n_max 16: " << (ok ? "single [0,2048) x3" : "mismatch") << '\n';
    o.require(ok, "merge example");
  }
  {
    BucketSet set(2048);
    for (int i = 0; i < 8; ++i) set.assign(q(i, 100));
    for (int i = 8; i < 20; ++i) set.assign(q(i, 1500));
    bool ok = set.adjust_buckets(16).empty() && set.size() == 1;
    o.detail << "  short fraction 0.4: " << (ok ? "no split" : "split happened") << '\n';
    o.require(ok, "no-split example");
  }
  auto t0 = Clock::now();
  std::mt19937_64 rng(3);
  BucketSet set(4096, 0.5);
  RequestId next = 0;
  std::size_t bad = 0, splits = 0, merges = 0;
  for (int op = 0; op < 100000; ++op) {
    auto r = rng() % 10;
    if (r < 5) {
      Tokens len = static_cast<Tokens>(rng() % 3 ? rng() % 300 : rng() % 4096);
      set.assign(q(next++, len, op));
    } else if (r < 7) {
      for (const auto& c : set.adjust_buckets(1 + rng() % 48, op)) {
        splits += c.kind == ChangeKind::Split;
        merges += c.kind == ChangeKind::Merge;
      }
    } else if (set.total_requests() > 0) {
      auto& b = set.bucket(rng() % set.size());
      if (!b.empty()) {
        std::vector<RequestId> ids;
        for (std::size_t k = 0; k < b.size() && k < 3; ++k) ids.push_back(b.requests()[k].id);
        b.erase(ids);
      }
    }
    if (auto v = set.check_partition()) {
      if (bad++ == 0) o.detail << "  first violation: " << v->describe() << '\n';
    }
  }
  double t = since(t0);
  o.detail << "  fuzz: 1e5 ops, " << splits << " splits, " << merges << " merges, " << bad
           << " violations (" << t << " s)\n";
  o.require(bad == 0, "partition invariant broken");
  o.require(t < 10.0, "fuzz over 10 s");
}

// ---- 4 -------------------------------------------------------------------

Trace mixed_trace(std::uint64_t seed, std::size_t n, double rate, double online,
                  double long_weight, double mu) {
  WorkloadSpec w;
  w.arrival = PoissonArrivals{rate};
  Mixture mix;
  mix.weights = {1 - long_weight, long_weight};
  mix.components = {LengthDist{ShortNormal{}}, LengthDist{LongTailLogNormal{mu, 0.7, 4095}}};
  w.input = LengthDist{mix};
  w.output = LengthDist{LongTailLogNormal{4.5, 0.8, std::nullopt}};
  w.max_output_len = 512;
  w.horizon = RequestCount{n};
  w.online_fraction = online;
  w.seed = seed;
  return gen_synthetic(w);
}

void memory_safety(Outcome& o) {
  std::mt19937_64 rng(4);
  std::uint64_t violations = 0, checks = 0, suspensions = 0, rejected = 0, requests = 0;
  std::size_t runs = 0;
  for (int s = 0; s < 50; ++s) {
    double rate = 5 + static_cast<double>(rng() % 40);
    double online = static_cast<double>(rng() % 101) / 100.0;
    double long_w = 0.1 + static_cast<double>(rng() % 50) / 100.0;
    double mu = 6.0 + static_cast<double>(rng() % 15) / 10.0;
    Trace t = mixed_trace(1000 + s, 200, rate, online, long_w, mu);
    requests += t.size();
    SimConfig c;
    c.abort_on_violation = false;
    c.max_output_tokens = 512;
    c.cost.prefill_per_token = 1e-5 * static_cast<double>(1 + rng() % 20);
    c.cluster.prefill_workers = 1 + rng() % 2;
    c.cluster.decode_workers = 1 + rng() % 2;
    // Tight: 3.4 to 4.4 GiB of KV room, barely above one full-length context.
    c.cluster.gpu.total_mem = (26ULL << 30) + (1ULL << 30) * (38 + rng() % 12) / 10;
    c.split_threshold = 0.3 + static_cast<double>(rng() % 60) / 100.0;
    switch (s % 3) {
      case 0: c.policy = BucketServePolicy{}; break;
      case 1: c.policy = ContinuousNoBucketPolicy{}; break;
      default: c.policy = StaticBatchPolicy{1 + rng() % 16}; break;
    }
    for (auto acct : {MemoryAccounting::Padded, MemoryAccounting::Exact}) {
      c.accounting = acct;
      SimResult r = run(t, c);
      violations += r.report.memory_violations;
      checks += r.report.memory_checks;
      suspensions += r.report.suspensions;
      rejected += r.report.rejected;
      ++runs;
    }
  }
  o.detail << "  " << runs << " runs over " << requests << " requests, " << checks
           << " event-boundary checks, " << violations << " violations (" << suspensions
           << " decode suspensions, " << rejected << " oversize rejections)\n";
  o.require(violations == 0, "footprint exceeded safe memory");
}

// ---- 5 -------------------------------------------------------------------

Scenario standard() { return load_scenario(g_scenario); }

void throughput_direction(Outcome& o) {
  auto t0 = Clock::now();
  Scenario s = standard();
  s.sim.accounting = MemoryAccounting::Padded;
  Trace t = build_trace(s);
  std::map<std::string, MetricsReport> reps;
  for (auto pol : {PolicyKind{BucketServePolicy{}}, PolicyKind{StaticBatchPolicy{8}},
                   PolicyKind{ContinuousNoBucketPolicy{}}}) {
    SimConfig c = s.sim;
    c.policy = pol;
    reps[policy_label(pol)] = run(t, c).report;
  }
  const auto& b = reps["bucketserve"];
  for (const auto& [name, r] : reps)
    o.detail << "  " << name << ": tokens/s " << r.tokens_per_s << ", mean batch waste "
             << r.mean_batch_waste.value_or(NAN) << ", server rps " << r.server_rps << '\n';
  for (const char* other : {"static-proxy", "continuous-proxy"}) {
    const auto& r = reps[other];
    o.detail << "  vs " << other << ": throughput x" << b.tokens_per_s / r.tokens_per_s << '\n';
    o.require(b.tokens_per_s > r.tokens_per_s, std::string("tokens/s not above ") + other);
    o.require(b.mean_batch_waste.value_or(1) < r.mean_batch_waste.value_or(0),
              std::string("waste not below ") + other);
  }
  double secs = since(t0);
  o.detail << "  runtime " << secs << " s\n";
  o.require(secs < 60, "over 60 s");
}

// ---- 6 -------------------------------------------------------------------

void slo_curves(Outcome& o) {
  auto t0 = Clock::now();
  Scenario base = standard();
  const std::vector<double> loads{2, 4, 6, 8, 10, 12, 16, 20};
  const std::size_t repeats = 3;
  std::map<std::string, GoodputResult> goodput;
  for (auto pol : {PolicyKind{BucketServePolicy{}}, PolicyKind{ContinuousNoBucketPolicy{}},
                   PolicyKind{StaticBatchPolicy{8}}}) {
    std::vector<LoadPoint> curve;
    std::uint64_t i = 0;
    for (double load : loads) {
      std::vector<MetricsReport> reps;
      for (std::size_t r = 0; r < repeats; ++r, ++i) {
        Scenario s = with_load(base, load);
        s.seed = base.seed + i;
        s.sim.policy = pol;
        reps.push_back(run(build_trace(s), s.sim).report);
      }
      curve.push_back({load, aggregate_sweep_point(load, reps).slo_attainment.value_or(0)});
    }
    std::string name = policy_label(pol);
    std::ostringstream line;
    bool mono = true;
    for (std::size_t k = 0; k < curve.size(); ++k) {
      line << (k ? " " : "") << curve[k].attainment;
      if (k > 0 && curve[k].attainment > curve[k - 1].attainment + 0.05) mono = false;
    }
    goodput[name] = goodput_at(0.8, curve);
    o.detail << "  " << name << " attainment: " << line.str() << "; goodput@0.8 "
             << goodput[name].rps << " (" << to_string(goodput[name].flag) << ")\n";
    o.require(mono, name + " attainment rises by more than 0.05 between load points");
  }
  o.require(goodput["bucketserve"].rps >= goodput["continuous-proxy"].rps,
            "bucketserve goodput below continuous-proxy");
  double t = since(t0);
  o.detail << "  loads 2..20 rps, 3 repeats, runtime " << t << " s\n";
  o.require(t < 300, "over 5 min");
}

// ---- 7 -------------------------------------------------------------------

void reduction(Outcome& o) {
  std::size_t identical = 0, batches = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Trace t = mixed_trace(500 + seed, 300, 10.0 + static_cast<double>(seed), 0.5, 0.3, 7.0);
    SimConfig a;
    a.cost.prefill_per_token = 1.3e-4;
    a.split_threshold = 1.0;
    a.dispatch = {DispatchPolicy::Fcfs, DispatchPolicy::Fcfs};
    SimConfig b = a;
    b.policy = ContinuousNoBucketPolicy{};
    auto x = run(t, a).batches;
    auto y = run(t, b).batches;
    identical += x == y;
    batches += x.size();
  }
  o.detail << "  identical schedules: " << identical << " / 20 (" << batches << " batches compared)\n";
  o.require(identical == 20, "schedules differ");
}

// ---- 8 -------------------------------------------------------------------

double adjust_time_per_call(std::size_t k) {
  const Tokens l_max = 4096;
  std::vector<TokenRange> ranges;
  for (std::size_t i = 0; i < k; ++i)
    ranges.push_back({static_cast<Tokens>(i) * l_max / static_cast<Tokens>(k),
                      static_cast<Tokens>(i + 1) * l_max / static_cast<Tokens>(k)});
  auto set = BucketSet::from_ranges(l_max, ranges);
  std::mt19937_64 rng(8);
  for (int i = 0; i < 4096; ++i) set.assign(q(i, static_cast<Tokens>(rng() % l_max), i));
  // n_max = total: no merge, and no bucket exceeds it, so every call is
  // the full split-condition scan.
  const std::size_t n_max = set.total_requests();
  const int calls = 200000;
  double best = 1e300;
  for (int rep = 0; rep < 5; ++rep) {
    auto t0 = Clock::now();
    std::size_t changes = 0;
    for (int c = 0; c < calls; ++c) changes += set.adjust_buckets(n_max).size();
    if (changes) return -1;
    best = std::min(best, since(t0) / calls);
  }
  return best;
}

void overhead(Outcome& o) {
  if (g_bucketsim.empty()) {
    o.require(false, "bucketsim path not given");
    return;
  }
  // Denominator: wall-clock of a whole `bucketsim run` process. Numerator:
  // time inside assign and adjust_buckets as reported by that process.
  std::string cmd = "\"" + g_bucketsim + "\" run \"" + g_scenario + "\" --with-timing";
  std::vector<double> process, in_sim;
  for (int rep = 0; rep < 9; ++rep) {
    auto t0 = Clock::now();
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) {
      o.require(false, "cannot start bucketsim");
      return;
    }
    std::string text;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) text.append(buf, n);
    int rc = pclose(pipe);
    double wall = since(t0);
    if (rc != 0) {
      o.require(false, "bucketsim run failed");
      return;
    }
    auto timing = nlohmann::json::parse(text).at("timing");
    process.push_back(timing.at("bucketing_wall_s").get<double>() / wall);
    in_sim.push_back(timing.at("bucketing_fraction").get<double>());
  }
  std::sort(process.begin(), process.end());
  std::sort(in_sim.begin(), in_sim.end());
  double median = process[process.size() / 2];
  o.detail << "  bucketing share of process wall-clock (9 runs): min " << process.front()
           << ", median " << median << ", max " << process.back()
           << "; of the simulation loop alone: median " << in_sim[in_sim.size() / 2] << '\n';
  o.require(median < 0.02, "bucketing overhead at or above 2%");

  std::vector<std::size_t> ks{1, 4, 16, 64};
  std::vector<double> per;
  for (auto k : ks) per.push_back(adjust_time_per_call(k));
  std::ostringstream line;
  bool linear = true;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    line << " k=" << ks[i] << ": " << per[i] * 1e9 << " ns";
    if (per[i] < 0) linear = false;
    // 4x more buckets per step: allow 2.5 per doubling.
    if (i > 0 && per[i] > per[i - 1] * 2.5 * 2.5) linear = false;
  }
  o.detail << "  adjust_buckets per call:" << line.str() << '\n';
  o.require(linear, "adjust_buckets grows faster than linearly in k");
}

// ---- 9 -------------------------------------------------------------------

void determinism(Outcome& o) {
  std::ostringstream a, b, err;
  int ra = cmd_run(g_scenario, {}, a, err);
  int rb = cmd_run(g_scenario, {}, b, err);
  o.detail << "  run exit codes " << ra << "/" << rb << ", report bytes " << a.str().size() << '\n';
  o.require(ra == 0 && rb == 0, "cmd_run failed: " + err.str());
  o.require(!a.str().empty() && a.str() == b.str(), "run reports differ");
  std::ostringstream sa, sb;
  int qa = cmd_sweep(g_scenario, {4, 8, 12}, 2, {}, sa, err);
  int qb = cmd_sweep(g_scenario, {4, 8, 12}, 2, {}, sb, err);
  o.detail << "  sweep exit codes " << qa << "/" << qb << ", csv bytes " << sa.str().size() << '\n';
  o.require(qa == 0 && qb == 0, "cmd_sweep failed: " + err.str());
  o.require(sa.str() == sb.str(), "sweep rows differ");
}

// ---- 10 ------------------------------------------------------------------

void oracle(Outcome& o) {
  auto two = LengthHistogram::from_samples(std::vector<Tokens>{100, 900});
  auto e = optimal_boundary_oracle(two, 0, 1000, 1e-6);
  o.detail << "  two-point masses {100, 900} on [0,1000): boundary " << e.boundary << " after "
           << e.iterations << " iterations\n";
  o.require(e.converged && std::abs(e.boundary - 100) < 1e-6 * 1000 && e.iterations <= 5,
            "two-point example");

  std::mt19937_64 rng(10);
  const Tokens l_max = 4096;
  double worst = -1e300, sum_gap = 0;
  std::size_t over = 0;
  for (int i = 0; i < 100; ++i) {
    Mixture mix;
    double w = 0.1 + static_cast<double>(rng() % 60) / 100.0;
    mix.weights = {1 - w, w};
    mix.components = {LengthDist{ShortNormal{}},
                      LengthDist{LongTailLogNormal{5.5 + static_cast<double>(rng() % 25) / 10.0,
                                                   0.4 + static_cast<double>(rng() % 8) / 10.0,
                                                   l_max - 1}}};
    Rng r(rng());
    std::vector<Tokens> s(2000);
    for (auto& x : s) x = std::min<Tokens>(sample_length(LengthDist{mix}, r), l_max - 1);
    auto h = LengthHistogram::from_samples(s);
    Tokens mid = l_max / 2;
    auto b = optimal_boundary_oracle(h, 0, l_max, 1e-4);
    // The fixed point is E[S | S <= U], so the boundary token belongs to the
    // lower bucket.
    Tokens cut = std::clamp<Tokens>(static_cast<Tokens>(std::floor(b.boundary)) + 1, 1, l_max - 1);
    std::vector<TokenRange> by_mid{{0, mid}, {mid, l_max}};
    std::vector<TokenRange> by_oracle{{0, cut}, {cut, l_max}};
    double w_mid = expected_waste(h, by_mid), w_oracle = expected_waste(h, by_oracle);
    double gap = (w_mid - w_oracle) / w_oracle;
    worst = std::max(worst, gap);
    sum_gap += gap;
    over += gap > 0.25;
  }
  o.detail << "  midpoint vs oracle boundary over 100 long-tail histograms: mean relative gap "
           << sum_gap / 100 << ", worst " << worst << " (negative = midpoint better), "
           << over << " above +25%\n";
  o.require(over == 0, "midpoint waste more than 25% above oracle waste");
}

}  // namespace

int main(int argc, char** argv) {
  g_scenario = argc > 1 ? argv[1] : "scenarios/mixed_longtail.json";
  g_bucketsim = argc > 2 ? argv[2] : "";
  if (!std::filesystem::exists(g_scenario)) {
    std::cerr << "scenario not found: " << g_scenario << '\n';
    return 2;
  }
  struct Criterion {
    const char* name;
    std::function<void(Outcome&)> body;
  };
  std::vector<Criterion> all{
      {"1 formula oracles", formula_oracles},
      {"2 refinement monotonicity", refinement},
      {"3 bucket adjustment conformance", algorithm_conformance},
      {"4 memory safety", memory_safety},
      {"5 throughput direction", throughput_direction},
      {"6 SLO curve shape", slo_curves},
      {"7 reduction equivalence", reduction},
      {"8 scheduling overhead", overhead},
      {"9 determinism", determinism},
      {"10 boundary oracle", oracle},
  };
  int failed = 0;
  for (auto& c : all) {
    Outcome o;
    auto t0 = Clock::now();
    try {
      c.body(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "  exception: " << e.what() << '\n';
    }
    std::printf("%s  %-34s (%.2f s)\n", o.pass ? "PASS" : "FAIL", c.name, since(t0));
    std::cout << o.detail.str() << std::flush;
    failed += !o.pass;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(all.size()) - failed, all.size());
  return failed == 0 ? 0 : 1;
}
