#include "bucketserve/scenario.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "bucketserve/errors.hpp"

namespace bucketserve {

using nlohmann::json;

namespace {

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

const char* type_name(const json& j) { return j.type_name(); }

// Object reader that remembers which keys were consumed.
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object())
      throw ConfigError(path_.empty() ? "<root>" : path_,
                        std::string("expected an object, got ") + type_name(j));
  }

  std::string field(const std::string& key) const { return join(path_, key); }

  const json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& require(const std::string& key) {
    const json* v = get(key);
    if (!v) throw ConfigError(field(key), "required key missing");
    return *v;
  }

  double number(const json& v, const std::string& key) const {
    if (!v.is_number())
      throw ConfigError(field(key), std::string("expected a number, got ") + type_name(v));
    return v.get<double>();
  }

  double num(const std::string& key, double def) {
    const json* v = get(key);
    return v ? number(*v, key) : def;
  }

  // Absent -> def, null -> nullopt.
  std::optional<double> opt_num(const std::string& key, std::optional<double> def) {
    const json* v = get(key);
    if (!v) return def;
    if (v->is_null()) return std::nullopt;
    return number(*v, key);
  }

  std::int64_t integer(const json& v, const std::string& key) const {
    if (!v.is_number_integer())
      throw ConfigError(field(key), std::string("expected an integer, got ") + type_name(v));
    return v.get<std::int64_t>();
  }

  std::int64_t int_or(const std::string& key, std::int64_t def) {
    const json* v = get(key);
    return v ? integer(*v, key) : def;
  }

  std::size_t count(const std::string& key, std::size_t def) {
    std::int64_t v = int_or(key, static_cast<std::int64_t>(def));
    if (v < 0) throw ConfigError(field(key), "must be >= 0");
    return static_cast<std::size_t>(v);
  }

  std::string str(const std::string& key, const std::string& def) {
    const json* v = get(key);
    if (!v) return def;
    if (!v->is_string())
      throw ConfigError(field(key), std::string("expected a string, got ") + type_name(*v));
    return v->get<std::string>();
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

Bytes gib_to_bytes(double gib, const std::string& field) {
  if (!(gib >= 0) || gib > 1e9) throw ConfigError(field, "must be a non-negative size");
  return static_cast<Bytes>(std::llround(gib * static_cast<double>(1ULL << 30)));
}

LengthDist parse_dist(const json& j, const std::string& path) {
  Obj o(j, path);
  std::string kind = o.str("kind", "");
  LengthDist d;
  if (kind == "constant") {
    d.kind = ConstantDist{o.integer(o.require("value"), "value")};
  } else if (kind == "normal") {
    ShortNormal n;
    n.mean = o.num("mean", n.mean);
    n.sd = o.num("sd", n.sd);
    d.kind = n;
  } else if (kind == "lognormal") {
    LongTailLogNormal l;
    l.mu = o.number(o.require("mu"), "mu");
    l.sigma = o.number(o.require("sigma"), "sigma");
    if (const json* c = o.get("cap"); c && !c->is_null()) l.cap = o.integer(*c, "cap");
    d.kind = l;
  } else if (kind == "mixture") {
    const json& comps = o.require("components");
    if (!comps.is_array() || comps.empty())
      throw ConfigError(o.field("components"), "expected a non-empty array");
    Mixture m;
    for (std::size_t i = 0; i < comps.size(); ++i) {
      std::string cpath = o.field("components") + "[" + std::to_string(i) + "]";
      Obj c(comps[i], cpath);
      m.weights.push_back(c.number(c.require("weight"), "weight"));
      m.components.push_back(parse_dist(c.require("dist"), c.field("dist")));
      c.finish();
    }
    d.kind = std::move(m);
  } else {
    throw ConfigError(o.field("kind"),
                      "expected constant, normal, lognormal or mixture, got '" + kind + "'");
  }
  o.finish();
  validate(d, path);
  return d;
}

TraceFormat parse_trace_format(const std::string& s, const std::string& field) {
  if (s == "csv") return TraceFormat::Csv;
  if (s == "jsonl") return TraceFormat::JsonLines;
  throw ConfigError(field, "expected csv or jsonl, got '" + s + "'");
}

WorkloadSource parse_workload(const json& j, const std::filesystem::path& base_dir,
                              Tokens l_max, Tokens max_output) {
  Obj o(j, "workload");
  if (const json* t = o.get("trace")) {
    Obj to(*t, "workload.trace");
    TraceSource src;
    std::filesystem::path p = to.str("path", "");
    if (p.empty()) throw ConfigError("workload.trace.path", "required key missing");
    src.path = p.is_relative() ? base_dir / p : p;
    if (to.get("format"))
      src.format = parse_trace_format(to.str("format", ""), "workload.trace.format");
    else
      src.format = format_for_path(src.path.string());
    if (const json* od = to.get("output")) src.output_fallback = parse_dist(*od, "workload.trace.output");
    to.finish();
    o.finish();
    return src;
  }
  WorkloadSpec w;
  if (const json* a = o.get("arrival")) {
    Obj ao(*a, "workload.arrival");
    std::string kind = ao.str("kind", "poisson");
    if (kind == "poisson")
      w.arrival = PoissonArrivals{ao.number(ao.require("rate"), "rate")};
    else if (kind == "fixed")
      w.arrival = FixedIntervalArrivals{ao.number(ao.require("gap"), "gap")};
    else
      throw ConfigError("workload.arrival.kind", "expected poisson or fixed, got '" + kind + "'");
    ao.finish();
  }
  if (const json* in = o.get("input")) w.input = parse_dist(*in, "workload.input");
  if (const json* out = o.get("output")) w.output = parse_dist(*out, "workload.output");
  const json* req = o.get("requests");
  const json* hor = o.get("horizon_s");
  if (req && hor) throw ConfigError("workload", "give either requests or horizon_s, not both");
  if (req) {
    std::int64_t n = o.integer(*req, "requests");
    if (n < 1) throw ConfigError("workload.requests", "must be >= 1");
    w.horizon = RequestCount{static_cast<std::size_t>(n)};
  } else if (hor) {
    w.horizon = TimeHorizon{o.number(*hor, "horizon_s")};
  }
  w.online_fraction = o.num("online_fraction", w.online_fraction);
  o.finish();
  w.max_input_len = l_max - 1;
  w.context_limit = l_max;
  w.max_output_len = max_output;
  return w;
}

ModelConfig parse_model(const json& j) {
  if (j.is_string()) {
    auto m = model_preset(j.get<std::string>());
    if (!m) {
      std::string names;
      for (const auto& n : model_preset_names()) names += (names.empty() ? "" : ", ") + n;
      throw ConfigError("model", "unknown preset '" + j.get<std::string>() +
                                     "' (known: " + names + ")");
    }
    return *m;
  }
  Obj o(j, "model");
  ModelConfig m;
  if (const json* p = o.get("preset")) {
    auto pm = p->is_string() ? model_preset(p->get<std::string>()) : std::nullopt;
    if (!pm) throw ConfigError("model.preset", "unknown preset");
    m = *pm;
  }
  m.layers = o.int_or("layers", m.layers);
  m.heads = o.int_or("heads", m.heads);
  m.head_dim = o.int_or("head_dim", m.head_dim);
  m.bytes_per_elem = o.int_or("bytes_per_elem", m.bytes_per_elem);
  m.max_seq_len = o.int_or("max_seq_len", m.max_seq_len);
  o.finish();
  return m;
}

ClusterConfig parse_cluster(const json& j) {
  Obj o(j, "cluster");
  ClusterConfig c;
  c.prefill_workers = o.count("prefill_workers", c.prefill_workers);
  c.decode_workers = o.count("decode_workers", c.decode_workers);
  if (const json* g = o.get("gpu")) {
    Obj go(*g, "cluster.gpu");
    if (const json* v = go.get("total_mem_gib"))
      c.gpu.total_mem = gib_to_bytes(go.number(*v, "total_mem_gib"), go.field("total_mem_gib"));
    if (const json* v = go.get("model_mem_gib"))
      c.gpu.model_mem = gib_to_bytes(go.number(*v, "model_mem_gib"), go.field("model_mem_gib"));
    c.gpu.reserve_fraction = go.num("reserve_fraction", c.gpu.reserve_fraction);
    go.finish();
  }
  o.finish();
  return c;
}

CostModel parse_cost(const json& j) {
  Obj o(j, "cost");
  CostModel c;
  c.prefill_base = o.num("prefill_base", c.prefill_base);
  c.prefill_per_token = o.num("prefill_per_token", c.prefill_per_token);
  c.decode_step_base = o.num("decode_step_base", c.decode_step_base);
  c.decode_per_kv_byte = o.num("decode_per_kv_byte", c.decode_per_kv_byte);
  c.transfer_bandwidth = o.num("transfer_bandwidth", c.transfer_bandwidth);
  c.transfer_latency = o.num("transfer_latency", c.transfer_latency);
  o.finish();
  return c;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("<file>", path.string() + ": " + e.what());
  }
}

}  // namespace

Scenario parse_scenario(const json& j, const std::filesystem::path& base_dir) {
  Obj o(j, "");
  Scenario s;
  SimConfig& c = s.sim;
  s.seed = static_cast<std::uint64_t>(o.int_or("seed", 0));

  c.model = parse_model(o.require("model"));
  validate(c.model);
  c.max_output_tokens = o.int_or("max_output_tokens", c.max_output_tokens);
  if (c.max_output_tokens < 1) throw ConfigError("max_output_tokens", "must be >= 1");

  try {
    c.policy = parse_policy(o.str("policy", "bucketserve"));
  } catch (const ConfigError& e) {
    throw ConfigError("policy", e.what());
  }
  std::string online = o.str("online_policy", "earliest_arrival");
  if (online != "earliest_arrival")
    throw ConfigError("online_policy", "only earliest_arrival is supported");
  std::string offline = o.str("offline_policy", "sjf");
  if (offline == "sjf")
    c.dispatch.offline = DispatchPolicy::Sjf;
  else if (offline == "ljf")
    c.dispatch.offline = DispatchPolicy::Ljf;
  else
    throw ConfigError("offline_policy", "expected sjf or ljf, got '" + offline + "'");
  std::string acct = o.str("memory_accounting", "padded");
  if (acct == "padded")
    c.accounting = MemoryAccounting::Padded;
  else if (acct == "exact")
    c.accounting = MemoryAccounting::Exact;
  else
    throw ConfigError("memory_accounting", "expected padded or exact, got '" + acct + "'");
  std::string resume = o.str("decode_resume", "retain");
  if (resume == "retain")
    c.resume = ResumeMode::Retain;
  else if (resume == "recompute")
    c.resume = ResumeMode::Recompute;
  else
    throw ConfigError("decode_resume", "expected retain or recompute, got '" + resume + "'");

  c.split_threshold = o.num("split_threshold", c.split_threshold);
  c.tick_interval = o.num("tick_interval", c.tick_interval);
  if (const json* v = o.get("cluster")) c.cluster = parse_cluster(*v);
  if (const json* v = o.get("cost")) c.cost = parse_cost(*v);

  c.slo.ttft = 1.0;
  if (const json* v = o.get("slo")) {
    Obj so(*v, "slo");
    c.slo.ttft = so.opt_num("ttft", 1.0);
    c.slo.e2e = so.opt_num("e2e", std::nullopt);
    so.finish();
  }

  s.workload = parse_workload(o.require("workload"), base_dir, c.model.max_seq_len,
                              c.max_output_tokens);
  o.finish();

  if (auto* w = std::get_if<WorkloadSpec>(&s.workload)) validate(*w);
  validate(c);
  return s;
}

Scenario load_scenario(const std::filesystem::path& path) {
  return parse_scenario(read_json_file(path), path.parent_path());
}

WorkloadSpec load_workload_file(const std::filesystem::path& path) {
  json j = read_json_file(path);
  if (j.is_object() && j.contains("model")) {
    Scenario s = parse_scenario(j, path.parent_path());
    auto* w = std::get_if<WorkloadSpec>(&s.workload);
    if (!w) throw ConfigError("workload", "trace workloads cannot be generated");
    w->seed = s.seed;
    return *w;
  }
  Obj o(j, "");
  auto seed = static_cast<std::uint64_t>(o.int_or("seed", 0));
  Tokens l_max = o.int_or("max_seq_len", 4096);
  Tokens max_out = o.int_or("max_output_tokens", 512);
  if (l_max < 2) throw ConfigError("max_seq_len", "must be >= 2");
  if (max_out < 1) throw ConfigError("max_output_tokens", "must be >= 1");
  auto src = parse_workload(o.require("workload"), path.parent_path(), l_max, max_out);
  o.finish();
  auto* w = std::get_if<WorkloadSpec>(&src);
  if (!w) throw ConfigError("workload", "trace workloads cannot be generated");
  w->seed = seed;
  validate(*w);
  return *w;
}

Trace build_trace(const Scenario& s) {
  if (const auto* w = std::get_if<WorkloadSpec>(&s.workload)) {
    WorkloadSpec spec = *w;
    spec.seed = s.seed;
    return gen_synthetic(spec);
  }
  const auto& src = std::get<TraceSource>(s.workload);
  std::ifstream in(src.path);
  if (!in) throw ConfigError("workload.trace.path", "cannot open " + src.path.string());
  TraceLoadOptions opts;
  opts.output = src.output_fallback;
  opts.seed = s.seed;
  opts.max_input_len = s.sim.model.max_seq_len - 1;
  opts.context_limit = s.sim.model.max_seq_len;
  opts.max_output_len = s.sim.max_output_tokens;
  return load_trace(in, src.format, opts);
}

Scenario with_load(const Scenario& s, double rps) {
  if (!(rps > 0)) throw ConfigError("load", "load points must be > 0");
  Scenario out = s;
  auto* w = std::get_if<WorkloadSpec>(&out.workload);
  if (!w) throw ConfigError("workload", "a load sweep needs a synthetic workload");
  if (auto* p = std::get_if<PoissonArrivals>(&w->arrival))
    p->rate = rps;
  else if (auto* f = std::get_if<FixedIntervalArrivals>(&w->arrival))
    f->gap = 1.0 / rps;
  return out;
}

namespace {

template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    err << "trace error: " << e.what() << '\n';
    return 2;
  } catch (const DomainError& e) {
    err << "invalid input: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return 3;
  }
}

Scenario load_with_overrides(const std::string& path, const CliOptions& opts) {
  Scenario s = load_scenario(path);
  if (opts.seed) s.seed = *opts.seed;
  return s;
}

// Writes to --out if given, else to the fallback stream.
class Sink {
 public:
  Sink(const std::optional<std::string>& path, std::ostream& fallback) : out_(&fallback) {
    if (path) {
      file_.open(*path);
      if (!file_) throw ConfigError("--out", "cannot write " + *path);
      out_ = &file_;
    }
  }
  std::ostream& stream() { return *out_; }

 private:
  std::ofstream file_;
  std::ostream* out_;
};

}  // namespace

int cmd_run(const std::string& scenario_path, const CliOptions& opts, std::ostream& out,
            std::ostream& err) {
  return guarded(err, [&] {
    Scenario s = load_with_overrides(scenario_path, opts);
    std::string fmt = opts.format.value_or("json");
    ReportFormat rf;
    if (fmt == "json")
      rf = ReportFormat::Json;
    else if (fmt == "table")
      rf = ReportFormat::Table;
    else
      throw ConfigError("--format", "run supports json or table, got '" + fmt + "'");
    Trace trace = build_trace(s);
    std::ofstream log;
    if (opts.log_events) {
      log.open(*opts.log_events);
      if (!log) throw ConfigError("--log-events", "cannot write " + *opts.log_events);
      s.sim.event_log = &log;
    }
    SimResult res = run(trace, s.sim);
    Sink sink(opts.out, out);
    emit_report(sink.stream(), res.report, rf, opts.with_timing);
    return 0;
  });
}

int cmd_sweep(const std::string& scenario_path, const std::vector<double>& loads,
              std::size_t repeats, const CliOptions& opts, std::ostream& out,
              std::ostream& err) {
  return guarded(err, [&] {
    if (loads.empty()) throw ConfigError("--loads", "at least one load point is required");
    if (repeats < 1) throw ConfigError("--repeats", "must be >= 1");
    std::string fmt = opts.format.value_or("csv");
    if (fmt != "csv") throw ConfigError("--format", "sweep emits csv only");
    Scenario base = load_with_overrides(scenario_path, opts);
    std::vector<double> sorted = loads;
    std::sort(sorted.begin(), sorted.end());
    Sink sink(opts.out, out);
    std::ostream& o = sink.stream();
    emit_sweep_csv_header(o);
    std::vector<LoadPoint> curve;
    std::uint64_t i = 0;
    for (double load : sorted) {
      std::vector<MetricsReport> reps;
      for (std::size_t r = 0; r < repeats; ++r, ++i) {
        Scenario s = with_load(base, load);
        s.seed = base.seed + i;
        reps.push_back(run(build_trace(s), s.sim).report);
      }
      SweepRow row = aggregate_sweep_point(load, reps);
      emit_sweep_csv_row(o, row);
      o.flush();
      curve.push_back({load, row.slo_attainment.value_or(0.0)});
    }
    GoodputResult g = goodput_at(0.8, curve);
    o << "# goodput@0.8," << g.rps << ',' << to_string(g.flag) << '\n';
    return 0;
  });
}

int cmd_gen_trace(const std::string& workload_path, const std::string& out_path,
                  const CliOptions& opts, std::ostream& err) {
  return guarded(err, [&] {
    WorkloadSpec w = load_workload_file(workload_path);
    if (opts.seed) w.seed = *opts.seed;
    Trace t = gen_synthetic(w);
    std::ofstream f(out_path);
    if (!f) throw ConfigError("out", "cannot write " + out_path);
    write_trace(f, t, format_for_path(out_path));
    f.flush();
    if (!f) throw ConfigError("out", "write failed for " + out_path);
    return 0;
  });
}

int cmd_validate(const std::string& scenario_path, const CliOptions& opts,
                 std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    Scenario s = load_with_overrides(scenario_path, opts);
    const SimConfig& c = s.sim;
    Trace t = build_trace(s);
    double mean_len = 0;
    for (const auto& r : t) mean_len += static_cast<double>(r.input_len);
    if (!t.empty()) mean_len /= static_cast<double>(t.size());
    Bytes safe = safe_memory(c.cluster.gpu);
    BatchController ctl(c.model, safe);
    json j = {
        {"model", {{"layers", c.model.layers},
                   {"heads", c.model.heads},
                   {"head_dim", c.model.head_dim},
                   {"bytes_per_elem", c.model.bytes_per_elem},
                   {"max_seq_len", c.model.max_seq_len}}},
        {"policy", to_config_string(c.policy)},
        {"bytes_per_token", c.model.bytes_per_token()},
        {"safe_memory", safe},
        {"token_budget", token_budget(c.model, c.cluster.gpu)},
        {"requests", t.size()},
        {"mean_input_len", mean_len},
        {"initial_n_max", ctl.n_max(mean_len)},
    };
    std::string fmt = opts.format.value_or("table");
    Sink sink(opts.out, out);
    if (fmt == "json") {
      sink.stream() << j.dump(2) << '\n';
    } else if (fmt == "table") {
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (it->is_object())
          for (auto m = it->begin(); m != it->end(); ++m)
            sink.stream() << it.key() << '.' << m.key() << ": " << m->dump() << '\n';
        else
          sink.stream() << it.key() << ": "
                        << (it->is_string() ? it->get<std::string>() : it->dump()) << '\n';
      }
    } else {
      throw ConfigError("--format", "validate supports json or table");
    }
    return 0;
  });
}

}  // namespace bucketserve
