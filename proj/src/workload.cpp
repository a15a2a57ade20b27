#include "bucketserve/workload.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "bucketserve/errors.hpp"

namespace bucketserve {

std::string_view to_string(TaskClass c) {
  return c == TaskClass::Online ? "online" : "offline";
}

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

Tokens round_to_tokens(double x) {
  if (!std::isfinite(x) || x < 1.0) return 1;
  // Anything past 2^62 is clamped later anyway.
  if (x > 4.0e18) return static_cast<Tokens>(4.0e18);
  return std::max<Tokens>(1, std::llround(x));
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

Tokens clamp_output(Tokens out, Tokens input, Tokens max_output,
                    Tokens context_limit) {
  Tokens limit = std::min(max_output, context_limit - input);
  return std::clamp<Tokens>(out, 1, std::max<Tokens>(1, limit));
}

}  // namespace

void validate(const LengthDist& dist, const std::string& field) {
  std::visit(
      Overloaded{
          [&](const ConstantDist& d) {
            if (d.value < 1) throw ConfigError(field + ".value", "must be >= 1");
          },
          [&](const ShortNormal& d) {
            if (!(d.mean > 0)) throw ConfigError(field + ".mean", "must be > 0");
            if (!(d.sd > 0)) throw ConfigError(field + ".sd", "must be > 0");
          },
          [&](const LongTailLogNormal& d) {
            if (!(d.mu > 0)) throw ConfigError(field + ".mu", "must be > 0");
            if (!(d.sigma > 0))
              throw ConfigError(field + ".sigma", "must be > 0");
            if (d.cap && *d.cap < 1)
              throw ConfigError(field + ".cap", "must be >= 1");
          },
          [&](const Mixture& d) {
            if (d.weights.empty() || d.weights.size() != d.components.size())
              throw ConfigError(field + ".components",
                                "need one weight per component");
            double sum = 0.0;
            for (std::size_t i = 0; i < d.weights.size(); ++i) {
              if (!(d.weights[i] > 0))
                throw ConfigError(field + ".components[" + std::to_string(i) +
                                      "].weight",
                                  "must be > 0");
              sum += d.weights[i];
              validate(d.components[i],
                       field + ".components[" + std::to_string(i) + "]");
            }
            if (std::abs(sum - 1.0) > 1e-9)
              throw ConfigError(field + ".components", "weights must sum to 1");
          },
      },
      dist.kind);
}

void validate(const WorkloadSpec& spec) {
  std::visit(Overloaded{
                 [](const PoissonArrivals& a) {
                   if (!(a.rate > 0))
                     throw ConfigError("arrival.rate", "must be > 0");
                 },
                 [](const FixedIntervalArrivals& a) {
                   if (!(a.gap > 0))
                     throw ConfigError("arrival.gap", "must be > 0");
                 },
                 [](const TraceArrivals&) {
                   throw ConfigError("arrival",
                                     "trace arrivals require load_trace");
                 },
             },
             spec.arrival);
  validate(spec.input, "input");
  validate(spec.output, "output");
  if (!(spec.online_fraction >= 0.0 && spec.online_fraction <= 1.0))
    throw ConfigError("online_fraction", "must lie in [0, 1]");
  if (spec.max_input_len < 1)
    throw ConfigError("max_input_len", "must be >= 1");
  if (spec.max_output_len < 1)
    throw ConfigError("max_output_len", "must be >= 1");
  if (spec.context_limit <= spec.max_input_len)
    throw ConfigError("context_limit", "must exceed max_input_len");
  if (auto* t = std::get_if<TimeHorizon>(&spec.horizon); t && !(t->seconds > 0))
    throw ConfigError("horizon", "must be > 0 seconds");
}

Tokens sample_length(const LengthDist& dist, Rng& rng) {
  return std::visit(
      Overloaded{
          [](const ConstantDist& d) -> Tokens { return std::max<Tokens>(1, d.value); },
          [&](const ShortNormal& d) -> Tokens {
            std::normal_distribution<double> n(d.mean, d.sd);
            return round_to_tokens(n(rng));
          },
          [&](const LongTailLogNormal& d) -> Tokens {
            std::lognormal_distribution<double> n(d.mu, d.sigma);
            Tokens v = round_to_tokens(n(rng));
            return d.cap ? std::min(v, *d.cap) : v;
          },
          [&](const Mixture& d) -> Tokens {
            std::uniform_real_distribution<double> u(0.0, 1.0);
            double x = u(rng);
            double acc = 0.0;
            for (std::size_t i = 0; i + 1 < d.weights.size(); ++i) {
              acc += d.weights[i];
              if (x < acc) return sample_length(d.components[i], rng);
            }
            return sample_length(d.components.back(), rng);
          },
      },
      dist.kind);
}

Tokens sample_output_len(const LengthDist& dist, Rng& rng) {
  return sample_length(dist, rng);
}

Trace gen_synthetic(const WorkloadSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  std::bernoulli_distribution online(spec.online_fraction);

  std::size_t max_count = std::numeric_limits<std::size_t>::max();
  Seconds max_time = std::numeric_limits<Seconds>::infinity();
  if (auto* c = std::get_if<RequestCount>(&spec.horizon)) max_count = c->count;
  if (auto* t = std::get_if<TimeHorizon>(&spec.horizon)) max_time = t->seconds;

  Trace trace;
  Seconds t = 0.0;
  for (std::size_t i = 0; i < max_count; ++i) {
    if (auto* p = std::get_if<PoissonArrivals>(&spec.arrival)) {
      std::exponential_distribution<double> gap(p->rate);
      t += gap(rng);
    } else if (auto* f = std::get_if<FixedIntervalArrivals>(&spec.arrival);
               f && i > 0) {
      t = static_cast<double>(i) * f->gap;
    }
    if (t > max_time) break;

    Request r;
    r.id = static_cast<RequestId>(i);
    r.arrival_time = t;
    r.input_len = std::min(sample_length(spec.input, rng), spec.max_input_len);
    r.output_len = clamp_output(sample_output_len(spec.output, rng),
                                r.input_len, spec.max_output_len,
                                spec.context_limit);
    r.task_class = online(rng) ? TaskClass::Online : TaskClass::Offline;
    trace.push_back(r);
  }
  return trace;
}

namespace {

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double parse_number(const std::string& field, std::size_t line,
                    const char* name) {
  double v = 0.0;
  auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size() ||
      !std::isfinite(v))
    throw ParseError(line, std::string("bad ") + name + " '" + field + "'");
  return v;
}

Tokens parse_tokens(const std::string& field, std::size_t line,
                    const char* name) {
  Tokens v = 0;
  auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size())
    throw ParseError(line, std::string("bad ") + name + " '" + field + "'");
  if (v < 1) throw ParseError(line, std::string(name) + " must be >= 1");
  return v;
}

TaskClass parse_class(const std::string& s, std::size_t line) {
  if (s == "online") return TaskClass::Online;
  if (s == "offline") return TaskClass::Offline;
  throw ParseError(line, "bad class '" + s + "'");
}

struct RawRecord {
  std::optional<RequestId> id;
  Seconds arrival = 0.0;
  Tokens input = 1;
  std::optional<Tokens> output;
  TaskClass cls = TaskClass::Online;
};

RawRecord parse_csv_line(const std::string& line, std::size_t lineno) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) fields.push_back(trim(f));
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  if (fields.size() != 4)
    throw ParseError(lineno, "expected 4 fields, got " +
                                 std::to_string(fields.size()));
  RawRecord r;
  r.arrival = parse_number(fields[0], lineno, "arrival_s");
  if (r.arrival < 0) throw ParseError(lineno, "arrival_s must be >= 0");
  r.input = parse_tokens(fields[1], lineno, "input_tokens");
  if (!fields[2].empty())
    r.output = parse_tokens(fields[2], lineno, "output_tokens");
  r.cls = parse_class(fields[3], lineno);
  return r;
}

RawRecord parse_json_line(const std::string& line, std::size_t lineno) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(lineno, "invalid JSON");
  }
  if (!j.is_object()) throw ParseError(lineno, "expected a JSON object");
  RawRecord r;
  for (auto& [key, value] : j.items()) {
    if (key == "id") {
      if (!value.is_number_integer()) throw ParseError(lineno, "bad id");
      r.id = value.get<RequestId>();
    } else if (key == "arrival_s") {
      if (!value.is_number()) throw ParseError(lineno, "bad arrival_s");
      r.arrival = value.get<double>();
      if (r.arrival < 0) throw ParseError(lineno, "arrival_s must be >= 0");
    } else if (key == "input_tokens") {
      if (!value.is_number_integer() || value.get<Tokens>() < 1)
        throw ParseError(lineno, "bad input_tokens");
      r.input = value.get<Tokens>();
    } else if (key == "output_tokens") {
      if (value.is_null()) continue;
      if (!value.is_number_integer() || value.get<Tokens>() < 1)
        throw ParseError(lineno, "bad output_tokens");
      r.output = value.get<Tokens>();
    } else if (key == "class") {
      if (!value.is_string()) throw ParseError(lineno, "bad class");
      r.cls = parse_class(value.get<std::string>(), lineno);
    } else {
      throw ParseError(lineno, "unknown key '" + key + "'");
    }
  }
  for (const char* k : {"arrival_s", "input_tokens", "class"})
    if (!j.contains(k)) throw ParseError(lineno, std::string("missing ") + k);
  return r;
}

}  // namespace

Trace load_trace(std::istream& in, TraceFormat format,
                 const TraceLoadOptions& opts) {
  Rng rng(opts.seed);
  Trace trace;
  std::set<RequestId> seen;
  std::string line;
  std::size_t lineno = 0;
  bool first_content = true;
  while (std::getline(in, line)) {
    ++lineno;
    std::string body = trim(line);
    if (body.empty()) continue;
    if (format == TraceFormat::Csv && first_content &&
        body.rfind("arrival_s", 0) == 0) {
      first_content = false;
      continue;
    }
    first_content = false;
    RawRecord raw = format == TraceFormat::Csv ? parse_csv_line(body, lineno)
                                               : parse_json_line(body, lineno);
    Request r;
    r.id = raw.id.value_or(static_cast<RequestId>(trace.size()));
    if (!seen.insert(r.id).second)
      throw ParseError(lineno, "duplicate id " + std::to_string(r.id));
    r.arrival_time = raw.arrival;
    r.input_len = std::min(raw.input, opts.max_input_len);
    Tokens out = raw.output ? *raw.output : sample_output_len(opts.output, rng);
    r.output_len = clamp_output(out, r.input_len, opts.max_output_len,
                                opts.context_limit);
    r.task_class = raw.cls;
    trace.push_back(r);
  }
  std::stable_sort(trace.begin(), trace.end(),
                   [](const Request& a, const Request& b) {
                     return a.arrival_time < b.arrival_time;
                   });
  return trace;
}

void write_trace(std::ostream& out, const Trace& trace, TraceFormat format) {
  if (format == TraceFormat::Csv) {
    out << "arrival_s,input_tokens,output_tokens,class\n";
    for (const auto& r : trace)
      out << format_double(r.arrival_time) << ',' << r.input_len << ','
          << r.output_len << ',' << to_string(r.task_class) << '\n';
    return;
  }
  for (const auto& r : trace) {
    out << "{\"id\":" << r.id
        << ",\"arrival_s\":" << format_double(r.arrival_time)
        << ",\"input_tokens\":" << r.input_len
        << ",\"output_tokens\":" << r.output_len << ",\"class\":\""
        << to_string(r.task_class) << "\"}\n";
  }
}

TraceFormat format_for_path(const std::string& path) {
  auto ends_with = [&](std::string_view suf) {
    return path.size() >= suf.size() &&
           path.compare(path.size() - suf.size(), suf.size(), suf) == 0;
  };
  return ends_with(".jsonl") || ends_with(".json") ? TraceFormat::JsonLines
                                                  : TraceFormat::Csv;
}

}  // namespace bucketserve
