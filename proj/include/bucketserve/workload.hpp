#pragma once

#include <iosfwd>
#include <optional>
#include <random>
#include <variant>
#include <vector>

#include "bucketserve/request.hpp"

namespace bucketserve {

using Rng = std::mt19937_64;

struct ConstantDist {
  Tokens value = 1;
};

struct ShortNormal {
  double mean = 83.0;
  double sd = 40.0;
};

struct LongTailLogNormal {
  double mu = 6.0;
  double sigma = 1.0;
  std::optional<Tokens> cap;  // unset: no cap beyond the caller's clamp
};

struct LengthDist;

struct Mixture {
  std::vector<double> weights;
  std::vector<LengthDist> components;
};

struct LengthDist {
  std::variant<ConstantDist, ShortNormal, LongTailLogNormal, Mixture> kind;
};

struct PoissonArrivals {
  double rate = 1.0;  // requests/s
};
struct FixedIntervalArrivals {
  Seconds gap = 1.0;
};
struct TraceArrivals {};

using ArrivalProcess =
    std::variant<PoissonArrivals, FixedIntervalArrivals, TraceArrivals>;

struct RequestCount {
  std::size_t count = 0;
};
struct TimeHorizon {
  Seconds seconds = 0.0;
};
using Horizon = std::variant<RequestCount, TimeHorizon>;

struct WorkloadSpec {
  ArrivalProcess arrival = PoissonArrivals{};
  LengthDist input{ShortNormal{}};
  LengthDist output{ConstantDist{64}};
  Horizon horizon = RequestCount{1000};
  double online_fraction = 1.0;
  std::uint64_t seed = 0;
  // Inputs are truncated to this length (L_max - 1 so they fit [0, L_max)).
  Tokens max_input_len = 4095;
  // Outputs are clamped to min(max_output_len, context_limit - input_len).
  Tokens max_output_len = 512;
  Tokens context_limit = 4096;
};

// Throws ConfigError naming the offending field.
void validate(const LengthDist& dist, const std::string& field);
void validate(const WorkloadSpec& spec);

// Draws one value >= 1 from `dist` (rounded to the nearest token, clamped
// to the distribution's own cap if any).
Tokens sample_length(const LengthDist& dist, Rng& rng);
Tokens sample_output_len(const LengthDist& dist, Rng& rng);

Trace gen_synthetic(const WorkloadSpec& spec);

enum class TraceFormat { JsonLines, Csv };

struct TraceLoadOptions {
  // Used when a record has no output length.
  LengthDist output{ConstantDist{64}};
  std::uint64_t seed = 0;
  Tokens max_input_len = 4095;
  Tokens max_output_len = 512;
  Tokens context_limit = 4096;
};

// Throws ParseError with the 1-based line number of the first bad record.
Trace load_trace(std::istream& in, TraceFormat format,
                 const TraceLoadOptions& opts = {});

void write_trace(std::ostream& out, const Trace& trace, TraceFormat format);

// Picks the format from a path extension: .jsonl/.json -> JsonLines,
// anything else -> Csv.
TraceFormat format_for_path(const std::string& path);

}  // namespace bucketserve
