#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "bucketserve/pd_sim.hpp"
#include "bucketserve/workload.hpp"

namespace bucketserve {

struct TraceSource {
  std::filesystem::path path;
  TraceFormat format = TraceFormat::Csv;
  LengthDist output_fallback{ConstantDist{64}};
};

using WorkloadSource = std::variant<WorkloadSpec, TraceSource>;

struct Scenario {
  std::uint64_t seed = 0;
  WorkloadSource workload;
  SimConfig sim;  // event_log is never set by parsing
};

// Strict parsing: unknown keys, wrong types and missing required sections
// throw ConfigError naming the dotted key path. Relative trace paths resolve
// against `base_dir`.
Scenario parse_scenario(const nlohmann::json& j,
                        const std::filesystem::path& base_dir = {});
Scenario load_scenario(const std::filesystem::path& path);

// Workload-only file for gen-trace: {"seed": n, "workload": {...}}. A full
// scenario file is accepted too.
WorkloadSpec load_workload_file(const std::filesystem::path& path);

// Applies the seed to the workload and materialises the trace.
Trace build_trace(const Scenario& s);

// Same scenario at a different offered load (Poisson rate or fixed gap).
Scenario with_load(const Scenario& s, double rps);

struct CliOptions {
  std::optional<std::string> out;
  std::optional<std::string> format;
  std::optional<std::string> log_events;
  std::optional<std::uint64_t> seed;
  bool with_timing = false;
};

// Exit codes: 0 ok, 2 config/usage error, 3 internal invariant breach.
int cmd_run(const std::string& scenario_path, const CliOptions& opts,
            std::ostream& out, std::ostream& err);
int cmd_sweep(const std::string& scenario_path, const std::vector<double>& loads,
              std::size_t repeats, const CliOptions& opts, std::ostream& out,
              std::ostream& err);
int cmd_gen_trace(const std::string& workload_path, const std::string& out_path,
                  const CliOptions& opts, std::ostream& err);
int cmd_validate(const std::string& scenario_path, const CliOptions& opts,
                 std::ostream& out, std::ostream& err);

}  // namespace bucketserve
