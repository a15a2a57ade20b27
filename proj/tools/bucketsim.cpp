#include <iostream>

#include <CLI11.hpp>

#include "bucketserve/scenario.hpp"

int main(int argc, char** argv) {
  using namespace bucketserve;
  CLI::App app{"bucketsim: discrete-event simulator for bucketed LLM serving"};
  app.require_subcommand(1);

  CliOptions opts;
  std::string scenario, out_trace;
  std::vector<double> loads;
  std::size_t repeats = 1;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub, bool with_log) {
    sub->add_option("--out", opts.out, "Write output to this path");
    sub->add_option("--format", opts.format, "json | table | csv");
    sub->add_option("--seed", seed, "Override the scenario seed");
    if (with_log) sub->add_option("--log-events", opts.log_events, "JSON-lines event log");
  };

  auto* run = app.add_subcommand("run", "Run one scenario and print a report");
  run->add_option("scenario", scenario, "Scenario file (JSON)")->required();
  run->add_flag("--with-timing", opts.with_timing, "Include wall-clock timing in JSON");
  common(run, true);

  auto* sweep = app.add_subcommand("sweep", "Sweep offered load and emit a CSV curve");
  sweep->add_option("scenario", scenario, "Scenario file (JSON)")->required();
  sweep->add_option("--loads", loads, "Offered loads in requests/s")->delimiter(',');
  sweep->add_option("--repeats", repeats, "Repeats per load point");
  common(sweep, false);

  auto* gen = app.add_subcommand("gen-trace", "Generate a synthetic trace file");
  gen->add_option("workload", scenario, "Workload or scenario file (JSON)")->required();
  gen->add_option("out", out_trace, "Trace path (.csv or .jsonl)")->required();
  gen->add_option("--seed", seed, "Override the workload seed");

  auto* val = app.add_subcommand("validate", "Check a scenario and print derived limits");
  val->add_option("scenario", scenario, "Scenario file (JSON)")->required();
  common(val, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  for (auto* sub : {run, sweep, gen, val})
    if (sub->count_all() && sub->get_option("--seed")->count()) opts.seed = seed;

  if (*run) return cmd_run(scenario, opts, std::cout, std::cerr);
  if (*sweep) return cmd_sweep(scenario, loads, repeats, opts, std::cout, std::cerr);
  if (*gen) return cmd_gen_trace(scenario, out_trace, opts, std::cerr);
  return cmd_validate(scenario, opts, std::cout, std::cerr);
}
