#include <CLI11.hpp>

#include <iostream>

#include "resflow/cli_report.hpp"

using namespace resflow;

namespace {

void add_run_options(CLI::App* sub, cli::RunConfig& cfg, std::string& unit) {
  sub->add_option("--model", cfg.model, "model manifest (JSON)")->required();
  sub->add_option("--weights", cfg.weights, "weight blob")->required();
  sub->add_option("--board", cfg.board, "board preset")->check(CLI::IsMember({"ultra96", "kv260"}));
  sub->add_option("--n-par", cfg.n_par, "parallelism budget, overrides the board");
  sub->add_option("--freq-mhz", cfg.freq_mhz, "clock, overrides the board");
  sub->add_option("--budget-unit", unit, "what n_par counts")->check(CLI::IsMember({"dsp", "lane"}));
  sub->add_option("--out", cfg.out_dir, "directory for JSON outputs");
}

void add_sim_options(CLI::App* sub, cli::RunConfig& cfg) {
  sub->add_option("--frames", cfg.frames, "frames to simulate");
  sub->add_option("--seed", cfg.seed, "input seed");
  sub->add_option("--trace-csv", cfg.trace_csv, "per-cycle task events");
}

int emit(const cli::Outcome& o) {
  std::cout << o.json << "\n";
  std::cerr << o.text;
  return o.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Residual CNN dataflow planner and simulator"};
  app.require_subcommand(1);

  cli::RunConfig cfg;
  std::string unit = "dsp";

  auto* plan = app.add_subcommand("plan", "optimize the graph and allocate parallelism");
  add_run_options(plan, cfg, unit);
  plan->add_flag("--dump-opt-graph", cfg.dump_opt_graph, "print the rewritten graph instead of the plan");

  auto* simulate = app.add_subcommand("simulate", "run the dataflow simulation");
  add_run_options(simulate, cfg, unit);
  add_sim_options(simulate, cfg);

  auto* verify = app.add_subcommand("verify", "compare the simulation with the reference interpreter");
  add_run_options(verify, cfg, unit);
  add_sim_options(verify, cfg);
  verify->add_option("--golden", cfg.golden, "golden directory from generate");

  auto* report = app.add_subcommand("report", "plan, simulate and summarize");
  add_run_options(report, cfg, unit);
  add_sim_options(report, cfg);

  cli::GenerateConfig gen;
  auto* generate = app.add_subcommand("generate", "write a seeded ResNet model");
  generate->add_option("--net", gen.net, "network")->check(CLI::IsMember({"resnet8", "resnet20"}));
  generate->add_option("--seed", gen.seed, "parameter and input seed");
  generate->add_option("--frames", gen.frames, "golden frames to record");
  generate->add_option("--out", gen.out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cli::kInvalidInput;
  }

  cfg.unit = alloc::budget_unit_from_string(unit);
  if (*plan) return emit(cli::cmd_plan(cfg));
  if (*simulate) return emit(cli::cmd_simulate(cfg));
  if (*verify) return emit(cli::cmd_verify(cfg));
  if (*report) return emit(cli::cmd_report(cfg));
  return emit(cli::cmd_generate(gen));
}
