#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "resflow/alloc.hpp"
#include "resflow/dataflow_sim.hpp"
#include "resflow/model_ir.hpp"

namespace resflow::cli {

// Only n_par and the clock feed the planner; the rest is reported as is.
struct Board {
  std::string name;
  int64_t n_par = 0;
  double freq_mhz = 0;
  int dsp = 0;
  int bram36 = 0;
  int uram = 0;
};

const std::vector<Board>& boards();
std::optional<Board> find_board(std::string_view name);

enum ExitCode : int {
  kOk = 0,
  kInvalidInput = 1,
  kInfeasible = 2,
  kMismatch = 3,
  kDeadlock = 4,
};

struct RunConfig {
  std::string model;
  std::string weights;
  std::string board = "kv260";
  int64_t n_par = 0;     // 0: board preset
  double freq_mhz = 0;   // 0: board preset
  int frames = 1;
  uint64_t seed = 1;
  std::string out_dir;   // empty: nothing written
  std::string golden;    // directory written by generate
  std::string trace_csv;
  bool dump_opt_graph = false;
  alloc::BudgetUnit unit = alloc::BudgetUnit::dsp;

  // Board defaults applied; throws ConfigError.
  RunConfig resolved() const;
};

// What a command prints: JSON on stdout, the human summary on stderr.
struct Outcome {
  int exit_code = kOk;
  std::string json;
  std::string text;
};

// Widest activation or weight format feeding a conv-like layer.
int model_bit_width(const Graph& g);

// Everything a command needs after parse, optimize and allocation.
struct Pipeline {
  Graph graph;
  Graph optimized;
  alloc::AllocationPlan plan;
  alloc::Prediction prediction;
};

Pipeline build_pipeline(const Graph& g, const RunConfig& cfg);

std::string plan_json(const Pipeline& p, const RunConfig& cfg);
std::string plan_text(const Pipeline& p, const RunConfig& cfg);
std::string trace_json(const sim::Network& net, const sim::SimTrace& trace, const RunConfig& cfg);
// Consolidated view of one plan and one trace, both as produced above.
std::string report_json(const std::string& plan, const std::string& trace);

Outcome cmd_plan(const RunConfig& cfg);
Outcome cmd_simulate(const RunConfig& cfg);
Outcome cmd_verify(const RunConfig& cfg);
Outcome cmd_report(const RunConfig& cfg);

struct GenerateConfig {
  std::string net = "resnet8";  // resnet8 | resnet20
  uint64_t seed = 1;
  int frames = 0;  // golden frames; 0 writes none
  std::string out_dir;
};

// Writes model.json, weights.bin and, with frames > 0, golden/.
Outcome cmd_generate(const GenerateConfig& cfg);

// {"error": kind, "message": ...} with the given exit code.
Outcome error_outcome(int code, const std::string& kind, const std::string& message);

}  // namespace resflow::cli
