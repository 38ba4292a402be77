#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "resflow/model_ir.hpp"

namespace resflow::alloc {

// What the budget counts. `dsp`: physical multipliers, k*och_par (one packed
// DSP serves both ow_par lanes). `lane`: MAC lanes, k*och_par*ow_par.
enum class BudgetUnit { dsp, lane };

std::string_view to_string(BudgetUnit u);
BudgetUnit budget_unit_from_string(std::string_view s);

// Exact non-negative rational, compared by cross multiplication.
struct Ratio {
  int64_t num = 0;
  int64_t den = 1;

  double value() const { return double(num) / double(den); }
  friend bool operator<(const Ratio& a, const Ratio& b) { return __int128(a.num) * b.den < __int128(b.num) * a.den; }
  friend bool operator==(const Ratio& a, const Ratio& b) {
    return __int128(a.num) * b.den == __int128(b.num) * a.den;
  }
  friend bool operator<=(const Ratio& a, const Ratio& b) { return !(b < a); }
};

struct LayerAlloc {
  std::string id;
  int k = 1;
  int och = 1;
  int och_par = 1;
  int ow_par = 1;
  int64_t cp = 0;
  int64_t c = 0;
  Ratio r;  // c / c_max

  int och_groups() const { return och / och_par; }
  int64_t dsp() const { return int64_t{k} * och_par; }
  Ratio throughput() const { return {cp, c}; }
};

struct WindowPlan {
  int64_t buffer_codes = 0;
  std::vector<int64_t> slice_sizes;  // gap in codes before each tap, newest tap first (0)
  int slice_count = 0;
  int window_elements = 0;
  int window_width = 0;  // columns covered per row
  int rewire_step = 1;
  bool padding_enabled = false;
};

// Physical stream between two tasks.
struct StreamPlan {
  std::string from;
  std::string to;
  EdgeKind kind = EdgeKind::data;
  int lanes = 1;        // parallel channels
  int token_codes = 1;  // codes per token
  int64_t depth = 2;    // tokens per lane (the largest, when lanes differ)
  std::vector<int64_t> lane_depths;  // skip streams only

  int64_t depth_of(int lane) const {
    return lane_depths.empty() ? depth : lane_depths.at(static_cast<size_t>(lane));
  }
};

struct Prediction {
  double fps = 0;
  double gops = 0;
  int64_t latency_estimate_cycles = 0;
  int64_t interval_cycles = 0;
};

struct AllocationPlan {
  std::vector<LayerAlloc> layers;  // conv-like nodes, topological order
  int64_t n_par_budget = 0;
  BudgetUnit unit = BudgetUnit::dsp;
  int bw = 8;
  int64_t cp_tot = 0;
  int64_t dsp_tot = 0;
  std::string i_max;
  std::string bottleneck;
  Ratio min_throughput;
  std::map<std::string, WindowPlan> windows;
  std::map<std::string, int64_t> cw;
  std::vector<StreamPlan> streams;

  const LayerAlloc& layer(const std::string& id) const;
  const LayerAlloc* find(const std::string& id) const;
  int64_t budget_used() const { return unit == BudgetUnit::dsp ? dsp_tot : cp_tot; }
  const StreamPlan* stream(const std::string& from, const std::string& to, EdgeKind kind) const;
};

inline constexpr int64_t kParamStreamDepth = 2;

// ow_par is fixed by bit-width: 2 for 8-bit spatial convolutions whose
// output width is even, else 1.
int ow_par_for(const LayerNode& n, int bw);

std::vector<int> divisors(int n);

// Max-min throughput allocation under the budget. Throws InfeasibleBudget
// when even och_par = 1 everywhere does not fit.
AllocationPlan solve_allocation(const Graph& g, int64_t n_par, int bw, BudgetUnit unit = BudgetUnit::dsp);

WindowPlan window_buffer_plan(const LayerGeom& geom, int ow_par);

int64_t parameter_bandwidth(const LayerGeom& geom, int och_par);

// Tokens held by lane `lane` of the skip stream feeding conv1 (geometry g1).
int64_t skip_stream_depth(const LayerGeom& g1, EdgeKind kind, int lanes, int lane, int token_codes);

// Fills plan.streams for g: output, parameter and skip streams.
std::vector<StreamPlan> stream_depths(const Graph& g, const AllocationPlan& plan);

Prediction predict(const AllocationPlan& plan, double freq_mhz);

// Budget cost of a single layer at a given och_par.
int64_t layer_cost(int k, int ow_par, int och_par, BudgetUnit unit);

}  // namespace resflow::alloc
