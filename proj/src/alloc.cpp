#include "resflow/alloc.hpp"

#include <algorithm>
#include <numeric>

#include "resflow/graph_opt.hpp"

namespace resflow::alloc {

std::string_view to_string(BudgetUnit u) { return u == BudgetUnit::dsp ? "dsp" : "lane"; }

BudgetUnit budget_unit_from_string(std::string_view s) {
  if (s == "dsp") return BudgetUnit::dsp;
  if (s == "lane") return BudgetUnit::lane;
  throw ConfigError("unknown budget unit '" + std::string(s) + "'");
}

const LayerAlloc* AllocationPlan::find(const std::string& id) const {
  for (const auto& l : layers) {
    if (l.id == id) return &l;
  }
  return nullptr;
}

const LayerAlloc& AllocationPlan::layer(const std::string& id) const {
  if (auto* l = find(id)) return *l;
  throw PlanningError("plan has no layer '" + id + "'");
}

const StreamPlan* AllocationPlan::stream(const std::string& from, const std::string& to, EdgeKind kind) const {
  for (const auto& s : streams) {
    if (s.from == from && s.to == to && s.kind == kind) return &s;
  }
  return nullptr;
}

int ow_par_for(const LayerNode& n, int bw) {
  if (bw != 8) return 1;
  if (n.kind != LayerKind::conv && n.kind != LayerKind::pointwise_conv) return 1;
  return (n.geom.ow % 2 == 0 && n.geom.iw % 2 == 0) ? 2 : 1;
}

std::vector<int> divisors(int n) {
  std::vector<int> d;
  for (int i = 1; i <= n; ++i) {
    if (n % i == 0) d.push_back(i);
  }
  return d;
}

int64_t layer_cost(int k, int ow_par, int och_par, BudgetUnit unit) {
  const int64_t dsp = int64_t{k} * och_par;
  return unit == BudgetUnit::dsp ? dsp : dsp * ow_par;
}

namespace {

struct Candidate {
  LayerAlloc base;
  std::vector<int> divs;
};

// Smallest och_par whose throughput reaches t, or 0 if none does.
int min_och_par(const Candidate& cd, const Ratio& t) {
  for (int d : cd.divs) {
    const Ratio th{int64_t{cd.base.k} * cd.base.ow_par * d, cd.base.c};
    if (t <= th) return d;
  }
  return 0;
}

// Budget needed to give every layer throughput >= t; -1 if unreachable.
int64_t cost_at(const std::vector<Candidate>& cs, const Ratio& t, BudgetUnit unit) {
  int64_t total = 0;
  for (const auto& cd : cs) {
    const int d = min_och_par(cd, t);
    if (d == 0) return -1;
    total += layer_cost(cd.base.k, cd.base.ow_par, d, unit);
  }
  return total;
}

}  // namespace

AllocationPlan solve_allocation(const Graph& g, int64_t n_par, int bw, BudgetUnit unit) {
  if (n_par < 1) throw ConfigError("n_par must be >= 1");
  AllocationPlan plan;
  plan.n_par_budget = n_par;
  plan.unit = unit;
  plan.bw = bw;

  std::vector<Candidate> cs;
  int64_t c_max = 0;
  for (const auto& id : g.topo_order()) {
    const auto& n = g.node(id);
    if (!is_conv_like(n.kind)) continue;
    Candidate cd;
    cd.base.id = id;
    cd.base.k = n.geom.fh * n.geom.fw;
    cd.base.och = n.geom.och;
    cd.base.ow_par = ow_par_for(n, bw);
    cd.base.c = layer_macs(n.geom);
    cd.divs = divisors(n.geom.och);
    if (cd.base.c > c_max) {
      c_max = cd.base.c;
      plan.i_max = id;
    }
    cs.push_back(std::move(cd));
  }
  if (cs.empty()) throw PlanningError("graph has no convolution layers to allocate");

  int64_t min_cost = 0;
  for (const auto& cd : cs) min_cost += layer_cost(cd.base.k, cd.base.ow_par, 1, unit);
  if (min_cost > n_par) {
    throw InfeasibleBudget("budget " + std::to_string(n_par) + " below the minimum " + std::to_string(min_cost) +
                           " (" + std::string(to_string(unit)) + ") needed for och_par = 1 everywhere");
  }

  // The optimum bottleneck throughput is one of the per-layer achievable
  // values cp/c. Feasibility is monotone in t, so binary search the sorted
  // candidate set.
  std::vector<Ratio> ts;
  for (const auto& cd : cs) {
    for (int d : cd.divs) ts.push_back({int64_t{cd.base.k} * cd.base.ow_par * d, cd.base.c});
  }
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  // ts[0] is at most every layer's och_par=1 throughput, hence feasible.
  size_t lo = 0, hi = ts.size();
  while (hi - lo > 1) {
    const size_t mid = (lo + hi) / 2;
    const int64_t cost = cost_at(cs, ts[mid], unit);
    if (cost >= 0 && cost <= n_par) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  const Ratio t = ts[lo];

  plan.min_throughput = {0, 1};
  bool first = true;
  for (const auto& cd : cs) {
    LayerAlloc la = cd.base;
    la.och_par = min_och_par(cd, t);
    la.cp = int64_t{la.k} * la.och_par * la.ow_par;
    la.r = {la.c, c_max};
    const int64_t gd = std::gcd(la.r.num, la.r.den);
    la.r = {la.r.num / gd, la.r.den / gd};
    plan.cp_tot += la.cp;
    plan.dsp_tot += la.dsp();
    if (first || la.throughput() < plan.min_throughput) {
      plan.min_throughput = la.throughput();
      plan.bottleneck = la.id;
      first = false;
    }
    plan.layers.push_back(la);
  }

  for (const auto& la : plan.layers) {
    const auto& n = g.node(la.id);
    plan.cw[la.id] = parameter_bandwidth(n.geom, la.och_par);
    plan.windows[la.id] = window_buffer_plan(n.geom, la.ow_par);
  }
  plan.streams = stream_depths(g, plan);
  return plan;
}

WindowPlan window_buffer_plan(const LayerGeom& g, int ow_par) {
  if (ow_par != 1 && ow_par != 2) throw ConfigError("ow_par must be 1 or 2");
  WindowPlan w;
  // Columns touched by ow_par adjacent outputs in one row.
  const int width = g.fw + (ow_par - 1) * g.stride;
  if (width > g.iw) throw ConfigError("window width " + std::to_string(width) + " exceeds input width");
  w.window_width = width;
  w.window_elements = width * g.fh;
  w.rewire_step = ow_par;
  w.padding_enabled = g.pad > 0;
  w.buffer_codes = (int64_t{g.fh - 1} * g.iw + width - 1) * g.ich;
  if (w.window_elements == 1) return w;
  w.slice_count = w.window_elements;
  // Gap between taps adjacent in stream order: one position within a row,
  // the rest of the row plus the window start across rows.
  const int64_t s1 = g.ich;
  const int64_t s2 = int64_t{g.ich} * (g.iw - width + 1);
  w.slice_sizes.push_back(0);
  for (int r = 0; r < g.fh; ++r) {
    for (int q = 0; q < width; ++q) {
      if (r == 0 && q == 0) continue;
      w.slice_sizes.push_back(q == 0 ? s2 : s1);
    }
  }
  return w;
}

int64_t parameter_bandwidth(const LayerGeom& g, int och_par) { return int64_t{och_par} * g.fh * g.fw; }

namespace {

int out_lanes(const Graph& g, const AllocationPlan& plan, const std::string& id) {
  const auto& n = g.node(id);
  if (auto* la = plan.find(id)) return la->ow_par;
  if (n.kind == LayerKind::input) {
    // The DMA source matches the lane count of its first consumer.
    for (const auto& e : g.out_edges(id)) {
      if (auto* la = plan.find(e.to)) return la->ow_par;
    }
    return 1;
  }
  return 1;
}

}  // namespace

int64_t skip_stream_depth(const LayerGeom& g1, EdgeKind kind, int lanes, int lane, int token_codes) {
  if (lanes < 1 || token_codes < 1) throw ConfigError("skip stream needs positive lanes and token size");
  if (lane < 0 || lane >= lanes) throw ConfigError("skip lane out of range");
  int64_t codes = 0;
  if (kind == EdgeKind::skip_forward) {
    // Forwarded at conv0's window head, consumed when conv1's window closes:
    // conv1's window history split over the lanes, plus the lane skew. Lane l
    // is read l positions later than lane 0 is written.
    codes = opt::skip_buffer_optimized(g1) / lanes + int64_t{lanes - lane} * g1.ich;
  } else {
    // Produced alongside conv0's output at the same position, consumed once
    // conv1's window reaches the rows and columns below and right of it. conv0
    // releases a position's output only after its last group, so the skip
    // runs one position ahead of the data.
    const int64_t rows = std::max(0, g1.fh - 1 - g1.pad);
    const int64_t cols = std::max(0, g1.fw - 1 - g1.pad);
    codes = (rows * (g1.iw / lanes) + (cols + lanes - 1) / lanes) * g1.och;
    codes = (codes + token_codes - 1) / token_codes * token_codes + g1.och;
  }
  return std::max<int64_t>(1, (codes + token_codes - 1) / token_codes);
}

std::vector<StreamPlan> stream_depths(const Graph& g, const AllocationPlan& plan) {
  std::vector<StreamPlan> out;
  for (const auto& e : g.edges) {
    StreamPlan s;
    s.from = e.from;
    s.to = e.to;
    s.kind = e.kind;
    const auto& from = g.node(e.from);
    if (e.kind != EdgeKind::data) {
      const auto& c1 = plan.layer(e.to);
      s.lanes = c1.ow_par;
      s.token_codes = c1.och_par;
      for (int l = 0; l < s.lanes; ++l) {
        s.lane_depths.push_back(skip_stream_depth(g.node(e.to).geom, e.kind, s.lanes, l, s.token_codes));
      }
      s.depth = *std::max_element(s.lane_depths.begin(), s.lane_depths.end());
    } else if (auto* la = plan.find(e.from)) {
      s.lanes = la->ow_par;
      s.token_codes = la->och_par;
      // Room for one finished position, written at once. If the consumer takes
      // a code every cycle (one group) it never leaves the channel empty long
      // enough for a multi-token write, so it gets a spare token.
      s.depth = la->och_groups();
      if (const auto* lc = plan.find(e.to); lc && lc->och_groups() == 1 && s.depth > 1) s.depth += 1;
    } else {
      s.lanes = out_lanes(g, plan, e.from);
      s.token_codes = from.geom.och;
      s.depth = 2;
    }
    out.push_back(s);
  }
  for (const auto& la : plan.layers) {
    StreamPlan s;
    s.from = "param:" + la.id;
    s.to = la.id;
    s.token_codes = static_cast<int>(parameter_bandwidth(g.node(la.id).geom, la.och_par));
    s.depth = kParamStreamDepth;
    out.push_back(s);
  }
  return out;
}

Prediction predict(const AllocationPlan& plan, double freq_mhz) {
  if (freq_mhz <= 0) throw ConfigError("frequency must be positive");
  Prediction p;
  if (plan.layers.empty()) return p;
  const Ratio& t = plan.min_throughput;
  p.fps = freq_mhz * 1e6 * t.value();
  int64_t macs = 0;
  for (const auto& la : plan.layers) macs += la.c;
  p.gops = 2.0 * double(macs) * p.fps * 1e-9;
  p.interval_cycles = (t.den + t.num - 1) / t.num;
  // Coarse: every layer fills its window history once, then the bottleneck
  // produces a frame.
  int64_t fill = 0;
  for (const auto& [id, w] : plan.windows) {
    const auto& la = plan.layer(id);
    fill += 8 + w.buffer_codes / std::max(1, la.ow_par);
  }
  p.latency_estimate_cycles = fill + p.interval_cycles;
  return p;
}

}  // namespace resflow::alloc
