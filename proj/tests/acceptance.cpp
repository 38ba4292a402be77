// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>

#include "resflow/alloc.hpp"
#include "resflow/dataflow_sim.hpp"
#include "resflow/dsp_pack.hpp"
#include "resflow/graph_opt.hpp"
#include "resflow/quant.hpp"
#include "resflow/reference_interp.hpp"
#include "support.hpp"

using namespace resflow;
using testing_support::Rng;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::vector<ref::Tensor> frames_for(const Graph& g, int n, uint64_t seed) {
  std::vector<ref::Tensor> in;
  for (int i = 0; i < n; ++i) in.push_back(ref::random_input(g, seed + uint64_t(i)));
  return in;
}

struct Preset {
  const char* name;
  int64_t n_par;
  double freq;
};
const Preset kPresets[] = {{"ultra96", 360, 214.0}, {"kv260", 1248, 274.0}};

Verdict ac1() {
  const auto a = quant::accumulator_requirements({32, 8, 8, 32, 8, 8, 3, 3, 1, 1}, 8);
  std::ostringstream os;
  os << "N_acc=" << a.n_acc << " bw_acc=" << a.bw_acc_required;
  return {a.n_acc == 9216 && a.bw_acc_required == 30, os.str()};
}

Verdict ac2() {
  double lo = 1, hi = 0;
  for (const Graph& g : {build_resnet8(1), build_resnet20(1)}) {
    for (const auto& b : opt::detect_blocks(g)) {
      const double r = double(opt::skip_buffer_optimized(g, b)) / double(opt::skip_buffer_naive(g, b));
      lo = std::min(lo, r);
      hi = std::max(hi, r);
    }
  }
  std::ostringstream os;
  os << "ratios in [" << lo << ", " << hi << "]";
  return {lo >= 0.45 && hi <= 0.55, os.str()};
}

Verdict ac3() {
  Rng rng(2023);
  int64_t failures = 0, checks = 0;
  auto chain = [&](const std::vector<int>& a, const std::vector<int>& d, const std::vector<int>& b) {
    dsp::ChainState s;
    int64_t sa = 0, sd = 0;
    for (size_t i = 0; i < a.size(); ++i) {
      s = dsp::packed_mac(dsp::make_operand(a[i], d[i], b[i]), s);
      sa += int64_t{a[i]} * b[i];
      sd += int64_t{d[i]} * b[i];
    }
    ++checks;
    if (dsp::restore(s) != std::make_pair(sa, sd)) ++failures;
  };
  for (int i = 0; i < 100000; ++i) {
    const int len = int(rng.uniform(1, dsp::kMaxChain));
    std::vector<int> a(len), d(len), b(len);
    for (int t = 0; t < len; ++t) {
      a[t] = int(rng.uniform(-128, 127));
      d[t] = int(rng.uniform(-128, 127));
      b[t] = int(rng.uniform(-128, 127));
    }
    chain(a, d, b);
  }
  const int corners[] = {-128, -127, 127};
  for (int len = 1; len <= dsp::kMaxChain; ++len)
    for (int a : corners)
      for (int d : corners)
        for (int b : corners) chain(std::vector<int>(len, a), std::vector<int>(len, d), std::vector<int>(len, b));
  for (int i = 0; i < 100000; ++i) {
    std::vector<int8_t> a(9), d(9), b(9);
    int64_t init = rng.uniform(INT32_MIN, INT32_MAX), sa = init, sd = init;
    for (int t = 0; t < 9; ++t) {
      a[t] = int8_t(rng.uniform(-128, 127));
      d[t] = int8_t(rng.uniform(-128, 127));
      b[t] = int8_t(rng.uniform(-128, 127));
      sa += int64_t{a[t]} * b[t];
      sd += int64_t{d[t]} * b[t];
    }
    ++checks;
    if (dsp::packed_dot(a, d, b, init) != dsp::DotPair{sa, sd}) ++failures;
  }
  std::ostringstream os;
  os << failures << " failures in " << checks << " checks";
  return {failures == 0, os.str()};
}

Verdict ac4() {
  int bad = 0, runs = 0;
  for (const Graph& g : {build_resnet8(1), build_resnet20(1)}) {
    const Graph o = opt::optimize(g);
    for (uint64_t s = 1; s <= 20; ++s, ++runs) {
      const auto x = ref::random_input(g, 1000 + s);
      if (ref::run_graph(o, x).output != ref::run_graph(g, x).output) ++bad;
    }
  }
  std::ostringstream os;
  os << bad << " mismatches in " << runs << " inputs";
  return {bad == 0, os.str()};
}

Verdict ac5() {
  std::ostringstream os;
  bool ok = true;
  for (const auto& [net, frames] : std::vector<std::pair<int, int>>{{8, 10}, {20, 3}}) {
    const Graph g = net == 8 ? build_resnet8(1) : build_resnet20(1);
    const Graph o = opt::optimize(g);
    for (const auto& p : kPresets) {
      const auto plan = alloc::solve_allocation(o, p.n_par, 8);
      bool lanes2 = false;
      for (const auto& la : plan.layers) lanes2 |= la.ow_par == 2;
      const auto in = frames_for(g, frames, 7);
      const auto tr = sim::simulate(sim::elaborate(o, plan), in);
      int exact = 0;
      for (size_t i = 0; tr.completed && i < in.size(); ++i) exact += tr.outputs[i] == ref::run_graph(g, in[i]).output;
      ok &= tr.completed && lanes2 && exact == frames;
      os << "resnet" << net << "/" << p.name << " " << exact << "/" << frames << " ";
    }
  }
  return {ok, os.str() + "frames bit-exact"};
}

Verdict ac6() {
  std::ostringstream os;
  bool ok = true;
  for (int net : {8, 20}) {
    const Graph g = net == 8 ? build_resnet8(1) : build_resnet20(1);
    const Graph o = opt::optimize(g);
    for (const auto& p : kPresets) {
      const auto plan = alloc::solve_allocation(o, p.n_par, 8);
      const double pred = double(alloc::predict(plan, p.freq).interval_cycles);
      const auto tr = sim::simulate(sim::elaborate(o, plan), frames_for(g, 3, 1));
      const double err = tr.completed ? std::abs(double(tr.steady_interval) - pred) / pred : 1.0;
      ok &= err <= 0.05;
      os << "resnet" << net << "/" << p.name << " " << tr.steady_interval << " vs " << pred << "; ";
    }
  }
  return {ok, os.str()};
}

Verdict ac7() {
  std::ostringstream os;
  bool ok = true;
  for (const auto& [net, published] : std::vector<std::pair<int, double>>{{8, 30153}, {20, 7601}}) {
    const Graph o = opt::optimize(net == 8 ? build_resnet8(1) : build_resnet20(1));
    const double fps = alloc::predict(alloc::solve_allocation(o, 1248, 8), 274.0).fps;
    ok &= fps >= 0.7 * published && fps <= 1.5 * published;
    os << "resnet" << net << " " << std::lround(fps) << " fps (" << fps / published << "x); ";
  }
  return {ok, os.str()};
}

// Best bottleneck throughput over all divisor assignments within budget.
alloc::Ratio enumerate_best(const Graph& g, int64_t n_par) {
  struct L {
    int k, owp;
    int64_t c;
    std::vector<int> divs;
  };
  std::vector<L> ls;
  for (const auto& id : g.topo_order()) {
    const auto& n = g.node(id);
    if (is_conv_like(n.kind))
      ls.push_back({n.geom.fh * n.geom.fw, alloc::ow_par_for(n, 8), layer_macs(n.geom), alloc::divisors(n.geom.och)});
  }
  alloc::Ratio best{-1, 1};
  std::vector<size_t> idx(ls.size(), 0);
  for (;;) {
    int64_t cost = 0;
    alloc::Ratio mn{1, 0};
    for (size_t i = 0; i < ls.size(); ++i) {
      const int d = ls[i].divs[idx[i]];
      cost += alloc::layer_cost(ls[i].k, ls[i].owp, d, alloc::BudgetUnit::dsp);
      const alloc::Ratio th{int64_t{ls[i].k} * ls[i].owp * d, ls[i].c};
      if (i == 0 || th < mn) mn = th;
    }
    if (cost <= n_par && (best.num < 0 || best < mn)) best = mn;
    size_t i = 0;
    while (i < ls.size() && ++idx[i] == ls[i].divs.size()) idx[i++] = 0;
    if (i == ls.size()) break;
  }
  return best;
}

Verdict ac8() {
  Rng rng(8);
  int graphs = 0, bad = 0;
  while (graphs < 60) {
    GraphBuilder b(rng.next());
    auto x = b.input("input", int(rng.uniform(1, 8)), 8, 8, {8, GraphBuilder::kActFrac, true});
    const int n = int(rng.uniform(1, 4));
    for (int i = 0; i < n; ++i) {
      const int f = rng.coin() ? 3 : 1;
      x = b.conv("l" + std::to_string(i), x, int(rng.uniform(1, 16)), f, 1, f / 2, true);
    }
    b.output("output", x);
    const Graph g = std::move(b).build();
    int64_t min_cost = 0;
    for (const auto& [id, node] : g.nodes)
      if (is_conv_like(node.kind)) min_cost += node.geom.fh * node.geom.fw;
    if (min_cost > 64) continue;
    const int64_t n_par = rng.uniform(min_cost, 64);
    ++graphs;
    if (!(alloc::solve_allocation(g, n_par, 8).min_throughput == enumerate_best(g, n_par))) ++bad;
  }
  std::ostringstream os;
  os << bad << " of " << graphs << " graphs differ from enumeration";
  return {bad == 0, os.str()};
}

Verdict ac9() {
  const Graph g = testing_support::two_block_net();
  const Graph o = opt::optimize(g);
  const auto plan = alloc::solve_allocation(o, 200, 8);
  const auto base = sim::elaborate(o, plan);
  const auto ref = sim::check_deadlock_free(base, 3, 1);
  if (!ref.pass) return {false, "planned capacities fail: " + ref.diagnostic};
  int probes = 0, caught = 0;
  std::string missed;
  for (size_t i = 0; i < base.channels.size(); ++i) {
    const auto& c = base.channels[i];
    const bool output = c.kind == sim::ChannelKind::data && base.tasks[size_t(c.producer)].kind == sim::TaskKind::compute;
    if (c.kind != sim::ChannelKind::skip && !output) continue;
    auto n = base;
    n.channels[i].capacity -= 1;
    const auto r = sim::check_deadlock_free(n, 3, 1);
    ++probes;
    const bool stall = !r.pass || r.trace.cycles > ref.trace.cycles ||
                       r.trace.tasks[size_t(c.producer)].blocked_out > ref.trace.tasks[size_t(c.producer)].blocked_out;
    if (stall) {
      ++caught;
    } else {
      missed += " " + c.name;
    }
  }
  std::ostringstream os;
  os << caught << "/" << probes << " probes stall or deadlock" << (missed.empty() ? "" : "; missed:" + missed);
  return {caught == probes && probes > 0, os.str()};
}

Verdict ac10() {
  Rng rng(10);
  int bad = 0;
  for (int i = 0; i < 100; ++i) {
    LayerGeom g;
    g.ich = int(rng.uniform(1, 64));
    g.fh = int(rng.uniform(1, 7));
    g.fw = int(rng.uniform(1, 7));
    g.iw = int(rng.uniform(g.fw + 1, 64));
    const auto w1 = alloc::window_buffer_plan(g, 1);
    const auto w2 = alloc::window_buffer_plan(g, 2);
    int64_t sum = 0;
    for (int64_t s : w1.slice_sizes) sum += s;
    const int64_t b = (int64_t{g.fh - 1} * g.iw + g.fw - 1) * g.ich;
    if (sum != b || w1.buffer_codes != b || w2.buffer_codes - w1.buffer_codes != g.ich) ++bad;
  }
  return {bad == 0, std::to_string(bad) + " of 100 geometries inconsistent"};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
      {"AC1", ac1}, {"AC2", ac2}, {"AC3", ac3}, {"AC4", ac4}, {"AC5", ac5},
      {"AC6", ac6}, {"AC7", ac7}, {"AC8", ac8}, {"AC9", ac9}, {"AC10", ac10}};
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%-4s %s (%.2fs) %s\n", name, v.pass ? "PASS" : "FAIL", s, v.detail.c_str());
    std::fflush(stdout);
    failed += !v.pass;
  }
  return failed == 0 ? 0 : 1;
}
