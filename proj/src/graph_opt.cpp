#include "resflow/graph_opt.hpp"

#include <algorithm>

namespace resflow::opt {

namespace {

bool is_spatial_conv(const LayerNode& n) { return n.kind == LayerKind::conv || n.kind == LayerKind::pointwise_conv; }

// Sole semantic consumer of `id`, or empty.
std::string only_consumer(const Graph& g, const std::string& id) {
  auto c = g.consumers(id);
  return c.size() == 1 ? c.front() : std::string();
}

// conv1 <- conv0 <- X, each link exclusive.
bool long_branch(const Graph& g, const std::string& tail, const std::string& add, ResidualBlock& b) {
  const auto& c1 = g.node(tail);
  if (!is_spatial_conv(c1) || c1.preds.size() != 1 || only_consumer(g, tail) != add) return false;
  const auto& c0 = g.node(c1.preds[0]);
  if (!is_spatial_conv(c0) || c0.preds.size() != 1 || only_consumer(g, c0.id) != c1.id) return false;
  b.conv1 = c1.id;
  b.conv0 = c0.id;
  b.input = c0.preds[0];
  return true;
}

void unsupported(const std::string& add, const std::string& why) {
  throw UnsupportedTopology("add node '" + add + "': " + why);
}

void replace_edge(Graph& g, const Edge& from, const Edge& to) {
  auto it = std::find(g.edges.begin(), g.edges.end(), from);
  if (it == g.edges.end()) {
    g.edges.push_back(to);
  } else {
    *it = to;
  }
}

void erase_edge(Graph& g, const Edge& e) { std::erase(g.edges, e); }

void annotate(Graph& g, SkipAnnotation s) {
  for (auto& existing : g.skips) {
    if (existing.conv1 == s.conv1) {
      existing = s;
      return;
    }
  }
  g.skips.push_back(std::move(s));
}

SkipAnnotation make_annotation(const Graph& g, const ResidualBlock& b, SkipKind kind) {
  SkipAnnotation s;
  s.kind = kind;
  s.conv0 = b.conv0;
  s.conv1 = b.conv1;
  s.downsample = b.downsample;
  s.naive_codes = skip_buffer_naive(g, b);
  s.buffer_codes = skip_buffer_optimized(g, b);
  s.fifo_depth = s.buffer_codes;
  return s;
}

}  // namespace

std::vector<ResidualBlock> detect_blocks(const Graph& g) {
  std::vector<ResidualBlock> out;
  for (const auto& id : g.topo_order()) {
    const auto& n = g.node(id);
    if (n.kind != LayerKind::add) continue;
    if (n.preds.size() != 2) unsupported(id, "expected two operands");
    ResidualBlock b;
    b.merge = id;
    int long_idx = -1;
    for (int i = 0; i < 2; ++i) {
      ResidualBlock trial;
      if (long_branch(g, n.preds[i], id, trial)) {
        const auto& other = n.preds[1 - i];
        const bool identity = other == trial.input;
        bool via_ds = false;
        if (!identity && g.has_node(other)) {
          const auto& o = g.node(other);
          via_ds = o.kind == LayerKind::pointwise_conv && o.preds.size() == 1 && o.preds[0] == trial.input &&
                   only_consumer(g, other) == id;
        }
        if (identity || via_ds) {
          b.conv0 = trial.conv0;
          b.conv1 = trial.conv1;
          b.input = trial.input;
          if (via_ds) b.downsample = other;
          long_idx = i;
          break;
        }
      }
    }
    if (long_idx < 0) unsupported(id, "branches are not (2 convs, 0 convs) or (2 convs, 1 pointwise conv)");
    out.push_back(std::move(b));
  }
  return out;
}

ReceptiveField receptive_field(const LayerGeom& c0, const LayerGeom& c1) {
  if (c1.stride != 1) throw UnsupportedTopology("receptive field needs conv1 stride 1");
  ReceptiveField r;
  r.rh0 = c1.fh + c0.fh - 1;
  r.rw0 = c1.fw + c0.fw - 1;
  r.b_r = int64_t{r.rh0} * r.rw0;
  return r;
}

int64_t skip_buffer_naive(const LayerGeom& c0, const LayerGeom& c1) {
  const auto r = receptive_field(c0, c1);
  return (int64_t{c0.iw} * (r.rh0 - 1) + r.rw0) * c0.ich;
}

int64_t skip_buffer_naive(const Graph& g, const ResidualBlock& b) {
  return skip_buffer_naive(g.node(b.conv0).geom, g.node(b.conv1).geom);
}

int64_t skip_buffer_optimized(const LayerGeom& c1) {
  return (int64_t{c1.fh - 1} * c1.iw + c1.fw - 1) * c1.ich;
}

int64_t skip_buffer_optimized(const Graph& g, const ResidualBlock& b) {
  return skip_buffer_optimized(g.node(b.conv1).geom);
}

Graph apply_temporal_reuse(const Graph& src, const ResidualBlock& b) {
  if (b.has_downsample()) throw UnsupportedTopology("temporal reuse needs an identity short branch");
  Graph g = src;
  auto& c0 = g.node(b.conv0);
  if (c0.forwards_input) return g;
  if (b.merge.empty()) throw UnsupportedTopology("block '" + b.conv1 + "' has no add node to rewrite");
  c0.forwards_input = true;
  c0.skip_role = SkipRole::skip_source;
  // The short branch now leaves conv0's window buffer instead of X's
  // producer; no separate buffer is needed.
  replace_edge(g, {b.input, b.merge, EdgeKind::data}, {b.conv0, b.merge, EdgeKind::skip_forward});
  annotate(g, make_annotation(g, b, SkipKind::forwarded_window));
  return g;
}

Graph apply_loop_merge(const Graph& src, const ResidualBlock& b) {
  if (!b.has_downsample()) throw UnsupportedTopology("loop merge needs a downsample convolution");
  Graph g = src;
  auto& c0 = g.node(b.conv0);
  auto& ds = g.node(b.downsample);
  if (c0.merged_downsample == ds.id) return g;
  if (b.merge.empty()) throw UnsupportedTopology("block '" + b.conv1 + "' has no add node to rewrite");
  const auto& g0 = c0.geom;
  const auto& gd = ds.geom;
  if (gd.stride != g0.stride || gd.pad != 0 || g0.pad >= g0.fh || g0.pad >= g0.fw || gd.oh != g0.oh ||
      gd.ow != g0.ow) {
    throw UnsupportedTopology("downsample '" + ds.id + "' does not read a tap of conv0's window");
  }
  c0.merged_downsample = ds.id;
  c0.skip_role = SkipRole::skip_source;
  ds.merged_into = c0.id;
  ds.skip_role = SkipRole::merged_downsample;
  erase_edge(g, {b.input, ds.id, EdgeKind::data});
  replace_edge(g, {ds.id, b.merge, EdgeKind::data}, {c0.id, b.merge, EdgeKind::skip_merged});
  annotate(g, make_annotation(g, b, SkipKind::merged_output));
  return g;
}

Graph fold_add_into_accumulator(const Graph& src, const ResidualBlock& b) {
  if (b.merge.empty() || !src.has_node(b.merge)) return src;
  const auto& c0 = src.node(b.conv0);
  const bool rewritten = b.has_downsample() ? c0.merged_downsample == b.downsample : c0.forwards_input;
  if (!rewritten) throw UnsupportedTopology("fold needs temporal reuse or loop merge first on '" + b.conv1 + "'");
  const auto& add = src.node(b.merge);
  const auto& c1 = src.node(b.conv1);
  const int acc_frac = c1.x_spec.frac + c1.w_spec.frac;
  if (c1.relu || c1.y_spec.bw != 32 || c1.y_spec.frac != acc_frac) {
    throw UnsupportedTopology("add '" + add.id + "' does not consume conv1's raw accumulator");
  }
  const std::string skip_src = b.has_downsample() ? b.downsample : b.input;
  if (src.node(skip_src).y_spec.frac > acc_frac) {
    throw UnsupportedTopology("skip operand of '" + add.id + "' is finer than conv1's accumulator");
  }

  Graph g = src;
  auto& n1 = g.node(b.conv1);
  n1.preds.push_back(skip_src);
  n1.skip_pred = skip_src;
  n1.y_spec = add.y_spec;
  n1.relu = add.relu;
  n1.skip_role = SkipRole::skip_sink;

  for (auto& [id, n] : g.nodes) {
    for (auto& p : n.preds) {
      if (p == add.id) p = b.conv1;
    }
  }
  std::vector<Edge> edges;
  for (auto e : g.edges) {
    if (e.to == add.id) {
      if (e.kind == EdgeKind::data) continue;  // conv1 -> add
      e.to = b.conv1;                          // skip stream now ends in conv1
    }
    if (e.from == add.id) e.from = b.conv1;
    edges.push_back(e);
  }
  g.edges = std::move(edges);
  g.nodes.erase(add.id);
  return g;
}

Graph optimize(const Graph& src) {
  Graph g = src;
  // Folding renames the add's consumers, so later blocks are re-detected on
  // the rewritten graph.
  for (auto blocks = detect_blocks(g); !blocks.empty(); blocks = detect_blocks(g)) {
    const auto& b = blocks.front();
    g = b.has_downsample() ? apply_loop_merge(g, b) : apply_temporal_reuse(g, b);
    g = fold_add_into_accumulator(g, b);
  }
  auto v = validate_graph(g);
  if (!v.empty()) throw ModelError(v.front().node, v.front().rule, "optimized graph invalid: " + v.front().message);
  return g;
}

}  // namespace resflow::opt
