#include "resflow/model_ir.hpp"

#include <algorithm>
#include <array>
#include <queue>
#include <set>
#include <utility>

namespace resflow {

namespace {

template <typename E, size_t N>
E enum_from(std::string_view s, const std::array<std::pair<E, std::string_view>, N>& table,
            std::string_view what) {
  for (const auto& [e, name] : table) {
    if (name == s) return e;
  }
  throw ModelError("", std::string(what), "unknown value '" + std::string(s) + "'");
}

template <typename E, size_t N>
std::string_view enum_name(E e, const std::array<std::pair<E, std::string_view>, N>& table) {
  for (const auto& [v, name] : table) {
    if (v == e) return name;
  }
  return "?";
}

constexpr std::array<std::pair<LayerKind, std::string_view>, 8> kLayerKinds{{
    {LayerKind::conv, "conv"},
    {LayerKind::pointwise_conv, "pointwise_conv"},
    {LayerKind::linear, "linear"},
    {LayerKind::maxpool, "maxpool"},
    {LayerKind::avgpool, "avgpool"},
    {LayerKind::add, "add"},
    {LayerKind::input, "input"},
    {LayerKind::output, "output"},
}};

constexpr std::array<std::pair<SkipRole, std::string_view>, 4> kSkipRoles{{
    {SkipRole::none, "none"},
    {SkipRole::skip_source, "skip_source"},
    {SkipRole::skip_sink, "skip_sink"},
    {SkipRole::merged_downsample, "merged_downsample"},
}};

constexpr std::array<std::pair<EdgeKind, std::string_view>, 3> kEdgeKinds{{
    {EdgeKind::data, "data"},
    {EdgeKind::skip_forward, "skip_forward"},
    {EdgeKind::skip_merged, "skip_merged"},
}};

constexpr std::array<std::pair<SkipKind, std::string_view>, 2> kSkipKinds{{
    {SkipKind::forwarded_window, "forwarded_window"},
    {SkipKind::merged_output, "merged_output"},
}};

}  // namespace

std::string_view to_string(LayerKind k) { return enum_name(k, kLayerKinds); }
std::string_view to_string(SkipRole r) { return enum_name(r, kSkipRoles); }
std::string_view to_string(EdgeKind k) { return enum_name(k, kEdgeKinds); }
std::string_view to_string(SkipKind k) { return enum_name(k, kSkipKinds); }
LayerKind layer_kind_from_string(std::string_view s) { return enum_from(s, kLayerKinds, "kind"); }
SkipRole skip_role_from_string(std::string_view s) { return enum_from(s, kSkipRoles, "skip_role"); }
EdgeKind edge_kind_from_string(std::string_view s) { return enum_from(s, kEdgeKinds, "edge.kind"); }
SkipKind skip_kind_from_string(std::string_view s) { return enum_from(s, kSkipKinds, "skip.kind"); }

bool is_conv_like(LayerKind k) {
  return k == LayerKind::conv || k == LayerKind::pointwise_conv || k == LayerKind::linear;
}

bool is_pool(LayerKind k) { return k == LayerKind::maxpool || k == LayerKind::avgpool; }

int conv_out_extent(int in, int filter, int stride, int pad) {
  const int span = in + 2 * pad - filter;
  if (span < 0 || stride <= 0) return 0;
  return span / stride + 1;
}

int64_t QuantSpec::min_code() const {
  if (!is_signed) return 0;
  return -(int64_t{1} << (bw - 1));
}

int64_t QuantSpec::max_code() const {
  if (!is_signed) return (int64_t{1} << bw) - 1;
  return (int64_t{1} << (bw - 1)) - 1;
}

const LayerNode& Graph::node(const std::string& id) const {
  auto it = nodes.find(id);
  if (it == nodes.end()) throw ModelError(id, "id", "no such node");
  return it->second;
}

LayerNode& Graph::node(const std::string& id) {
  auto it = nodes.find(id);
  if (it == nodes.end()) throw ModelError(id, "id", "no such node");
  return it->second;
}

const LayerParams& Graph::params(const std::string& id) const {
  auto it = weights.find(id);
  if (it == weights.end()) throw ModelError(id, "weight_ref", "node has no parameters");
  return it->second;
}

const LayerNode& Graph::input_node() const {
  for (const auto& [id, n] : nodes) {
    if (n.kind == LayerKind::input) return n;
  }
  throw ModelError("", "kind", "graph has no input node");
}

const LayerNode& Graph::output_node() const {
  for (const auto& [id, n] : nodes) {
    if (n.kind == LayerKind::output) return n;
  }
  throw ModelError("", "kind", "graph has no output node");
}

std::vector<Edge> Graph::out_edges(const std::string& id) const {
  std::vector<Edge> out;
  for (const auto& e : edges) {
    if (e.from == id) out.push_back(e);
  }
  return out;
}

std::vector<Edge> Graph::in_edges(const std::string& id) const {
  std::vector<Edge> out;
  for (const auto& e : edges) {
    if (e.to == id) out.push_back(e);
  }
  return out;
}

std::vector<std::string> Graph::consumers(const std::string& id) const {
  std::vector<std::string> out;
  for (const auto& [nid, n] : nodes) {
    if (std::find(n.preds.begin(), n.preds.end(), id) != n.preds.end()) out.push_back(nid);
  }
  return out;
}

std::vector<std::string> Graph::topo_order() const {
  std::map<std::string, int> indegree;
  std::map<std::string, std::vector<std::string>> succ;
  for (const auto& [id, n] : nodes) {
    indegree.emplace(id, 0);
  }
  for (const auto& [id, n] : nodes) {
    std::set<std::string> uniq(n.preds.begin(), n.preds.end());
    for (const auto& p : uniq) {
      if (!nodes.count(p)) throw ModelError(id, "preds", "dangling predecessor '" + p + "'");
      succ[p].push_back(id);
      indegree[id]++;
    }
  }
  // Deterministic Kahn order: ready set ordered by insertion of the first
  // producer, then by id.
  std::vector<std::string> order;
  std::set<std::string> ready;
  for (const auto& [id, d] : indegree) {
    if (d == 0) ready.insert(id);
  }
  while (!ready.empty()) {
    // Prefer nodes whose predecessors were emitted longest ago keeps
    // branch-local ordering stable; plain lexical order is enough here.
    auto it = ready.begin();
    std::string id = *it;
    ready.erase(it);
    order.push_back(id);
    for (const auto& s : succ[id]) {
      if (--indegree[s] == 0) ready.insert(s);
    }
  }
  if (order.size() != nodes.size()) throw ModelError("", "preds", "graph contains a cycle");
  return order;
}

const SkipAnnotation* Graph::skip_for_conv1(const std::string& conv1) const {
  for (const auto& s : skips) {
    if (s.conv1 == conv1) return &s;
  }
  return nullptr;
}

int64_t layer_macs(const LayerGeom& g) {
  return int64_t{g.oh} * g.ow * g.och * g.ich * g.fh * g.fw;
}

namespace {

struct OutShape {
  int ch = 0;
  int h = 0;
  int w = 0;
  bool operator==(const OutShape&) const = default;
};

OutShape out_shape(const LayerNode& n) { return {n.geom.och, n.geom.oh, n.geom.ow}; }
OutShape in_shape(const LayerNode& n) { return {n.geom.ich, n.geom.ih, n.geom.iw}; }

std::string shape_str(const OutShape& s) {
  return std::to_string(s.ch) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

bool valid_bw(int bw) { return bw == 8 || bw == 16 || bw == 32; }

bool is_pow2(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

std::vector<Violation> validate_graph(const Graph& g) {
  std::vector<Violation> v;
  auto add = [&](const std::string& node, std::string rule, std::string msg) {
    v.push_back({node, std::move(rule), std::move(msg)});
  };

  int inputs = 0;
  int outputs = 0;
  for (const auto& [id, n] : g.nodes) {
    if (n.id != id) add(id, "id", "node id does not match its key");
    const auto& gm = n.geom;
    for (int f : {gm.ich, gm.ih, gm.iw, gm.och, gm.oh, gm.ow, gm.fh, gm.fw, gm.stride}) {
      if (f < 1) {
        add(id, "geom.positive", "all geometry fields except pad must be >= 1");
        break;
      }
    }
    if (gm.pad < 0) add(id, "geom.pad", "pad must be >= 0");

    for (const QuantSpec* s : {&n.x_spec, &n.w_spec, &n.b_spec, &n.y_spec}) {
      if (!valid_bw(s->bw)) {
        add(id, "spec.bw", "bit-width must be 8, 16 or 32, got " + std::to_string(s->bw));
        break;
      }
    }

    switch (n.kind) {
      case LayerKind::input:
        ++inputs;
        if (!n.preds.empty()) add(id, "input.preds", "input node must not have predecessors");
        break;
      case LayerKind::output:
        ++outputs;
        if (n.preds.size() != 1) add(id, "output.preds", "output node needs exactly one predecessor");
        break;
      case LayerKind::add:
        if (n.preds.size() != 2) {
          add(id, "add.arity", "add node must have exactly 2 predecessors, has " +
                                   std::to_string(n.preds.size()));
        }
        break;
      default:
        break;
    }

    if (is_conv_like(n.kind) || is_pool(n.kind)) {
      const int eoh = conv_out_extent(gm.ih, gm.fh, gm.stride, gm.pad);
      const int eow = conv_out_extent(gm.iw, gm.fw, gm.stride, gm.pad);
      if (gm.oh != eoh || gm.ow != eow) {
        add(id, "geom.formula",
            "output extent must equal floor((in + 2*pad - f)/stride) + 1: expected " + std::to_string(eoh) +
                "x" + std::to_string(eow) + ", got " + std::to_string(gm.oh) + "x" + std::to_string(gm.ow));
      }
      const int expected_preds = n.skip_pred.empty() ? 1 : 2;
      if (static_cast<int>(n.preds.size()) != expected_preds) {
        add(id, "preds.arity", "expected " + std::to_string(expected_preds) + " predecessor(s)");
      }
    }
    if (is_pool(n.kind) && gm.och != gm.ich) add(id, "pool.channels", "pooling must preserve channel count");
    if (n.kind == LayerKind::avgpool && !is_pow2(int64_t{gm.fh} * gm.fw)) {
      add(id, "avgpool.size", "average pool window must be a power of two");
    }
    if (n.kind == LayerKind::pointwise_conv && (gm.fh != 1 || gm.fw != 1)) {
      add(id, "pointwise.filter", "pointwise convolution must have a 1x1 filter");
    }
    if (n.kind == LayerKind::linear && (gm.ih != 1 || gm.iw != 1 || gm.fh != 1 || gm.fw != 1)) {
      add(id, "linear.geom", "linear layer operates on a 1x1 spatial input");
    }
    if (n.kind == LayerKind::add || n.kind == LayerKind::input || n.kind == LayerKind::output) {
      if (in_shape(n) != out_shape(n)) add(id, "geom.passthrough", "input and output shapes must match");
    }

    if (is_conv_like(n.kind)) {
      auto it = g.weights.find(id);
      if (it == g.weights.end()) {
        add(id, "weights", "conv-like node has no parameter tensors");
      } else {
        const int64_t wn = int64_t{gm.och} * gm.ich * gm.fh * gm.fw;
        if (static_cast<int64_t>(it->second.weights.size()) != wn) {
          add(id, "weights.size", "weight tensor must hold och*ich*fh*fw = " + std::to_string(wn) + " codes");
        }
        if (static_cast<int64_t>(it->second.bias.size()) != gm.och) {
          add(id, "bias.size", "bias tensor must hold och = " + std::to_string(gm.och) + " codes");
        }
        for (int32_t c : it->second.weights) {
          if (!n.w_spec.contains(c)) {
            add(id, "weights.range", "weight code " + std::to_string(c) + " outside spec range");
            break;
          }
        }
        for (int32_t c : it->second.bias) {
          if (!n.b_spec.contains(c)) {
            add(id, "bias.range", "bias code " + std::to_string(c) + " outside spec range");
            break;
          }
        }
      }
    }

    for (const auto& p : n.preds) {
      if (!g.nodes.count(p)) {
        add(id, "preds.dangling", "predecessor '" + p + "' does not exist");
        continue;
      }
      const auto& pn = g.node(p);
      if (n.kind == LayerKind::add || p == n.skip_pred) {
        if (out_shape(pn) != out_shape(n)) {
          add(id, "geom.merge", "merge operand '" + p + "' has shape " + shape_str(out_shape(pn)) +
                                    ", expected " + shape_str(out_shape(n)));
        }
      } else if (out_shape(pn) != in_shape(n)) {
        add(id, "geom.edge", "producer '" + p + "' output " + shape_str(out_shape(pn)) +
                                 " does not match input " + shape_str(in_shape(n)));
      } else if (n.kind != LayerKind::output && pn.y_spec != n.x_spec) {
        add(id, "spec.edge", "input spec differs from producer '" + p + "' output spec");
      }
    }

    if (!n.merged_into.empty()) {
      if (!g.nodes.count(n.merged_into) || g.node(n.merged_into).merged_downsample != id) {
        add(id, "merged_into", "merge partner does not reference this node back");
      }
    }
  }
  if (inputs != 1) add("", "graph.input", "graph must have exactly one input node");
  if (outputs != 1) add("", "graph.output", "graph must have exactly one output node");

  for (const auto& e : g.edges) {
    if (!g.nodes.count(e.from) || !g.nodes.count(e.to)) {
      add(e.to, "edge.dangling", "edge " + e.from + " -> " + e.to + " references a missing node");
      continue;
    }
    const auto& to = g.node(e.to);
    if (e.kind == EdgeKind::data) {
      if (std::find(to.preds.begin(), to.preds.end(), e.from) == to.preds.end()) {
        add(e.to, "edge.preds", "data edge from '" + e.from + "' not listed among predecessors");
      }
    } else {
      const auto& from = g.node(e.from);
      const bool ok = (e.kind == EdgeKind::skip_forward && from.forwards_input) ||
                      (e.kind == EdgeKind::skip_merged && !from.merged_downsample.empty());
      if (!ok) add(e.to, "edge.skip", "skip edge source '" + e.from + "' is not annotated for it");
    }
  }

  try {
    (void)g.topo_order();
  } catch (const ModelError& ex) {
    add("", "graph.acyclic", ex.what());
  }
  return v;
}

}  // namespace resflow
