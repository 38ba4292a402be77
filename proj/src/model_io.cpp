#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "resflow/model_ir.hpp"

namespace resflow {

using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

json spec_to_json(const QuantSpec& s) { return {{"bw", s.bw}, {"frac", s.frac}, {"signed", s.is_signed}}; }

json geom_to_json(const LayerGeom& g) {
  return {{"ich", g.ich}, {"ih", g.ih},   {"iw", g.iw},         {"och", g.och}, {"oh", g.oh},
          {"ow", g.ow},   {"fh", g.fh},   {"fw", g.fw},         {"stride", g.stride}, {"pad", g.pad}};
}

int bytes_per_code(const QuantSpec& s) { return s.bw / 8; }

void append_codes(std::vector<uint8_t>& blob, const std::vector<int32_t>& codes, const QuantSpec& spec,
                  const std::string& node, const char* field) {
  const int nb = bytes_per_code(spec);
  for (int32_t c : codes) {
    // Out-of-range codes would silently wrap in the blob.
    if (!spec.contains(c)) {
      throw ModelError(node, field, "code " + std::to_string(c) + " outside " + (spec.is_signed ? "signed " : "unsigned ") +
                                        std::to_string(spec.bw) + "-bit range");
    }
    const auto u = static_cast<uint32_t>(c);
    for (int b = 0; b < nb; ++b) blob.push_back(static_cast<uint8_t>(u >> (8 * b)));
  }
}

// Little-endian decode of one code, two's complement when signed.
int32_t read_code(const uint8_t* p, int nb, bool is_signed) {
  uint32_t u = 0;
  for (int b = 0; b < nb; ++b) u |= uint32_t{p[b]} << (8 * b);
  if (is_signed && nb < 4) {
    const uint32_t sign = uint32_t{1} << (8 * nb - 1);
    if (u & sign) u |= ~((sign << 1) - 1);
  }
  return static_cast<int32_t>(u);
}

// Field accessors that report node id and field path on failure.
struct Ctx {
  std::string node;

  const json& at(const json& j, const std::string& key, const std::string& path) const {
    if (!j.is_object() || !j.contains(key)) throw ModelError(node, path, "missing field");
    return j.at(key);
  }
  int get_int(const json& j, const std::string& key, const std::string& path) const {
    const auto& v = at(j, key, path);
    if (!v.is_number_integer()) throw ModelError(node, path, "expected integer");
    return v.get<int>();
  }
  bool get_bool(const json& j, const std::string& key, const std::string& path) const {
    const auto& v = at(j, key, path);
    if (!v.is_boolean()) throw ModelError(node, path, "expected boolean");
    return v.get<bool>();
  }
  std::string get_str(const json& j, const std::string& key, const std::string& path) const {
    const auto& v = at(j, key, path);
    if (!v.is_string()) throw ModelError(node, path, "expected string");
    return v.get<std::string>();
  }
  std::string opt_str(const json& j, const std::string& key, const std::string& path) const {
    if (!j.contains(key)) return {};
    return get_str(j, key, path);
  }
};

QuantSpec spec_from_json(const Ctx& cx, const json& j, const std::string& path) {
  QuantSpec s;
  s.bw = cx.get_int(j, "bw", path + ".bw");
  s.frac = cx.get_int(j, "frac", path + ".frac");
  s.is_signed = cx.get_bool(j, "signed", path + ".signed");
  if (s.bw != 8 && s.bw != 16 && s.bw != 32) {
    throw ModelError(cx.node, path + ".bw", "bit-width must be 8, 16 or 32");
  }
  return s;
}

std::vector<int32_t> read_tensor(const Ctx& cx, const json& ref, const std::string& path, const QuantSpec& spec,
                                 const std::vector<uint8_t>& blob) {
  const int64_t off = cx.get_int(ref, "offset", path + ".offset");
  const int64_t len = cx.get_int(ref, "len", path + ".len");
  if (off < 0 || len < 0) throw ModelError(cx.node, path, "negative offset or length");
  const int nb = bytes_per_code(spec);
  if (off + len * nb > static_cast<int64_t>(blob.size())) {
    throw ModelError(cx.node, path,
                     "blob truncated: need bytes [" + std::to_string(off) + ", " + std::to_string(off + len * nb) +
                         "), blob has " + std::to_string(blob.size()));
  }
  std::vector<int32_t> codes(static_cast<size_t>(len));
  for (int64_t i = 0; i < len; ++i) {
    codes[i] = read_code(blob.data() + off + i * nb, nb, spec.is_signed);
    if (!spec.contains(codes[i])) {
      throw ModelError(cx.node, path,
                       "code " + std::to_string(codes[i]) + " at index " + std::to_string(i) + " outside " +
                           (spec.is_signed ? "signed " : "unsigned ") + std::to_string(spec.bw) + "-bit range");
    }
  }
  return codes;
}

}  // namespace

SerializedModel serialize_model(const Graph& g) {
  SerializedModel out;
  json nodes = json::array();
  // Topological order keeps manifests readable; ids are unique so order is
  // irrelevant for parsing.
  for (const auto& id : g.topo_order()) {
    const auto& n = g.node(id);
    json j = {{"id", n.id},
              {"kind", std::string(to_string(n.kind))},
              {"geom", geom_to_json(n.geom)},
              {"specs",
               {{"x", spec_to_json(n.x_spec)},
                {"w", spec_to_json(n.w_spec)},
                {"b", spec_to_json(n.b_spec)},
                {"y", spec_to_json(n.y_spec)}}},
              {"relu", n.relu},
              {"preds", n.preds},
              {"skip_role", std::string(to_string(n.skip_role))}};
    if (!n.merged_into.empty()) j["merged_into"] = n.merged_into;
    if (!n.merged_downsample.empty()) j["merged_downsample"] = n.merged_downsample;
    if (!n.skip_pred.empty()) j["skip_pred"] = n.skip_pred;
    if (n.forwards_input) j["forwards_input"] = true;
    auto it = g.weights.find(id);
    if (it != g.weights.end()) {
      j["weight_ref"] = {{"offset", out.blob.size()}, {"len", it->second.weights.size()}};
      append_codes(out.blob, it->second.weights, n.w_spec, n.id, "weight_ref");
      j["bias_ref"] = {{"offset", out.blob.size()}, {"len", it->second.bias.size()}};
      append_codes(out.blob, it->second.bias, n.b_spec, n.id, "bias_ref");
    }
    nodes.push_back(std::move(j));
  }
  json edges = json::array();
  for (const auto& e : g.edges) {
    edges.push_back({{"from", e.from}, {"to", e.to}, {"kind", std::string(to_string(e.kind))}});
  }
  json skips = json::array();
  for (const auto& s : g.skips) {
    skips.push_back({{"kind", std::string(to_string(s.kind))},
                     {"conv0", s.conv0},
                     {"conv1", s.conv1},
                     {"downsample", s.downsample},
                     {"naive_codes", s.naive_codes},
                     {"buffer_codes", s.buffer_codes},
                     {"fifo_depth", s.fifo_depth}});
  }
  json root = {{"version", kFormatVersion}, {"nodes", nodes}, {"edges", edges}};
  if (!skips.empty()) root["skips"] = skips;
  out.manifest = root.dump(1);
  return out;
}

Graph parse_model(std::string_view manifest_text, const std::vector<uint8_t>& blob) {
  json root;
  try {
    root = json::parse(manifest_text);
  } catch (const json::parse_error& e) {
    throw ModelError("", "manifest", std::string("invalid JSON: ") + e.what());
  }
  Ctx top;
  if (top.get_int(root, "version", "version") != kFormatVersion) {
    throw ModelError("", "version", "unsupported manifest version");
  }
  const auto& jnodes = top.at(root, "nodes", "nodes");
  if (!jnodes.is_array()) throw ModelError("", "nodes", "expected array");

  Graph g;
  for (const auto& jn : jnodes) {
    Ctx cx;
    cx.node = cx.get_str(jn, "id", "id");
    if (cx.node.empty()) throw ModelError("", "id", "empty node id");
    if (g.nodes.count(cx.node)) throw ModelError(cx.node, "id", "duplicate node id");
    LayerNode n;
    n.id = cx.node;
    try {
      n.kind = layer_kind_from_string(cx.get_str(jn, "kind", "kind"));
    } catch (const ModelError& e) {
      throw ModelError(cx.node, "kind", e.what());
    }
    const auto& jg = cx.at(jn, "geom", "geom");
    auto& gm = n.geom;
    gm.ich = cx.get_int(jg, "ich", "geom.ich");
    gm.ih = cx.get_int(jg, "ih", "geom.ih");
    gm.iw = cx.get_int(jg, "iw", "geom.iw");
    gm.och = cx.get_int(jg, "och", "geom.och");
    gm.oh = cx.get_int(jg, "oh", "geom.oh");
    gm.ow = cx.get_int(jg, "ow", "geom.ow");
    gm.fh = cx.get_int(jg, "fh", "geom.fh");
    gm.fw = cx.get_int(jg, "fw", "geom.fw");
    gm.stride = cx.get_int(jg, "stride", "geom.stride");
    gm.pad = cx.get_int(jg, "pad", "geom.pad");
    const auto& js = cx.at(jn, "specs", "specs");
    n.x_spec = spec_from_json(cx, cx.at(js, "x", "specs.x"), "specs.x");
    n.w_spec = spec_from_json(cx, cx.at(js, "w", "specs.w"), "specs.w");
    n.b_spec = spec_from_json(cx, cx.at(js, "b", "specs.b"), "specs.b");
    n.y_spec = spec_from_json(cx, cx.at(js, "y", "specs.y"), "specs.y");
    n.relu = cx.get_bool(jn, "relu", "relu");
    const auto& jp = cx.at(jn, "preds", "preds");
    if (!jp.is_array()) throw ModelError(cx.node, "preds", "expected array");
    for (const auto& p : jp) {
      if (!p.is_string()) throw ModelError(cx.node, "preds", "expected string ids");
      n.preds.push_back(p.get<std::string>());
    }
    if (jn.contains("skip_role")) {
      try {
        n.skip_role = skip_role_from_string(cx.get_str(jn, "skip_role", "skip_role"));
      } catch (const ModelError& e) {
        throw ModelError(cx.node, "skip_role", e.what());
      }
    }
    n.merged_into = cx.opt_str(jn, "merged_into", "merged_into");
    n.merged_downsample = cx.opt_str(jn, "merged_downsample", "merged_downsample");
    n.skip_pred = cx.opt_str(jn, "skip_pred", "skip_pred");
    if (jn.contains("forwards_input")) n.forwards_input = cx.get_bool(jn, "forwards_input", "forwards_input");

    const bool has_w = jn.contains("weight_ref");
    const bool has_b = jn.contains("bias_ref");
    if (is_conv_like(n.kind) && (!has_w || !has_b)) {
      throw ModelError(cx.node, has_w ? "bias_ref" : "weight_ref", "conv-like node requires parameter tensors");
    }
    if (!is_conv_like(n.kind) && (has_w || has_b)) {
      throw ModelError(cx.node, "weight_ref", "only conv-like nodes carry parameters");
    }
    if (has_w) {
      LayerParams p;
      p.weights = read_tensor(cx, jn.at("weight_ref"), "weight_ref", n.w_spec, blob);
      p.bias = read_tensor(cx, jn.at("bias_ref"), "bias_ref", n.b_spec, blob);
      g.weights.emplace(n.id, std::move(p));
    }
    g.nodes.emplace(n.id, std::move(n));
  }

  const auto& jedges = top.at(root, "edges", "edges");
  if (!jedges.is_array()) throw ModelError("", "edges", "expected array");
  for (const auto& je : jedges) {
    Ctx cx;
    Edge e;
    e.from = cx.get_str(je, "from", "edges.from");
    e.to = cx.get_str(je, "to", "edges.to");
    cx.node = e.to;
    if (je.contains("kind")) e.kind = edge_kind_from_string(cx.get_str(je, "kind", "edges.kind"));
    if (!g.nodes.count(e.from)) throw ModelError(e.to, "edges.from", "dangling edge from '" + e.from + "'");
    if (!g.nodes.count(e.to)) throw ModelError(e.from, "edges.to", "dangling edge to '" + e.to + "'");
    g.edges.push_back(std::move(e));
  }

  if (root.contains("skips")) {
    for (const auto& jk : root.at("skips")) {
      Ctx cx;
      SkipAnnotation s;
      s.conv1 = cx.get_str(jk, "conv1", "skips.conv1");
      cx.node = s.conv1;
      s.kind = skip_kind_from_string(cx.get_str(jk, "kind", "skips.kind"));
      s.conv0 = cx.get_str(jk, "conv0", "skips.conv0");
      s.downsample = cx.opt_str(jk, "downsample", "skips.downsample");
      s.naive_codes = cx.get_int(jk, "naive_codes", "skips.naive_codes");
      s.buffer_codes = cx.get_int(jk, "buffer_codes", "skips.buffer_codes");
      s.fifo_depth = cx.get_int(jk, "fifo_depth", "skips.fifo_depth");
      g.skips.push_back(std::move(s));
    }
  }

  auto violations = validate_graph(g);
  if (!violations.empty()) {
    const auto& v = violations.front();
    throw ModelError(v.node, v.rule, v.message);
  }
  return g;
}

namespace {

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelError("", "path", "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

Graph load_model_files(const std::string& manifest_path, const std::string& blob_path) {
  auto text = read_file_bytes(manifest_path);
  auto blob = read_file_bytes(blob_path);
  return parse_model(std::string_view(reinterpret_cast<const char*>(text.data()), text.size()), blob);
}

void save_model_files(const Graph& g, const std::string& manifest_path, const std::string& blob_path) {
  auto m = serialize_model(g);
  std::ofstream mo(manifest_path);
  if (!mo) throw ConfigError("cannot write '" + manifest_path + "'");
  mo << m.manifest << "\n";
  std::ofstream bo(blob_path, std::ios::binary);
  if (!bo) throw ConfigError("cannot write '" + blob_path + "'");
  bo.write(reinterpret_cast<const char*>(m.blob.data()), static_cast<std::streamsize>(m.blob.size()));
}

}  // namespace resflow
