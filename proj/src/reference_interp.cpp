#include "resflow/reference_interp.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "resflow/quant.hpp"

namespace resflow::ref {

Tensor make_tensor(int c, int h, int w, QuantSpec spec) {
  Tensor t;
  t.dims = {c, h, w};
  t.codes.assign(size_t(c) * h * w, 0);
  t.spec = spec;
  return t;
}

Tensor random_tensor(int c, int h, int w, QuantSpec spec, uint64_t seed) {
  Tensor t = make_tensor(c, h, w, spec);
  uint64_t s = seed * 0x2545f4914f6cdd1dULL + 0x9e3779b97f4a7c15ULL;
  const int64_t lo = spec.min_code();
  const uint64_t span = static_cast<uint64_t>(spec.max_code() - lo + 1);
  for (auto& v : t.codes) {
    s ^= s << 13;
    s ^= s >> 7;
    s ^= s << 17;
    v = static_cast<int32_t>(lo + static_cast<int64_t>(s % span));
  }
  return t;
}

Tensor random_input(const Graph& g, uint64_t seed) {
  const auto& in = g.input_node();
  return random_tensor(in.geom.och, in.geom.oh, in.geom.ow, in.y_spec, seed);
}

uint64_t digest(const Tensor& t) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (int32_t c : t.codes) {
    auto u = static_cast<uint32_t>(c);
    for (int b = 0; b < 4; ++b) {
      h ^= (u >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

int64_t align_up(int64_t code, int from, int to) {
  if (to < from) throw ConfigError("alignment must move to a finer fraction");
  return code * (int64_t{1} << (to - from));
}

namespace {

void check_input(const LayerNode& n, const Tensor& t, int c, int h, int w) {
  if (t.ch() != c || t.h() != h || t.w() != w) {
    throw ModelError(n.id, "geom", "input tensor " + std::to_string(t.ch()) + "x" + std::to_string(t.h()) + "x" +
                                       std::to_string(t.w()) + " does not match node geometry");
  }
}

Tensor run_conv(const LayerNode& n, const std::vector<const Tensor*>& in, const LayerParams& p) {
  const auto& g = n.geom;
  const Tensor& x = *in.at(0);
  check_input(n, x, g.ich, g.ih, g.iw);
  const Tensor* skip = nullptr;
  const int acc_frac = n.x_spec.frac + n.w_spec.frac;
  if (!n.skip_pred.empty()) {
    if (in.size() < 2) throw ModelError(n.id, "skip_pred", "missing skip tensor");
    skip = in[1];
    check_input(n, *skip, g.och, g.oh, g.ow);
  }
  Tensor y = make_tensor(g.och, g.oh, g.ow, n.y_spec);
  const size_t kk = size_t(g.fh) * g.fw;
  for (int oy = 0; oy < g.oh; ++oy) {
    for (int ox = 0; ox < g.ow; ++ox) {
      for (int o = 0; o < g.och; ++o) {
        int64_t acc = p.bias[o];
        if (skip) acc += align_up(skip->at(o, oy, ox), skip->spec.frac, acc_frac);
        for (int c = 0; c < g.ich; ++c) {
          const int32_t* w = &p.weights[(size_t(o) * g.ich + c) * kk];
          for (int ky = 0; ky < g.fh; ++ky) {
            const int iy = oy * g.stride + ky - g.pad;
            if (iy < 0 || iy >= g.ih) continue;
            for (int kx = 0; kx < g.fw; ++kx) {
              const int ix = ox * g.stride + kx - g.pad;
              if (ix < 0 || ix >= g.iw) continue;
              acc += int64_t{w[ky * g.fw + kx]} * x.at(c, iy, ix);
            }
          }
        }
        y.codes[y.index(o, oy, ox)] = static_cast<int32_t>(quant::requantize(acc, acc_frac, n.y_spec, n.relu));
      }
    }
  }
  return y;
}

int log2_exact(int64_t v) {
  int b = 0;
  while ((int64_t{1} << b) < v) ++b;
  return b;
}

Tensor run_pool(const LayerNode& n, const Tensor& x) {
  const auto& g = n.geom;
  check_input(n, x, g.ich, g.ih, g.iw);
  Tensor y = make_tensor(g.och, g.oh, g.ow, n.y_spec);
  const bool avg = n.kind == LayerKind::avgpool;
  const int sh = avg ? log2_exact(int64_t{g.fh} * g.fw) : 0;
  for (int oy = 0; oy < g.oh; ++oy) {
    for (int ox = 0; ox < g.ow; ++ox) {
      for (int c = 0; c < g.och; ++c) {
        int64_t acc = avg ? 0 : std::numeric_limits<int64_t>::min();
        for (int ky = 0; ky < g.fh; ++ky) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.ih) continue;
          for (int kx = 0; kx < g.fw; ++kx) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix < 0 || ix >= g.iw) continue;
            const int64_t v = x.at(c, iy, ix);
            acc = avg ? acc + v : std::max(acc, v);
          }
        }
        if (!avg && acc == std::numeric_limits<int64_t>::min()) acc = 0;
        y.codes[y.index(c, oy, ox)] =
            static_cast<int32_t>(quant::requantize(acc, n.x_spec.frac + sh, n.y_spec, n.relu));
      }
    }
  }
  return y;
}

Tensor run_add(const LayerNode& n, const Tensor& a, const Tensor& b) {
  const auto& g = n.geom;
  check_input(n, a, g.och, g.oh, g.ow);
  check_input(n, b, g.och, g.oh, g.ow);
  // Align the coarser operand up to the finer fraction so no bits are lost
  // before the single output rounding.
  const int f = std::max(a.spec.frac, b.spec.frac);
  Tensor y = make_tensor(g.och, g.oh, g.ow, n.y_spec);
  for (size_t i = 0; i < y.codes.size(); ++i) {
    const int64_t s = align_up(a.codes[i], a.spec.frac, f) + align_up(b.codes[i], b.spec.frac, f);
    y.codes[i] = static_cast<int32_t>(quant::requantize(s, f, n.y_spec, n.relu));
  }
  return y;
}

}  // namespace

Tensor run_layer(const LayerNode& n, const std::vector<const Tensor*>& inputs, const LayerParams* params) {
  if (inputs.empty() || !inputs[0]) throw ModelError(n.id, "preds", "no input tensor");
  switch (n.kind) {
    case LayerKind::conv:
    case LayerKind::pointwise_conv:
    case LayerKind::linear:
      if (!params) throw ModelError(n.id, "weight_ref", "missing parameters");
      return run_conv(n, inputs, *params);
    case LayerKind::maxpool:
    case LayerKind::avgpool:
      return run_pool(n, *inputs[0]);
    case LayerKind::add:
      if (inputs.size() != 2) throw ModelError(n.id, "preds", "add needs two inputs");
      return run_add(n, *inputs[0], *inputs[1]);
    case LayerKind::input:
    case LayerKind::output: {
      check_input(n, *inputs[0], n.geom.ich, n.geom.ih, n.geom.iw);
      return *inputs[0];
    }
  }
  throw ModelError(n.id, "kind", "unhandled kind");
}

RunResult run_graph(const Graph& g, const Tensor& input) {
  RunResult r;
  for (const auto& id : g.topo_order()) {
    const auto& n = g.node(id);
    Tensor out;
    if (n.kind == LayerKind::input) {
      check_input(n, input, n.geom.och, n.geom.oh, n.geom.ow);
      out = input;
      out.spec = n.y_spec;
    } else {
      std::vector<const Tensor*> ins;
      for (const auto& p : n.preds) ins.push_back(&r.activations.at(p));
      const LayerParams* params = is_conv_like(n.kind) ? &g.params(id) : nullptr;
      out = run_layer(n, ins, params);
    }
    if (n.kind == LayerKind::output) r.output = out;
    r.activations.emplace(id, std::move(out));
  }
  return r;
}

void save_tensor(const Tensor& t, const std::string& path) {
  nlohmann::json h = {{"dims", t.dims},
                      {"spec", {{"bw", t.spec.bw}, {"frac", t.spec.frac}, {"signed", t.spec.is_signed}}},
                      {"count", t.codes.size()}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << h.dump() << "\n";
  const int nb = t.spec.bw / 8;
  for (int32_t c : t.codes) {
    const auto u = static_cast<uint32_t>(c);
    for (int b = 0; b < nb; ++b) out.put(static_cast<char>(u >> (8 * b)));
  }
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::string header;
  std::getline(in, header);
  Tensor t;
  try {
    auto h = nlohmann::json::parse(header);
    t.dims = h.at("dims").get<std::vector<int>>();
    const auto& s = h.at("spec");
    t.spec = {s.at("bw").get<int>(), s.at("frac").get<int>(), s.at("signed").get<bool>()};
    t.codes.resize(h.at("count").get<size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad tensor header in '" + path + "': " + e.what());
  }
  size_t expect = 1;
  for (int d : t.dims) expect *= size_t(d);
  if (expect != t.codes.size()) throw ConfigError("tensor '" + path + "' count does not match dims");
  const int nb = t.spec.bw / 8;
  for (auto& c : t.codes) {
    uint32_t u = 0;
    for (int b = 0; b < nb; ++b) {
      const int ch = in.get();
      if (ch == EOF) throw ConfigError("tensor '" + path + "' truncated");
      u |= uint32_t(uint8_t(ch)) << (8 * b);
    }
    if (nb < 4) {
      const uint32_t sign = uint32_t{1} << (8 * nb - 1);
      if (t.spec.is_signed && (u & sign)) u |= ~((sign << 1) - 1);
    }
    c = static_cast<int32_t>(u);
  }
  while (t.dims.size() < 3) t.dims.push_back(1);
  return t;
}

}  // namespace resflow::ref
