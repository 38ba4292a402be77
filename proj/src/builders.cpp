#include <algorithm>
#include <cmath>

#include "resflow/model_ir.hpp"

namespace resflow {

GraphBuilder::GraphBuilder(uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ULL) {}

// splitmix64
uint64_t GraphBuilder::next() {
  uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

LayerParams GraphBuilder::random_params(int och, int ich, int fh, int fw) {
  // Scale the weight range with fan-in so activations neither die out nor
  // saturate through a deep stack.
  const int fan_in = ich * fh * fw;
  const int lim = std::clamp(static_cast<int>(std::lround(222.0 / std::sqrt(double(fan_in)))), 1, 127);
  LayerParams p;
  p.weights.resize(size_t(och) * fan_in);
  for (auto& w : p.weights) w = static_cast<int32_t>(next() % uint64_t(2 * lim + 1)) - lim;
  p.bias.resize(och);
  for (auto& b : p.bias) b = static_cast<int32_t>(next() % 513) - 256;
  return p;
}

namespace {

QuantSpec act_spec() { return {8, GraphBuilder::kActFrac, true}; }

void link(Graph& g, LayerNode n) {
  for (const auto& p : n.preds) g.edges.push_back({p, n.id, EdgeKind::data});
  g.nodes.emplace(n.id, std::move(n));
}

}  // namespace

std::string GraphBuilder::input(const std::string& id, int ch, int h, int w, QuantSpec spec) {
  LayerNode n;
  n.id = id;
  n.kind = LayerKind::input;
  n.geom = {ch, h, w, ch, h, w, 1, 1, 1, 0};
  n.x_spec = n.w_spec = n.b_spec = n.y_spec = spec;
  link(g_, std::move(n));
  return id;
}

std::string GraphBuilder::conv_impl(const std::string& id, LayerKind kind, const std::string& pred, int och, int f,
                                    int stride, int pad, bool relu, std::optional<QuantSpec> y_override) {
  const auto& p = g_.node(pred);
  LayerNode n;
  n.id = id;
  n.kind = kind;
  auto& gm = n.geom;
  gm.ich = p.geom.och;
  gm.ih = p.geom.oh;
  gm.iw = p.geom.ow;
  gm.och = och;
  gm.fh = gm.fw = f;
  gm.stride = stride;
  gm.pad = pad;
  gm.oh = conv_out_extent(gm.ih, f, stride, pad);
  gm.ow = conv_out_extent(gm.iw, f, stride, pad);
  n.x_spec = p.y_spec;
  n.w_spec = {8, kWeightFrac, true};
  n.b_spec = {16, n.x_spec.frac + n.w_spec.frac, true};
  n.y_spec = y_override ? *y_override : act_spec();
  n.relu = relu;
  n.preds = {pred};
  g_.weights.emplace(id, random_params(och, gm.ich, f, f));
  link(g_, std::move(n));
  return id;
}

std::string GraphBuilder::conv(const std::string& id, const std::string& pred, int och, int f, int stride, int pad,
                               bool relu) {
  const auto kind = f == 1 ? LayerKind::pointwise_conv : LayerKind::conv;
  return conv_impl(id, kind, pred, och, f, stride, pad, relu, std::nullopt);
}

std::string GraphBuilder::conv_accumulator(const std::string& id, const std::string& pred, int och, int f,
                                           int stride, int pad) {
  const auto& p = g_.node(pred);
  const QuantSpec acc{32, p.y_spec.frac + kWeightFrac, true};
  const auto kind = f == 1 ? LayerKind::pointwise_conv : LayerKind::conv;
  return conv_impl(id, kind, pred, och, f, stride, pad, false, acc);
}

std::string GraphBuilder::add(const std::string& id, const std::string& a, const std::string& b, bool relu,
                              QuantSpec out_spec) {
  const auto& pa = g_.node(a);
  LayerNode n;
  n.id = id;
  n.kind = LayerKind::add;
  n.geom = {pa.geom.och, pa.geom.oh, pa.geom.ow, pa.geom.och, pa.geom.oh, pa.geom.ow, 1, 1, 1, 0};
  n.x_spec = pa.y_spec;
  n.w_spec = n.b_spec = out_spec;
  n.y_spec = out_spec;
  n.relu = relu;
  n.preds = {a, b};
  link(g_, std::move(n));
  return id;
}

std::string GraphBuilder::avgpool_global(const std::string& id, const std::string& pred) {
  const auto& p = g_.node(pred);
  LayerNode n;
  n.id = id;
  n.kind = LayerKind::avgpool;
  n.geom = {p.geom.och, p.geom.oh, p.geom.ow, p.geom.och, 1, 1, p.geom.oh, p.geom.ow, 1, 0};
  n.x_spec = n.w_spec = n.b_spec = n.y_spec = p.y_spec;
  n.preds = {pred};
  link(g_, std::move(n));
  return id;
}

std::string GraphBuilder::maxpool(const std::string& id, const std::string& pred, int f, int stride, int pad) {
  const auto& p = g_.node(pred);
  LayerNode n;
  n.id = id;
  n.kind = LayerKind::maxpool;
  const int oh = conv_out_extent(p.geom.oh, f, stride, pad);
  const int ow = conv_out_extent(p.geom.ow, f, stride, pad);
  n.geom = {p.geom.och, p.geom.oh, p.geom.ow, p.geom.och, oh, ow, f, f, stride, pad};
  n.x_spec = n.w_spec = n.b_spec = n.y_spec = p.y_spec;
  n.preds = {pred};
  link(g_, std::move(n));
  return id;
}

std::string GraphBuilder::linear(const std::string& id, const std::string& pred, int out_features) {
  const auto& p = g_.node(pred);
  if (p.geom.oh != 1 || p.geom.ow != 1) throw ModelError(id, "geom", "linear layer expects a 1x1 input");
  return conv_impl(id, LayerKind::linear, pred, out_features, 1, 1, 0, false, std::nullopt);
}

std::string GraphBuilder::output(const std::string& id, const std::string& pred) {
  const auto& p = g_.node(pred);
  LayerNode n;
  n.id = id;
  n.kind = LayerKind::output;
  n.geom = {p.geom.och, p.geom.oh, p.geom.ow, p.geom.och, p.geom.oh, p.geom.ow, 1, 1, 1, 0};
  n.x_spec = n.w_spec = n.b_spec = n.y_spec = p.y_spec;
  n.preds = {pred};
  link(g_, std::move(n));
  return id;
}

std::string GraphBuilder::residual_block(const std::string& prefix, const std::string& pred, int och, int stride,
                                         bool downsample) {
  const auto c0 = conv(prefix + "_conv0", pred, och, 3, stride, 1, true);
  const auto c1 = conv_accumulator(prefix + "_conv1", c0, och, 3, 1, 1);
  std::string skip = pred;
  if (downsample) skip = conv(prefix + "_ds", pred, och, 1, stride, 0, false);
  return add(prefix + "_add", c1, skip, true, act_spec());
}

Graph GraphBuilder::build() && { return std::move(g_); }

namespace {

Graph build_cifar_resnet(uint64_t seed, int blocks_per_stage) {
  GraphBuilder b(seed);
  auto x = b.input("input", 3, 32, 32, act_spec());
  x = b.conv("stem", x, 16, 3, 1, 1, true);
  const int widths[3] = {16, 32, 64};
  int ch = 16;
  for (int s = 0; s < 3; ++s) {
    for (int k = 0; k < blocks_per_stage; ++k) {
      const bool entry = k == 0 && widths[s] != ch;
      const std::string prefix = "s" + std::to_string(s + 1) + "b" + std::to_string(k);
      x = b.residual_block(prefix, x, widths[s], entry ? 2 : 1, entry);
      ch = widths[s];
    }
  }
  x = b.avgpool_global("pool", x);
  x = b.linear("fc", x, 10);
  b.output("output", x);
  return std::move(b).build();
}

}  // namespace

Graph build_resnet8(uint64_t seed) { return build_cifar_resnet(seed, 1); }
Graph build_resnet20(uint64_t seed) { return build_cifar_resnet(seed, 3); }

}  // namespace resflow
