#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "resflow/quant.hpp"
#include "resflow/reference_interp.hpp"
#include "support.hpp"

using namespace resflow;
using namespace resflow::ref;
using testing_support::Rng;

namespace {

// Plain NCHW double-precision conv. Every product of 8-bit codes is exact in
// a double, so rounding once at the end reproduces integer semantics.
std::vector<int32_t> oracle_conv(const LayerNode& n, const LayerParams& p, const Tensor& x) {
  const auto& g = n.geom;
  std::vector<double> in(size_t(g.ich) * g.ih * g.iw);
  for (int c = 0; c < g.ich; ++c)
    for (int y = 0; y < g.ih; ++y)
      for (int xx = 0; xx < g.iw; ++xx) in[(size_t(c) * g.ih + y) * g.iw + xx] = std::ldexp(x.at(c, y, xx), -n.x_spec.frac);

  std::vector<int32_t> out(size_t(g.och) * g.oh * g.ow);
  for (int o = 0; o < g.och; ++o) {
    for (int oy = 0; oy < g.oh; ++oy) {
      for (int ox = 0; ox < g.ow; ++ox) {
        double acc = std::ldexp(p.bias[o], -n.b_spec.frac);
        for (int c = 0; c < g.ich; ++c) {
          for (int ky = 0; ky < g.fh; ++ky) {
            for (int kx = 0; kx < g.fw; ++kx) {
              const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
              if (iy < 0 || ix < 0 || iy >= g.ih || ix >= g.iw) continue;
              const double w = std::ldexp(p.weights[((size_t(o) * g.ich + c) * g.fh + ky) * g.fw + kx], -n.w_spec.frac);
              acc += w * in[(size_t(c) * g.ih + iy) * g.iw + ix];
            }
          }
        }
        double v = std::ldexp(acc, n.y_spec.frac);
        v = v < 0 ? -std::floor(-v + 0.5) : std::floor(v + 0.5);
        if (n.relu) v = std::max(v, 0.0);
        v = std::clamp(v, double(n.y_spec.min_code()), double(n.y_spec.max_code()));
        out[(size_t(oy) * g.ow + ox) * g.och + o] = int32_t(v);
      }
    }
  }
  return out;
}

Graph identity_conv(int ch, int hw) {
  Graph g = testing_support::single_conv(ch, hw, ch, 1, 1, 0);
  auto& n = g.node("conv");
  n.w_spec.frac = 0;
  n.b_spec.frac = n.x_spec.frac;
  n.y_spec = n.x_spec;
  n.relu = false;
  auto& p = g.weights["conv"];
  std::fill(p.weights.begin(), p.weights.end(), 0);
  std::fill(p.bias.begin(), p.bias.end(), 0);
  for (int c = 0; c < ch; ++c) p.weights[size_t(c) * ch + c] = 1;
  return g;
}

}  // namespace

TEST(RunLayer, IdentityPointwiseConv) {
  const Graph g = identity_conv(8, 5);
  const Tensor x = random_input(g, 3);
  EXPECT_EQ(run_graph(g, x).output.codes, x.codes);
}

TEST(RunLayer, ZeroInputGivesRequantizedBias) {
  const Graph g = testing_support::single_conv(4, 6, 8, 3, 1, 1, 2);
  const auto& n = g.node("conv");
  const Tensor x = make_tensor(4, 6, 6, n.x_spec);
  const Tensor y = run_graph(g, x).output;
  for (int o = 0; o < 8; ++o) {
    const int64_t expect = quant::requantize(g.params("conv").bias[o], n.b_spec.frac, n.y_spec, n.relu);
    for (int yy = 0; yy < 6; ++yy)
      for (int xx = 0; xx < 6; ++xx) EXPECT_EQ(y.at(o, yy, xx), expect);
  }
}

TEST(RunLayer, MatchesNaiveOracle) {
  Rng rng(41);
  for (int i = 0; i < 60; ++i) {
    const int f = int(rng.pick(std::vector<int64_t>{1, 3, 5}));
    const int stride = int(rng.uniform(1, 2));
    const int pad = int(rng.uniform(0, f / 2));
    const int hw = int(rng.uniform(f, 12));
    const Graph g = testing_support::single_conv(int(rng.uniform(1, 9)), hw, int(rng.uniform(1, 9)), f, stride, pad,
                                                 rng.next());
    const Tensor x = random_input(g, rng.next());
    const auto& n = g.node("conv");
    ASSERT_EQ(run_layer(n, {&x}, &g.params("conv")).codes, oracle_conv(n, g.params("conv"), x))
        << "f=" << f << " stride=" << stride << " pad=" << pad << " hw=" << hw;
  }
}

TEST(RunLayer, PaddingEqualsExplicitZeroBorder) {
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    const int ch = int(rng.uniform(1, 6)), hw = int(rng.uniform(3, 10));
    const Graph g = testing_support::single_conv(ch, hw, 4, 3, 1, 1, rng.next());
    const Tensor x = random_input(g, rng.next());

    Graph h = g;
    auto& n = h.node("conv");
    n.geom.pad = 0;
    n.geom.ih = n.geom.iw = hw + 2;
    Tensor xp = make_tensor(ch, hw + 2, hw + 2, x.spec);
    for (int c = 0; c < ch; ++c)
      for (int y = 0; y < hw; ++y)
        for (int xx = 0; xx < hw; ++xx) xp.codes[xp.index(c, y + 1, xx + 1)] = x.at(c, y, xx);

    EXPECT_EQ(run_layer(g.node("conv"), {&x}, &g.params("conv")), run_layer(n, {&xp}, &h.params("conv")));
  }
}

TEST(RunLayer, RawAccumulatorIsLinear) {
  Rng rng(19);
  for (int i = 0; i < 20; ++i) {
    Graph g = testing_support::single_conv(int(rng.uniform(1, 8)), 7, int(rng.uniform(1, 8)), 3, 1, 1, rng.next());
    auto& n = g.node("conv");
    n.relu = false;
    n.y_spec = {32, n.x_spec.frac + n.w_spec.frac, true};
    auto& bias = g.weights["conv"].bias;
    std::fill(bias.begin(), bias.end(), 0);
    // Halve the codes so a + b stays in range.
    Tensor a = random_input(g, rng.next()), b = random_input(g, rng.next()), s = a;
    for (size_t k = 0; k < a.codes.size(); ++k) {
      a.codes[k] /= 2;
      b.codes[k] /= 2;
      s.codes[k] = a.codes[k] + b.codes[k];
    }
    const auto* p = &g.params("conv");
    const Tensor ya = run_layer(n, {&a}, p), yb = run_layer(n, {&b}, p), ys = run_layer(n, {&s}, p);
    for (size_t k = 0; k < ys.codes.size(); ++k) ASSERT_EQ(ys.codes[k], ya.codes[k] + yb.codes[k]);
  }
}

TEST(RunLayer, AddAlignsToFinerFraction) {
  LayerNode n;
  n.id = "add";
  n.kind = LayerKind::add;
  n.geom = {1, 1, 1, 1, 1, 1, 1, 1, 1, 0};
  n.y_spec = {8, 4, true};
  Tensor a = make_tensor(1, 1, 1, {8, 4, true});
  Tensor b = make_tensor(1, 1, 1, {8, 2, true});
  a.codes = {3};  // 0.1875
  b.codes = {1};  // 0.25
  EXPECT_EQ(run_layer(n, {&a, &b}, nullptr).codes, std::vector<int32_t>{7});
  n.y_spec = {8, 1, true};
  EXPECT_EQ(run_layer(n, {&a, &b}, nullptr).codes, std::vector<int32_t>{1});
  EXPECT_EQ(align_up(3, 2, 5), 24);
  EXPECT_THROW(align_up(3, 5, 2), ConfigError);
}

TEST(RunLayer, GlobalAveragePool) {
  GraphBuilder b(1);
  auto x = b.input("in", 2, 4, 4, {8, 4, true});
  x = b.avgpool_global("pool", x);
  b.output("out", x);
  const Graph g = std::move(b).build();
  Tensor t = make_tensor(2, 4, 4, {8, 4, true});
  for (int y = 0; y < 4; ++y)
    for (int xx = 0; xx < 4; ++xx) {
      t.codes[t.index(0, y, xx)] = 5;
      t.codes[t.index(1, y, xx)] = y * 4 + xx;  // mean 7.5 rounds away to 8
    }
  const Tensor out = run_graph(g, t).output;
  EXPECT_EQ(out.at(0, 0, 0), 5);
  EXPECT_EQ(out.at(1, 0, 0), 8);
}

TEST(RunLayer, GeometryMismatchIsReported) {
  const Graph g = testing_support::single_conv(4, 6, 8, 3, 1, 1);
  const Tensor x = make_tensor(3, 6, 6, g.node("conv").x_spec);
  try {
    run_layer(g.node("conv"), {&x}, &g.params("conv"));
    FAIL();
  } catch (const ModelError& e) {
    EXPECT_EQ(e.node(), "conv");
  }
  EXPECT_THROW(run_layer(g.node("conv"), {&x}, nullptr), ModelError);
}

TEST(RunGraph, DeterministicAndComplete) {
  const Graph g = build_resnet8(4);
  const Tensor x = random_input(g, 9);
  const auto r1 = run_graph(g, x), r2 = run_graph(g, x);
  EXPECT_EQ(digest(r1.output), digest(r2.output));
  EXPECT_EQ(r1.activations, r2.activations);
  EXPECT_EQ(r1.activations.size(), g.nodes.size());
  EXPECT_EQ(r1.output.ch(), 10);
  EXPECT_NE(digest(run_graph(g, random_input(g, 10)).output), digest(r1.output));
  // Activations should not collapse to a constant through the stack.
  const auto& last = r1.activations.at("s3b0_add").codes;
  EXPECT_GT(std::set<int32_t>(last.begin(), last.end()).size(), 8u);
}

TEST(Tensor, FileRoundTrip) {
  const auto dir = testing_support::temp_dir("tensor");
  for (const QuantSpec s : {QuantSpec{8, 4, true}, QuantSpec{32, 11, true}, QuantSpec{8, 0, false}}) {
    const Tensor t = random_tensor(3, 5, 7, s, 12);
    save_tensor(t, (dir / "t.tensor").string());
    EXPECT_EQ(load_tensor((dir / "t.tensor").string()), t);
  }
  EXPECT_THROW(load_tensor((dir / "none.tensor").string()), ConfigError);
}
