#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "resflow/model_ir.hpp"

namespace testing_support {

// splitmix64; tests draw everything from explicit seeds.
class Rng {
 public:
  explicit Rng(uint64_t seed) : s_(seed) {}

  uint64_t next() {
    uint64_t z = (s_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  // Uniform in [lo, hi].
  int64_t uniform(int64_t lo, int64_t hi) { return lo + static_cast<int64_t>(next() % uint64_t(hi - lo + 1)); }
  bool coin() { return next() & 1; }
  template <class T>
  const T& pick(const std::vector<T>& v) {
    return v[static_cast<size_t>(uniform(0, int64_t(v.size()) - 1))];
  }

 private:
  uint64_t s_;
};

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("resflow_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// input -> conv -> output with builder-chosen parameters.
inline resflow::Graph single_conv(int ich, int hw, int och, int f, int stride, int pad, uint64_t seed = 1) {
  resflow::GraphBuilder b(seed);
  auto x = b.input("input", ich, hw, hw, {8, resflow::GraphBuilder::kActFrac, true});
  x = b.conv("conv", x, och, f, stride, pad, true);
  b.output("output", x);
  return std::move(b).build();
}

// input -> block(identity) -> block(downsample, stride 2) -> pool -> fc.
inline resflow::Graph two_block_net(int ch = 16, int hw = 16, uint64_t seed = 7) {
  resflow::GraphBuilder b(seed);
  auto x = b.input("input", ch, hw, hw, {8, resflow::GraphBuilder::kActFrac, true});
  x = b.residual_block("b0", x, ch, 1, false);
  x = b.residual_block("b1", x, 2 * ch, 2, true);
  x = b.avgpool_global("pool", x);
  x = b.linear("fc", x, 10);
  b.output("output", x);
  return std::move(b).build();
}

// Hand-written minimal model: input(1x1x1) -> 1x1 conv -> output.
inline std::string minimal_manifest(bool w_signed = true) {
  const std::string s8 = R"({"bw": 8, "frac": 0, "signed": true})";
  const std::string w8 = std::string(R"({"bw": 8, "frac": 0, "signed": )") + (w_signed ? "true" : "false") + "}";
  const std::string s16 = R"({"bw": 16, "frac": 0, "signed": true})";
  const std::string geom =
      R"({"ich": 1, "ih": 1, "iw": 1, "och": 1, "oh": 1, "ow": 1, "fh": 1, "fw": 1, "stride": 1, "pad": 0})";
  return std::string(R"({"version": 1, "nodes": [)") +
         R"({"id": "in", "kind": "input", "geom": )" + geom + R"(, "specs": {"x": )" + s8 + R"(, "w": )" + s8 +
         R"(, "b": )" + s16 + R"(, "y": )" + s8 + R"(}, "relu": false, "preds": []},)" +
         R"({"id": "c", "kind": "conv", "geom": )" + geom + R"(, "specs": {"x": )" + s8 + R"(, "w": )" + w8 +
         R"(, "b": )" + s16 + R"(, "y": )" + s8 +
         R"(}, "relu": false, "preds": ["in"], "weight_ref": {"offset": 0, "len": 1}, "bias_ref": {"offset": 1, "len": 1}},)" +
         R"({"id": "out", "kind": "output", "geom": )" + geom + R"(, "specs": {"x": )" + s8 + R"(, "w": )" + s8 +
         R"(, "b": )" + s16 + R"(, "y": )" + s8 + R"(}, "relu": false, "preds": ["c"]}],)" +
         R"( "edges": [{"from": "in", "to": "c"}, {"from": "c", "to": "out"}]})";
}

}  // namespace testing_support
