#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "resflow/model_ir.hpp"

namespace resflow::ref {

// Codes are stored (h, w, c) with channels innermost, the order they stream in.
struct Tensor {
  std::vector<int> dims;  // {C, H, W}
  std::vector<int32_t> codes;
  QuantSpec spec;

  int ch() const { return dims.at(0); }
  int h() const { return dims.size() > 1 ? dims[1] : 1; }
  int w() const { return dims.size() > 2 ? dims[2] : 1; }
  size_t index(int c, int y, int x) const { return (size_t(y) * w() + x) * ch() + c; }
  int32_t at(int c, int y, int x) const { return codes[index(c, y, x)]; }

  bool operator==(const Tensor&) const = default;
};

Tensor make_tensor(int c, int h, int w, QuantSpec spec);
Tensor random_tensor(int c, int h, int w, QuantSpec spec, uint64_t seed);

// Input tensor for graph `g`'s input node filled with random codes.
Tensor random_input(const Graph& g, uint64_t seed);

// FNV-1a over the codes, for cheap determinism checks.
uint64_t digest(const Tensor& t);

// Aligns a code from frac `from` to the finer frac `to` (to >= from).
int64_t align_up(int64_t code, int from, int to);

// Executes one node. `inputs` follow node.preds order; params is required for
// conv-like kinds.
Tensor run_layer(const LayerNode& node, const std::vector<const Tensor*>& inputs, const LayerParams* params);

struct RunResult {
  Tensor output;
  std::map<std::string, Tensor> activations;
};

RunResult run_graph(const Graph& g, const Tensor& input);

// Tensor file: one JSON header line, then the little-endian code blob.
void save_tensor(const Tensor& t, const std::string& path);
Tensor load_tensor(const std::string& path);

}  // namespace resflow::ref
