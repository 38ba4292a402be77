#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "resflow/model_ir.hpp"

namespace resflow::opt {

struct ResidualBlock {
  std::string input;  // tensor entering the block (X)
  std::string conv0;
  std::string conv1;
  std::string downsample;  // empty when the short branch is an identity
  std::string merge;       // add node; empty once folded

  bool has_downsample() const { return !downsample.empty(); }
  bool operator==(const ResidualBlock&) const = default;
};

// Blocks still carrying an add node. Throws UnsupportedTopology for adds
// whose branches are not (2 convs, 0 convs) or (2 convs, 1 pointwise conv).
std::vector<ResidualBlock> detect_blocks(const Graph& g);

struct ReceptiveField {
  int rh0 = 0;
  int rw0 = 0;
  int64_t b_r = 0;
  bool operator==(const ReceptiveField&) const = default;
};

// Region of conv0's input that one conv1 output depends on. conv1 must have
// stride 1.
ReceptiveField receptive_field(const LayerGeom& conv0, const LayerGeom& conv1);

// Codes the skip branch must hold when it is buffered separately.
int64_t skip_buffer_naive(const LayerGeom& conv0, const LayerGeom& conv1);
int64_t skip_buffer_naive(const Graph& g, const ResidualBlock& b);

// Codes held once the skip stream is sourced from conv0 and merged into
// conv1: conv1's window-buffer history.
int64_t skip_buffer_optimized(const LayerGeom& conv1);
int64_t skip_buffer_optimized(const Graph& g, const ResidualBlock& b);

Graph apply_temporal_reuse(const Graph& g, const ResidualBlock& b);
Graph apply_loop_merge(const Graph& g, const ResidualBlock& b);
Graph fold_add_into_accumulator(const Graph& g, const ResidualBlock& b);

Graph optimize(const Graph& g);

}  // namespace resflow::opt
