#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "resflow/errors.hpp"

namespace resflow {

enum class LayerKind { conv, pointwise_conv, linear, maxpool, avgpool, add, input, output };
enum class SkipRole { none, skip_source, skip_sink, merged_downsample };

// Physical stream kinds. `data` carries a producer's output tensor; the two
// skip kinds are introduced by graph optimization and carry the residual
// operand from conv0's task straight into conv1.
enum class EdgeKind { data, skip_forward, skip_merged };

enum class SkipKind { forwarded_window, merged_output };

std::string_view to_string(LayerKind k);
std::string_view to_string(SkipRole r);
std::string_view to_string(EdgeKind k);
std::string_view to_string(SkipKind k);
LayerKind layer_kind_from_string(std::string_view s);
SkipRole skip_role_from_string(std::string_view s);
EdgeKind edge_kind_from_string(std::string_view s);
SkipKind skip_kind_from_string(std::string_view s);

bool is_conv_like(LayerKind k);
bool is_pool(LayerKind k);

struct LayerGeom {
  int ich = 1;
  int ih = 1;
  int iw = 1;
  int och = 1;
  int oh = 1;
  int ow = 1;
  int fh = 1;
  int fw = 1;
  int stride = 1;
  int pad = 0;

  bool operator==(const LayerGeom&) const = default;
};

// Output extent along one axis for the given input extent, filter and stride.
int conv_out_extent(int in, int filter, int stride, int pad);

// Fixed-point format: value = code * 2^-frac.
struct QuantSpec {
  int bw = 8;
  int frac = 0;
  bool is_signed = true;

  int64_t min_code() const;
  int64_t max_code() const;
  bool contains(int64_t code) const { return code >= min_code() && code <= max_code(); }

  bool operator==(const QuantSpec&) const = default;
};

struct LayerNode {
  std::string id;
  LayerKind kind = LayerKind::conv;
  LayerGeom geom;
  QuantSpec x_spec;
  QuantSpec w_spec;
  QuantSpec b_spec;
  QuantSpec y_spec;
  bool relu = false;
  std::vector<std::string> preds;
  SkipRole skip_role = SkipRole::none;

  // Annotations written by graph optimization.
  std::string merged_into;        // on a downsample conv executed by another task
  std::string merged_downsample;  // on conv0: the downsample it computes as a second output
  std::string skip_pred;          // on conv1 after add folding: tensor initialising the accumulator
  bool forwards_input = false;    // on conv0 under temporal reuse

  bool operator==(const LayerNode&) const = default;
};

struct Edge {
  std::string from;
  std::string to;
  EdgeKind kind = EdgeKind::data;

  bool operator==(const Edge&) const = default;
};

struct SkipAnnotation {
  SkipKind kind = SkipKind::forwarded_window;
  std::string conv0;
  std::string conv1;
  std::string downsample;  // empty for forwarded_window
  int64_t naive_codes = 0;
  int64_t buffer_codes = 0;
  int64_t fifo_depth = 0;  // in single-code tokens; alloc re-expresses it per lane

  bool operator==(const SkipAnnotation&) const = default;
};

// Integer parameters of a conv-like node. Weights are och-major, then ich,
// fh, fw.
struct LayerParams {
  std::vector<int32_t> weights;
  std::vector<int32_t> bias;

  bool operator==(const LayerParams&) const = default;
};

struct Graph {
  std::map<std::string, LayerNode> nodes;
  std::vector<Edge> edges;
  std::map<std::string, LayerParams> weights;
  std::vector<SkipAnnotation> skips;

  bool operator==(const Graph&) const = default;

  const LayerNode& node(const std::string& id) const;
  LayerNode& node(const std::string& id);
  bool has_node(const std::string& id) const { return nodes.count(id) != 0; }
  const LayerParams& params(const std::string& id) const;

  const LayerNode& input_node() const;
  const LayerNode& output_node() const;

  // Consumers of `id` along physical edges.
  std::vector<Edge> out_edges(const std::string& id) const;
  std::vector<Edge> in_edges(const std::string& id) const;

  // Semantic consumers: nodes listing `id` among their preds.
  std::vector<std::string> consumers(const std::string& id) const;

  // Topological order over semantic (pred) dependencies. Throws
  // ModelError on cycles.
  std::vector<std::string> topo_order() const;

  const SkipAnnotation* skip_for_conv1(const std::string& conv1) const;
};

struct Violation {
  std::string node;
  std::string rule;
  std::string message;
};

std::vector<Violation> validate_graph(const Graph& g);

// Multiply-accumulate count of a conv-like layer: oh*ow*och*ich*fh*fw.
int64_t layer_macs(const LayerGeom& geom);

// Manifest + weight blob (see docs/model_format.md).
struct SerializedModel {
  std::string manifest;
  std::vector<uint8_t> blob;
};

SerializedModel serialize_model(const Graph& g);
Graph parse_model(std::string_view manifest_text, const std::vector<uint8_t>& weight_blob);

Graph load_model_files(const std::string& manifest_path, const std::string& blob_path);
void save_model_files(const Graph& g, const std::string& manifest_path, const std::string& blob_path);

// CIFAR-10 shaped residual networks with seeded in-range parameters.
Graph build_resnet8(uint64_t seed);
Graph build_resnet20(uint64_t seed);

// Incremental construction used by the generators and by tests.
class GraphBuilder {
 public:
  static constexpr int kActFrac = 4;
  static constexpr int kWeightFrac = 7;

  explicit GraphBuilder(uint64_t seed);

  std::string input(const std::string& id, int ch, int h, int w, QuantSpec spec);
  std::string conv(const std::string& id, const std::string& pred, int och, int f, int stride, int pad,
                   bool relu);
  // Conv whose output is the raw accumulator (32-bit, frac_x + frac_w), as
  // produced for the long branch of a residual block before the merge.
  std::string conv_accumulator(const std::string& id, const std::string& pred, int och, int f, int stride,
                               int pad);
  std::string add(const std::string& id, const std::string& a, const std::string& b, bool relu,
                  QuantSpec out_spec);
  std::string avgpool_global(const std::string& id, const std::string& pred);
  std::string maxpool(const std::string& id, const std::string& pred, int f, int stride, int pad);
  std::string linear(const std::string& id, const std::string& pred, int out_features);
  std::string output(const std::string& id, const std::string& pred);

  // Residual block: conv0 (relu) -> conv1 (accumulator) -> add(relu) with an
  // optional pointwise downsample on the short branch. Returns the add id.
  std::string residual_block(const std::string& prefix, const std::string& pred, int och, int stride,
                             bool downsample);

  Graph build() &&;
  const Graph& peek() const { return g_; }

 private:
  std::string conv_impl(const std::string& id, LayerKind kind, const std::string& pred, int och, int f,
                        int stride, int pad, bool relu, std::optional<QuantSpec> y_override);
  LayerParams random_params(int och, int ich, int fh, int fw);
  uint64_t next();

  Graph g_;
  uint64_t state_;
};

}  // namespace resflow
