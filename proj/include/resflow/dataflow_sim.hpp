#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "resflow/alloc.hpp"
#include "resflow/model_ir.hpp"
#include "resflow/reference_interp.hpp"

namespace resflow::sim {

// `reader` is a window tap with no history (one tap per lane, pointwise).
enum class TaskKind { compute, parameter, window_slice, reader, padding, dma_in, dma_out, pool, demux };
std::string_view to_string(TaskKind k);

enum class ChannelKind { data, skip, param, slice, element, window };
std::string_view to_string(ChannelKind k);

struct ChannelDesc {
  std::string name;
  ChannelKind kind = ChannelKind::data;
  int64_t capacity = 1;  // tokens
  int token_codes = 1;
  int producer = -1;  // task index
  int consumer = -1;
};

// Static wiring of one task. Which fields matter depends on kind.
struct TaskDesc {
  std::string name;
  TaskKind kind = TaskKind::compute;
  std::string node;  // graph node the task belongs to
  int lane = 0;
  int lanes = 1;  // lanes of the owning layer

  // window_slice, reader
  int tap = -1;     // index into the layer's tap list
  int ky = 0, q = 0;
  bool head = false;
  int in_slice = -1;
  int out_slice = -1;
  int element = -1;
  int forward = -1;  // temporal-reuse skip output (head only)

  // readers of a producer stream (head tap, pool, dma_out, demux)
  std::vector<int> src;  // per producer lane
  int src_lanes = 1;
  int src_token = 1;
  int src_channels = 1;  // codes per position
  int src_w = 1, src_h = 1;

  // compute / padding
  std::vector<int> elements;  // per tap, lane-interleaved order of the layer's tap list
  int window = -1;
  int param = -1;
  int param_ds = -1;
  std::vector<int> skip_in;                // per lane
  std::vector<std::vector<int>> outputs;   // per consumer, per lane
  std::vector<int> skip_out;               // merged downsample result, per lane

  // demux / dma_in
  std::vector<std::vector<int>> dests;  // per consumer, per lane (dma_in: lanes of 1)
};

struct Tap {
  int ky = 0;
  int q = 0;
  int lane = 0;
};

// Process network produced from an optimized graph and a plan. Value type;
// channel capacities may be edited before simulate().
struct Network {
  Graph graph;
  alloc::AllocationPlan plan;
  std::vector<ChannelDesc> channels;
  std::vector<TaskDesc> tasks;
  std::map<std::string, std::vector<Tap>> taps;  // per windowed layer, ordered [ky][q]

  int channel_index(const std::string& name) const;
  ChannelDesc& channel(const std::string& name);
  const ChannelDesc& channel(const std::string& name) const;
  int count(TaskKind k) const;
  int count_for(const std::string& node, TaskKind k) const;
};

Network elaborate(const Graph& g, const alloc::AllocationPlan& plan);

struct SimConfig {
  int pipeline_depth = 8;  // drain cycles after each frame of a compute loop
  int param_warmup = 4;
  int64_t max_cycles = 0;  // 0: derived from the plan
  bool record_events = false;
};

struct TaskStats {
  std::string name;
  TaskKind kind = TaskKind::compute;
  int64_t fired = 0;
  int64_t blocked_in = 0;
  int64_t blocked_out = 0;
  int64_t idle = 0;
};

struct ChannelStats {
  std::string name;
  int64_t capacity = 0;
  int64_t high_water = 0;
  int64_t pushed = 0;
  int64_t popped = 0;
  int64_t in_flight = 0;
};

struct Event {
  int64_t cycle = 0;
  int task = 0;
  char what = 'f';  // f fire, i blocked on input, o blocked on output
};

struct SimTrace {
  bool completed = false;
  bool deadlock = false;
  std::string diagnostic;
  int64_t cycles = 0;
  std::vector<int64_t> frame_done;  // completion cycle per frame
  int64_t first_input_cycle = -1;
  int64_t steady_interval = 0;
  int64_t latency_cycles = 0;
  std::vector<ref::Tensor> outputs;
  std::vector<TaskStats> tasks;
  std::vector<ChannelStats> channels;
  int64_t acc_max_abs = 0;
  int64_t acc_overflows = 0;
  std::vector<Event> events;
};

SimTrace simulate(const Network& net, const std::vector<ref::Tensor>& frames, const SimConfig& cfg = {});

struct DeadlockCheck {
  bool pass = false;
  std::string diagnostic;
  SimTrace trace;
};

// Runs `frames` random frames through the network.
DeadlockCheck check_deadlock_free(const Network& net, int frames, uint64_t seed = 1, const SimConfig& cfg = {});

struct Measurement {
  double fps = 0;
  double latency_ms = 0;
  std::string bottleneck_task;
  double bottleneck_busy = 0;
  std::vector<std::pair<std::string, double>> occupancy;  // channel -> high water / capacity
};

Measurement measure(const SimTrace& trace, double freq_mhz);

// Cycle-by-cycle CSV of recorded events: cycle,task,event.
std::string events_csv(const Network& net, const SimTrace& trace);

}  // namespace resflow::sim
