#include <algorithm>

#include "resflow/dataflow_sim.hpp"
#include "sim/internal.hpp"

namespace resflow::sim {

std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::compute: return "compute";
    case TaskKind::parameter: return "parameter";
    case TaskKind::window_slice: return "window_slice";
    case TaskKind::reader: return "reader";
    case TaskKind::padding: return "padding";
    case TaskKind::dma_in: return "dma_in";
    case TaskKind::dma_out: return "dma_out";
    case TaskKind::pool: return "pool";
    case TaskKind::demux: return "demux";
  }
  return "?";
}

std::string_view to_string(ChannelKind k) {
  switch (k) {
    case ChannelKind::data: return "data";
    case ChannelKind::skip: return "skip";
    case ChannelKind::param: return "param";
    case ChannelKind::slice: return "slice";
    case ChannelKind::element: return "element";
    case ChannelKind::window: return "window";
  }
  return "?";
}

int Network::channel_index(const std::string& name) const {
  for (size_t i = 0; i < channels.size(); ++i) {
    if (channels[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

ChannelDesc& Network::channel(const std::string& name) {
  const int i = channel_index(name);
  if (i < 0) throw ConfigError("no channel '" + name + "'");
  return channels[i];
}

const ChannelDesc& Network::channel(const std::string& name) const {
  const int i = channel_index(name);
  if (i < 0) throw ConfigError("no channel '" + name + "'");
  return channels[i];
}

int Network::count(TaskKind k) const {
  return static_cast<int>(std::count_if(tasks.begin(), tasks.end(), [&](const TaskDesc& t) { return t.kind == k; }));
}

int Network::count_for(const std::string& node, TaskKind k) const {
  return static_cast<int>(
      std::count_if(tasks.begin(), tasks.end(), [&](const TaskDesc& t) { return t.kind == k && t.node == node; }));
}

bool is_global_pool(const LayerNode& n) {
  const auto& g = n.geom;
  return is_pool(n.kind) && g.oh == 1 && g.ow == 1 && g.pad == 0 && g.fh == g.ih && g.fw == g.iw;
}

int layer_lanes(const Graph& g, const alloc::AllocationPlan& plan, const std::string& id) {
  const auto& n = g.node(id);
  if (is_conv_like(n.kind)) return plan.layer(id).ow_par;
  return 1;
}

std::vector<Tap> layer_taps(const LayerGeom& g, int lanes) {
  std::vector<Tap> taps;
  const int width = g.fw + (lanes - 1) * g.stride;
  for (int ky = 0; ky < g.fh; ++ky) {
    for (int q = 0; q < width; ++q) {
      const int lane = ((q - g.pad) % lanes + lanes) % lanes;
      taps.push_back({ky, q, lane});
    }
  }
  return taps;
}

int64_t tap_position(const LayerGeom& g, int lanes, const Tap& t) {
  return int64_t{t.ky} * (g.iw / lanes) + (t.q - g.pad - t.lane) / lanes;
}

namespace {

class Builder {
 public:
  Builder(const Graph& g, const alloc::AllocationPlan& plan) : g_(g), plan_(plan) {
    net_.graph = g;
    net_.plan = plan;
  }

  Network run() {
    check();
    // Tasks first, so channel endpoints can be resolved by index.
    for (const auto& id : g_.topo_order()) create_tasks(id);
    for (const auto& id : g_.topo_order()) wire_node(id);
    for (const auto& ch : net_.channels) {
      if (ch.producer < 0 || ch.consumer < 0) throw PlanningError("channel '" + ch.name + "' left unconnected");
    }
    return std::move(net_);
  }

 private:
  void check() {
    for (const auto& [id, n] : g_.nodes) {
      if (n.kind == LayerKind::add) {
        throw UnsupportedTopology("add node '" + id + "' remains; simulate the optimized graph");
      }
      if (is_conv_like(n.kind)) {
        const auto* la = plan_.find(id);
        if (!la) throw PlanningError("plan has no entry for '" + id + "'");
        if (la->och != n.geom.och || n.geom.och % la->och_par != 0) {
          throw PlanningError("plan och_par for '" + id + "' does not divide och");
        }
        if (la->ow_par == 2 && (n.x_spec.bw != 8 || n.w_spec.bw != 8)) {
          throw PlanningError("'" + id + "' uses packed arithmetic but is not 8-bit");
        }
        if (la->ow_par == 2 && (n.geom.iw % 2 != 0 || n.geom.ow % 2 != 0)) {
          throw PlanningError("'" + id + "' has odd width with ow_par 2");
        }
      }
      if (is_pool(n.kind) && !is_global_pool(n) && n.geom.fw > n.geom.iw) {
        throw PlanningError("pool '" + id + "' window wider than its input");
      }
    }
  }

  int add_task(TaskDesc t) {
    net_.tasks.push_back(std::move(t));
    return static_cast<int>(net_.tasks.size()) - 1;
  }

  int add_channel(const std::string& name, ChannelKind kind, int64_t cap, int token, int producer, int consumer) {
    net_.channels.push_back({name, kind, cap, token, producer, consumer});
    return static_cast<int>(net_.channels.size()) - 1;
  }

  bool windowed(const LayerNode& n) const {
    return (is_conv_like(n.kind) && n.merged_into.empty()) || (is_pool(n.kind) && !is_global_pool(n));
  }

  // Task that reads node `id`'s input stream: per lane, the head tap; or the
  // single reader task for pools and dma_out.
  std::vector<int> readers(const std::string& id) const {
    auto it = readers_.find(id);
    if (it == readers_.end()) throw PlanningError("node '" + id + "' has no stream reader");
    return it->second;
  }

  void create_tasks(const std::string& id) {
    const auto& n = g_.node(id);
    if (n.kind == LayerKind::input) {
      TaskDesc t;
      t.name = id + "/dma_in";
      t.kind = TaskKind::dma_in;
      t.node = id;
      producer_[id] = add_task(t);
      return;
    }
    if (n.kind == LayerKind::output) {
      TaskDesc t;
      t.name = id + "/dma_out";
      t.kind = TaskKind::dma_out;
      t.node = id;
      readers_[id] = {add_task(t)};
      return;
    }
    if (!n.merged_into.empty()) return;  // executes inside conv0's task
    if (is_pool(n.kind) && is_global_pool(n)) {
      TaskDesc t;
      t.name = id + "/pool";
      t.kind = TaskKind::pool;
      t.node = id;
      const int idx = add_task(t);
      readers_[id] = {idx};
      producer_[id] = idx;
      return;
    }
    if (!windowed(n)) throw UnsupportedTopology("no task model for node '" + id + "'");

    const int lanes = is_conv_like(n.kind) ? plan_.layer(id).ow_par : 1;
    const auto taps = layer_taps(n.geom, lanes);
    net_.taps[id] = taps;
    std::vector<int> heads(lanes, -1);
    std::vector<int> tap_task(taps.size(), -1);
    const bool history = taps.size() > size_t(lanes);
    for (size_t i = 0; i < taps.size(); ++i) {
      TaskDesc t;
      t.name = id + (history ? "/tap[" : "/read[") + std::to_string(i) + "]";
      t.kind = history ? TaskKind::window_slice : TaskKind::reader;
      t.node = id;
      t.tap = static_cast<int>(i);
      t.ky = taps[i].ky;
      t.q = taps[i].q;
      t.lane = taps[i].lane;
      t.lanes = lanes;
      tap_task[i] = add_task(t);
    }
    // Chain each lane's taps newest first.
    for (int l = 0; l < lanes; ++l) {
      std::vector<int> order;
      for (size_t i = 0; i < taps.size(); ++i) {
        if (taps[i].lane == l) order.push_back(static_cast<int>(i));
      }
      std::sort(order.begin(), order.end(), [&](int a, int b) {
        return tap_position(n.geom, lanes, taps[a]) > tap_position(n.geom, lanes, taps[b]);
      });
      if (order.empty()) throw PlanningError("lane " + std::to_string(l) + " of '" + id + "' has no taps");
      heads[l] = tap_task[order.front()];
      head_pos_[id].push_back(tap_position(n.geom, lanes, taps[order.front()]));
      net_.tasks[heads[l]].head = true;
      for (size_t j = 1; j < order.size(); ++j) {
        const int64_t gap = (tap_position(n.geom, lanes, taps[order[j - 1]]) -
                             tap_position(n.geom, lanes, taps[order[j]])) *
                            n.geom.ich;
        const int from = tap_task[order[j - 1]];
        const int to = tap_task[order[j]];
        // One extra slot stands for the tap's own register, so a full slice
        // can still shift every cycle.
        const int ch = add_channel(id + "/slice[" + std::to_string(l) + "][" + std::to_string(j) + "]",
                                   ChannelKind::slice, gap + 1, 1, from, to);
        net_.tasks[from].out_slice = ch;
        net_.tasks[to].in_slice = ch;
      }
    }
    readers_[id] = heads;

    TaskDesc c;
    c.name = id + "/compute";
    c.kind = TaskKind::compute;
    c.node = id;
    c.lanes = lanes;
    const int comp = add_task(c);
    producer_[id] = comp;
    compute_[id] = comp;

    int pad_task = -1;
    if (n.geom.pad > 0) {
      TaskDesc p;
      p.name = id + "/padding";
      p.kind = TaskKind::padding;
      p.node = id;
      p.lanes = lanes;
      pad_task = add_task(p);
      net_.tasks[comp].window = add_channel(id + "/window", ChannelKind::window, 2,
                                            static_cast<int>(taps.size()), pad_task, comp);
      net_.tasks[pad_task].window = net_.tasks[comp].window;
    }
    const int elem_consumer = pad_task >= 0 ? pad_task : comp;
    // With stride > 1 a tap emits only while the newest window row streams
    // past, so it holds one output row of elements for the compute to drain.
    const int64_t elem_depth = n.geom.stride > 1 ? 2 + int64_t{n.geom.ich} * (n.geom.ow / lanes) : 2;
    std::vector<int> elems;
    for (size_t i = 0; i < taps.size(); ++i) {
      const int ch = add_channel(id + "/elem[" + std::to_string(i) + "]", ChannelKind::element, elem_depth, 1,
                                 tap_task[i], elem_consumer);
      net_.tasks[tap_task[i]].element = ch;
      elems.push_back(ch);
    }
    net_.tasks[elem_consumer].elements = elems;

    if (is_conv_like(n.kind)) {
      add_param(id, comp, false);
      if (!n.merged_downsample.empty()) add_param(n.merged_downsample, comp, true);
    }
  }

  void add_param(const std::string& layer, int comp, bool ds) {
    TaskDesc p;
    p.name = "param:" + layer;
    p.kind = TaskKind::parameter;
    p.node = layer;
    const int pt = add_task(p);
    const auto* sp = plan_.stream("param:" + layer, layer, EdgeKind::data);
    const int64_t depth = sp ? sp->depth : alloc::kParamStreamDepth;
    const int ch = add_channel("param:" + layer, ChannelKind::param, depth, 1, pt, comp);
    net_.tasks[pt].param = ch;
    if (ds) {
      net_.tasks[comp].param_ds = ch;
    } else {
      net_.tasks[comp].param = ch;
    }
  }

  int out_lanes(const std::string& id) const {
    const auto& n = g_.node(id);
    if (is_conv_like(n.kind)) return plan_.layer(id).ow_par;
    return 1;
  }

  int out_token(const std::string& id) const {
    const auto& n = g_.node(id);
    if (is_conv_like(n.kind)) return plan_.layer(id).och_par;
    return n.geom.och;
  }

  int64_t out_depth(const std::string& from, const std::string& to) const {
    if (const auto* s = plan_.stream(from, to, EdgeKind::data)) return s->depth;
    return 2;
  }

  // Lanes arrive in step, but a lane whose newest tap sits at an older
  // position finishes its part of a window early and would stall on its
  // element channels; its input stream absorbs the difference.
  int64_t lane_slack(const std::string& consumer, int lane, int token) const {
    auto it = head_pos_.find(consumer);
    if (it == head_pos_.end()) return 0;
    const auto& pos = it->second;
    const int64_t lead = *std::max_element(pos.begin(), pos.end()) - pos[size_t(lane)];
    const int64_t codes = lead * g_.node(consumer).geom.ich;
    return (codes + token - 1) / token;
  }

  void set_reader_source(int task, const std::string& producer, const std::vector<int>& chans) {
    const auto& p = g_.node(producer);
    auto& t = net_.tasks[task];
    t.src = chans;
    t.src_lanes = static_cast<int>(chans.size());
    t.src_token = out_token(producer);
    t.src_channels = p.geom.och;
    t.src_w = p.geom.ow;
    t.src_h = p.geom.oh;
  }

  void wire_node(const std::string& id) {
    for (const auto& e : g_.out_edges(id)) {
      if (e.kind != EdgeKind::data) {
        wire_skip(e);
        continue;
      }
      const int P = out_lanes(id);
      const auto rd = readers(e.to);
      const int C = static_cast<int>(rd.size());
      const int prod = producer_.at(id);
      const std::string base = id + "->" + e.to;
      std::vector<int> chans;
      for (int l = 0; l < P; ++l) {
        chans.push_back(add_channel(base + "[" + std::to_string(l) + "]", ChannelKind::data, out_depth(id, e.to),
                                    out_token(id), prod, -1));
      }
      auto& pt = net_.tasks[prod];
      if (pt.kind == TaskKind::dma_in) {
        pt.dests.push_back(chans);
      } else {
        pt.outputs.push_back(chans);
      }
      if (P == C || C == 1) {
        // Matching lanes pair up one to one; a single reader merges all.
        for (int r : rd) {
          const std::vector<int> src = (P == C && P > 1) ? std::vector<int>{chans[net_.tasks[r].lane]} : chans;
          set_reader_source(r, id, src);
          for (int ch : src) net_.channels[ch].consumer = r;
          if (src.size() != 1) continue;
          int64_t slack = lane_slack(e.to, net_.tasks[r].lane, out_token(id));
          // A compute producer with several groups already holds one token
          // of the lead in its og slots.
          if (slack > 0 && pt.kind == TaskKind::compute && out_depth(id, e.to) > 1) --slack;
          net_.channels[src[0]].capacity += slack;
        }
      } else if (P == 1 && C == 2) {
        // Split one column-interleaved stream into two lanes.
        TaskDesc d;
        d.name = base + "/demux";
        d.kind = TaskKind::demux;
        d.node = e.to;
        d.lanes = C;
        const int dt = add_task(d);
        set_reader_source(dt, id, chans);
        net_.channels[chans[0]].consumer = dt;
        std::vector<int> outs;
        for (int l = 0; l < C; ++l) {
          const int ch = add_channel(base + "/demux[" + std::to_string(l) + "]", ChannelKind::data,
                                     2 + lane_slack(e.to, l, out_token(id)), out_token(id), dt, rd[l]);
          outs.push_back(ch);
          set_reader_source(rd[l], id, {ch});
        }
        net_.tasks[dt].dests.push_back(outs);
      } else {
        throw PlanningError("cannot connect " + std::to_string(P) + " lanes of '" + id + "' to " +
                            std::to_string(C) + " lanes of '" + e.to + "'");
      }
    }
  }

  void wire_skip(const Edge& e) {
    const auto* sp = plan_.stream(e.from, e.to, e.kind);
    if (!sp) throw PlanningError("plan has no skip stream " + e.from + " -> " + e.to);
    const int lanes1 = plan_.layer(e.to).ow_par;
    const int c1 = compute_.at(e.to);
    std::vector<int> chans;
    for (int l = 0; l < lanes1; ++l) {
      const int producer =
          e.kind == EdgeKind::skip_forward ? readers(e.from).at(static_cast<size_t>(l)) : compute_.at(e.from);
      chans.push_back(add_channel(e.from + "~>" + e.to + "[" + std::to_string(l) + "]", ChannelKind::skip,
                                  sp->depth_of(l), sp->token_codes, producer, c1));
    }
    if (e.kind == EdgeKind::skip_forward) {
      const auto heads = readers(e.from);
      if (static_cast<int>(heads.size()) != lanes1) {
        throw PlanningError("skip source '" + e.from + "' and sink '" + e.to + "' differ in lane count");
      }
      for (int l = 0; l < lanes1; ++l) net_.tasks[heads[l]].forward = chans[l];
    } else {
      if (plan_.layer(e.from).ow_par != lanes1) {
        throw PlanningError("merged skip of '" + e.from + "' and '" + e.to + "' differ in lane count");
      }
      net_.tasks[compute_.at(e.from)].skip_out = chans;
    }
    net_.tasks[c1].skip_in = chans;
  }

  const Graph& g_;
  const alloc::AllocationPlan& plan_;
  Network net_;
  std::map<std::string, std::vector<int>> readers_;
  std::map<std::string, int> producer_;
  std::map<std::string, int> compute_;
  std::map<std::string, std::vector<int64_t>> head_pos_;
};

}  // namespace

Network elaborate(const Graph& g, const alloc::AllocationPlan& plan) { return Builder(g, plan).run(); }

}  // namespace resflow::sim
