#include "resflow/cli_report.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "resflow/graph_opt.hpp"
#include "resflow/reference_interp.hpp"

namespace resflow::cli {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

const std::vector<Board>& boards() {
  static const std::vector<Board> b = {
      {"ultra96", 360, 214.0, 360, 216, 0},
      {"kv260", 1248, 274.0, 1248, 144, 64},
  };
  return b;
}

std::optional<Board> find_board(std::string_view name) {
  for (const auto& b : boards()) {
    if (b.name == name) return b;
  }
  return std::nullopt;
}

RunConfig RunConfig::resolved() const {
  RunConfig r = *this;
  if (!board.empty()) {
    auto b = find_board(board);
    if (!b) throw ConfigError("unknown board '" + board + "' (ultra96, kv260)");
    if (r.n_par == 0) r.n_par = b->n_par;
    if (r.freq_mhz == 0) r.freq_mhz = b->freq_mhz;
  }
  if (r.n_par < 1) throw ConfigError("n_par must be >= 1");
  if (!(r.freq_mhz > 0)) throw ConfigError("frequency must be positive");
  if (r.frames < 1) throw ConfigError("frames must be >= 1");
  return r;
}

Outcome error_outcome(int code, const std::string& kind, const std::string& message) {
  Outcome o;
  o.exit_code = code;
  o.json = json{{"error", kind}, {"message", message}}.dump(2);
  o.text = "error: " + message + "\n";
  return o;
}

namespace {

template <class F>
Outcome guarded(F&& body) {
  try {
    return body();
  } catch (const InfeasibleBudget& e) {
    return error_outcome(kInfeasible, "infeasible_budget", e.what());
  } catch (const ModelError& e) {
    return error_outcome(kInvalidInput, "invalid_model", e.what());
  } catch (const UnsupportedTopology& e) {
    return error_outcome(kInvalidInput, "unsupported_topology", e.what());
  } catch (const Error& e) {
    return error_outcome(kInvalidInput, "invalid_input", e.what());
  } catch (const json::exception& e) {
    return error_outcome(kInvalidInput, "invalid_json", e.what());
  }
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + p.string() + "'");
  out << s;
  if (s.empty() || s.back() != '\n') out << '\n';
}

void write_out(const RunConfig& cfg, const std::string& name, const std::string& s) {
  if (cfg.out_dir.empty()) return;
  fs::create_directories(cfg.out_dir);
  write_text(fs::path(cfg.out_dir) / name, s);
}

json ratio(const alloc::Ratio& r) { return {{"num", r.num}, {"den", r.den}}; }

std::vector<ref::Tensor> frames_for(const Graph& g, uint64_t seed, int n) {
  std::vector<ref::Tensor> v;
  for (int i = 0; i < n; ++i) v.push_back(ref::random_input(g, seed + static_cast<uint64_t>(i)));
  return v;
}

json buffers(const Pipeline& p) {
  int64_t window = 0;
  for (const auto& [id, w] : p.plan.windows) window += w.buffer_codes;
  int64_t naive = 0, optimized = 0;
  for (const auto& s : p.optimized.skips) {
    naive += s.naive_codes;
    optimized += s.buffer_codes;
  }
  int64_t skip_stream = 0, data_stream = 0;
  for (const auto& s : p.plan.streams) {
    int64_t tokens = 0;
    for (int l = 0; l < s.lanes; ++l) tokens += s.depth_of(l);
    if (s.kind != EdgeKind::data) {
      skip_stream += tokens * s.token_codes;
    } else if (s.from.rfind("param:", 0) != 0) {
      data_stream += tokens * s.token_codes;
    }
  }
  return {{"window_codes", window},
          {"skip_naive_codes", naive},
          {"skip_optimized_codes", optimized},
          {"skip_stream_codes", skip_stream},
          {"data_stream_codes", data_stream}};
}

}  // namespace

int model_bit_width(const Graph& g) {
  int bw = 0;
  for (const auto& [id, n] : g.nodes) {
    if (!is_conv_like(n.kind)) continue;
    bw = std::max({bw, n.x_spec.bw, n.w_spec.bw});
  }
  return bw == 0 ? 8 : bw;
}

Pipeline build_pipeline(const Graph& g, const RunConfig& cfg) {
  Pipeline p;
  p.graph = g;
  p.optimized = opt::optimize(g);
  p.plan = alloc::solve_allocation(p.optimized, cfg.n_par, model_bit_width(g), cfg.unit);
  p.prediction = alloc::predict(p.plan, cfg.freq_mhz);
  return p;
}

std::string plan_json(const Pipeline& p, const RunConfig& cfg) {
  const auto& plan = p.plan;
  json j;
  j["model"] = cfg.model;
  j["board"] = cfg.board.empty() ? json(nullptr) : json(cfg.board);
  j["n_par"] = plan.n_par_budget;
  j["budget_unit"] = std::string(alloc::to_string(plan.unit));
  j["freq_mhz"] = cfg.freq_mhz;
  j["bw"] = plan.bw;
  j["cp_tot"] = plan.cp_tot;
  j["dsp_tot"] = plan.dsp_tot;
  j["budget_used"] = plan.budget_used();
  j["bottleneck"] = plan.bottleneck;
  j["i_max"] = plan.i_max;
  j["min_throughput"] = ratio(plan.min_throughput);
  j["predicted"] = {{"fps", p.prediction.fps},
                    {"gops", p.prediction.gops},
                    {"interval_cycles", p.prediction.interval_cycles},
                    {"latency_estimate_cycles", p.prediction.latency_estimate_cycles}};
  json layers = json::array();
  for (const auto& la : plan.layers) {
    const auto& w = plan.windows.at(la.id);
    layers.push_back({{"id", la.id},
                      {"kind", std::string(to_string(p.optimized.node(la.id).kind))},
                      {"k", la.k},
                      {"och", la.och},
                      {"och_par", la.och_par},
                      {"ow_par", la.ow_par},
                      {"och_groups", la.och_groups()},
                      {"cp", la.cp},
                      {"macs", la.c},
                      {"cycles_per_frame", (la.c + la.cp - 1) / la.cp},
                      {"r", ratio(la.r)},
                      {"cw", plan.cw.at(la.id)},
                      {"window",
                       {{"buffer_codes", w.buffer_codes},
                        {"window_width", w.window_width},
                        {"window_elements", w.window_elements},
                        {"slice_count", w.slice_count},
                        {"slice_sizes", w.slice_sizes},
                        {"padding", w.padding_enabled}}}});
  }
  j["layers"] = layers;
  json streams = json::array();
  for (const auto& s : plan.streams) {
    json js = {{"from", s.from},
               {"to", s.to},
               {"kind", std::string(to_string(s.kind))},
               {"lanes", s.lanes},
               {"token_codes", s.token_codes},
               {"depth", s.depth}};
    if (!s.lane_depths.empty()) js["lane_depths"] = s.lane_depths;
    streams.push_back(js);
  }
  j["streams"] = streams;
  json skips = json::array();
  for (const auto& s : p.optimized.skips) {
    skips.push_back({{"conv0", s.conv0},
                     {"conv1", s.conv1},
                     {"downsample", s.downsample},
                     {"kind", std::string(to_string(s.kind))},
                     {"naive_codes", s.naive_codes},
                     {"buffer_codes", s.buffer_codes}});
  }
  j["skips"] = skips;
  j["buffers"] = buffers(p);
  if (auto b = find_board(cfg.board)) {
    j["board_resources"] = {{"dsp", b->dsp}, {"bram36", b->bram36}, {"uram", b->uram}};
  }
  return j.dump(2);
}

std::string plan_text(const Pipeline& p, const RunConfig& cfg) {
  const auto& plan = p.plan;
  std::ostringstream os;
  char line[256];
  os << "model " << cfg.model << ", board " << (cfg.board.empty() ? "-" : cfg.board) << ", n_par "
     << plan.n_par_budget << " (" << alloc::to_string(plan.unit) << "), " << cfg.freq_mhz << " MHz, " << plan.bw
     << "-bit\n";
  std::snprintf(line, sizeof line, "%-16s %5s %7s %6s %4s %8s %10s %6s %8s\n", "layer", "k", "och_par", "ow_par",
                "og", "cp", "cycles", "cw", "window");
  os << line;
  for (const auto& la : plan.layers) {
    std::snprintf(line, sizeof line, "%-16s %5d %7d %6d %4d %8lld %10lld %6lld %8lld%s\n", la.id.c_str(), la.k,
                  la.och_par, la.ow_par, la.och_groups(), static_cast<long long>(la.cp),
                  static_cast<long long>((la.c + la.cp - 1) / la.cp), static_cast<long long>(plan.cw.at(la.id)),
                  static_cast<long long>(plan.windows.at(la.id).buffer_codes), la.id == plan.bottleneck ? " *" : "");
    os << line;
  }
  std::snprintf(line, sizeof line, "cp_tot %lld, dsp_tot %lld, predicted %.1f fps, %.1f Gops/s, interval %lld cycles\n",
                static_cast<long long>(plan.cp_tot), static_cast<long long>(plan.dsp_tot), p.prediction.fps,
                p.prediction.gops, static_cast<long long>(p.prediction.interval_cycles));
  os << line;
  return os.str();
}

std::string trace_json(const sim::Network& net, const sim::SimTrace& trace, const RunConfig& cfg) {
  const auto m = sim::measure(trace, cfg.freq_mhz);
  json j;
  j["frames"] = cfg.frames;
  j["seed"] = cfg.seed;
  j["freq_mhz"] = cfg.freq_mhz;
  j["completed"] = trace.completed;
  j["deadlock"] = trace.deadlock;
  j["diagnostic"] = trace.diagnostic;
  j["cycles"] = trace.cycles;
  j["first_input_cycle"] = trace.first_input_cycle;
  j["frame_done"] = trace.frame_done;
  j["steady_interval_cycles"] = trace.steady_interval;
  j["latency_cycles"] = trace.latency_cycles;
  j["fps"] = m.fps;
  j["latency_ms"] = m.latency_ms;
  j["bottleneck_task"] = m.bottleneck_task;
  j["bottleneck_busy"] = m.bottleneck_busy;
  j["acc_max_abs"] = trace.acc_max_abs;
  j["acc_overflows"] = trace.acc_overflows;
  json digests = json::array();
  for (const auto& t : trace.outputs) digests.push_back(ref::digest(t));
  j["output_digests"] = digests;
  j["task_count"] = net.tasks.size();
  j["channel_count"] = net.channels.size();
  json tasks = json::array();
  for (const auto& t : trace.tasks) {
    if (t.kind == sim::TaskKind::window_slice) continue;
    tasks.push_back({{"name", t.name},
                     {"kind", std::string(sim::to_string(t.kind))},
                     {"fired", t.fired},
                     {"blocked_in", t.blocked_in},
                     {"blocked_out", t.blocked_out},
                     {"idle", t.idle}});
  }
  j["tasks"] = tasks;
  json chans = json::array();
  for (size_t i = 0; i < trace.channels.size(); ++i) {
    const auto& c = trace.channels[i];
    const auto kind = net.channels[i].kind;
    if (kind == sim::ChannelKind::slice || kind == sim::ChannelKind::element) continue;
    chans.push_back({{"name", c.name},
                     {"kind", std::string(sim::to_string(kind))},
                     {"capacity", c.capacity},
                     {"token_codes", net.channels[i].token_codes},
                     {"high_water", c.high_water},
                     {"pushed", c.pushed}});
  }
  j["channels"] = chans;
  return j.dump(2);
}

std::string report_json(const std::string& plan_text_json, const std::string& trace_text_json) {
  const auto plan = json::parse(plan_text_json);
  const auto trace = json::parse(trace_text_json);
  int64_t macs = 0;
  for (const auto& l : plan.at("layers")) macs += l.at("macs").get<int64_t>();
  const double fps = trace.at("fps").get<double>();
  const double predicted = plan.at("predicted").at("fps").get<double>();
  json j;
  j["model"] = plan.at("model");
  j["board"] = plan.at("board");
  j["n_par"] = plan.at("n_par");
  j["budget_unit"] = plan.at("budget_unit");
  j["freq_mhz"] = plan.at("freq_mhz");
  j["fps"] = fps;
  j["predicted_fps"] = predicted;
  j["fps_ratio"] = predicted > 0 ? fps / predicted : 0.0;
  j["gops"] = 2.0 * double(macs) * fps * 1e-9;
  j["latency_cycles"] = trace.at("latency_cycles");
  j["latency_ms"] = trace.at("latency_ms");
  j["steady_interval_cycles"] = trace.at("steady_interval_cycles");
  j["predicted_interval_cycles"] = plan.at("predicted").at("interval_cycles");
  j["cp_tot"] = plan.at("cp_tot");
  j["dsp_tot"] = plan.at("dsp_tot");
  j["budget_used"] = plan.at("budget_used");
  j["bottleneck"] = plan.at("bottleneck");
  j["bottleneck_task"] = trace.at("bottleneck_task");
  j["completed"] = trace.at("completed");
  j["deadlock"] = trace.at("deadlock");
  j["buffers"] = plan.at("buffers");
  if (plan.contains("board_resources")) j["board_resources"] = plan.at("board_resources");
  return j.dump(2);
}

namespace {

Graph load(const RunConfig& cfg) {
  if (cfg.model.empty()) throw ConfigError("--model is required");
  if (cfg.weights.empty()) throw ConfigError("--weights is required");
  return load_model_files(cfg.model, cfg.weights);
}

struct SimRun {
  Pipeline pipe;
  sim::Network net;
  std::vector<ref::Tensor> inputs;
  sim::SimTrace trace;
};

SimRun run_sim(const RunConfig& cfg) {
  SimRun r;
  r.pipe = build_pipeline(load(cfg), cfg);
  r.net = sim::elaborate(r.pipe.optimized, r.pipe.plan);
  r.inputs = frames_for(r.pipe.graph, cfg.seed, cfg.frames);
  sim::SimConfig sc;
  sc.record_events = !cfg.trace_csv.empty();
  r.trace = sim::simulate(r.net, r.inputs, sc);
  if (!cfg.trace_csv.empty()) {
    const fs::path p(cfg.trace_csv);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_text(p, sim::events_csv(r.net, r.trace));
  }
  return r;
}

Outcome deadlocked(const SimRun& r, std::string json_text) {
  Outcome o;
  o.exit_code = kDeadlock;
  o.json = std::move(json_text);
  o.text = (r.trace.deadlock ? "deadlock: " : "did not finish: ") + r.trace.diagnostic + "\n";
  return o;
}

json mismatch(const std::string& layer, int frame, size_t index, int64_t expected, int64_t got) {
  return {{"layer", layer}, {"frame", frame}, {"index", index}, {"expected", expected}, {"got", got}};
}

// First differing code between two tensors, or npos.
size_t first_diff(const ref::Tensor& a, const ref::Tensor& b) {
  if (a.codes.size() != b.codes.size()) return std::min(a.codes.size(), b.codes.size());
  for (size_t i = 0; i < a.codes.size(); ++i) {
    if (a.codes[i] != b.codes[i]) return i;
  }
  return std::string::npos;
}

int64_t code_or(const ref::Tensor& t, size_t i) { return i < t.codes.size() ? t.codes[i] : 0; }

std::string tensor_file(const std::string& layer) { return layer + ".tensor"; }

}  // namespace

Outcome cmd_plan(const RunConfig& raw) {
  return guarded([&] {
    const auto cfg = raw.resolved();
    const auto p = build_pipeline(load(cfg), cfg);
    Outcome o;
    o.json = plan_json(p, cfg);
    o.text = plan_text(p, cfg);
    write_out(cfg, "plan.json", o.json);
    if (cfg.dump_opt_graph) {
      const auto g = serialize_model(p.optimized).manifest;
      write_out(cfg, "opt_graph.json", g);
      o.json = g;
    }
    return o;
  });
}

Outcome cmd_simulate(const RunConfig& raw) {
  return guarded([&] {
    const auto cfg = raw.resolved();
    const auto r = run_sim(cfg);
    const auto plan = plan_json(r.pipe, cfg);
    Outcome o;
    o.json = trace_json(r.net, r.trace, cfg);
    write_out(cfg, "plan.json", plan);
    write_out(cfg, "trace.json", o.json);
    if (!r.trace.completed) return deadlocked(r, o.json);
    const auto m = sim::measure(r.trace, cfg.freq_mhz);
    std::ostringstream os;
    os << cfg.frames << " frames in " << r.trace.cycles << " cycles, interval " << r.trace.steady_interval
       << " (predicted " << r.pipe.prediction.interval_cycles << "), " << m.fps << " fps, latency "
       << r.trace.latency_cycles << " cycles\n";
    o.text = os.str();
    return o;
  });
}

Outcome cmd_verify(const RunConfig& raw) {
  return guarded([&] {
    auto cfg = raw.resolved();
    json golden_index;
    if (!cfg.golden.empty()) {
      std::ifstream in(fs::path(cfg.golden) / "index.json");
      if (!in) throw ConfigError("cannot open golden index in '" + cfg.golden + "'");
      golden_index = json::parse(in);
      // Golden outputs fix the frames.
      cfg.seed = golden_index.at("seed").get<uint64_t>();
      cfg.frames = golden_index.at("frames").get<int>();
    }
    const auto r = run_sim(cfg);
    json j = {{"frames", cfg.frames}, {"seed", cfg.seed}, {"golden", !cfg.golden.empty()}};
    if (!r.trace.completed) {
      j["pass"] = false;
      j["diagnostic"] = r.trace.diagnostic;
      return deadlocked(r, j.dump(2));
    }
    const auto& g = r.pipe.graph;
    const std::string out_id = g.output_node().id;
    std::optional<json> bad;
    for (int f = 0; f < cfg.frames && !bad; ++f) {
      const auto ref_run = ref::run_graph(g, r.inputs[size_t(f)]);
      const auto& got = r.trace.outputs.at(size_t(f));
      if (size_t i = first_diff(ref_run.output, got); i != std::string::npos) {
        bad = mismatch(out_id, f, i, code_or(ref_run.output, i), code_or(got, i));
        break;
      }
      if (cfg.golden.empty()) continue;
      // The reference on these weights against the one the golden set was
      // made from, layer by layer in execution order.
      const fs::path dir = fs::path(cfg.golden) / ("frame" + std::to_string(f));
      for (const auto& id : g.topo_order()) {
        const auto it = ref_run.activations.find(id);
        if (it == ref_run.activations.end() || !fs::exists(dir / tensor_file(id))) continue;
        const auto expect = ref::load_tensor((dir / tensor_file(id)).string());
        if (size_t i = first_diff(expect, it->second); i != std::string::npos) {
          bad = mismatch(id, f, i, code_or(expect, i), code_or(it->second, i));
          break;
        }
      }
    }
    Outcome o;
    j["pass"] = !bad;
    if (bad) {
      j["mismatch"] = *bad;
      o.exit_code = kMismatch;
      o.text = "mismatch at layer " + (*bad)["layer"].get<std::string>() + ", frame " +
               std::to_string((*bad)["frame"].get<int>()) + ", index " +
               std::to_string((*bad)["index"].get<size_t>()) + ": expected " +
               std::to_string((*bad)["expected"].get<int64_t>()) + ", got " +
               std::to_string((*bad)["got"].get<int64_t>()) + "\n";
    } else {
      o.text = "simulator matches the reference on " + std::to_string(cfg.frames) + " frames\n";
    }
    o.json = j.dump(2);
    write_out(cfg, "verify.json", o.json);
    return o;
  });
}

Outcome cmd_report(const RunConfig& raw) {
  return guarded([&] {
    const auto cfg = raw.resolved();
    const auto r = run_sim(cfg);
    const auto plan = plan_json(r.pipe, cfg);
    const auto trace = trace_json(r.net, r.trace, cfg);
    write_out(cfg, "plan.json", plan);
    write_out(cfg, "trace.json", trace);
    Outcome o;
    o.json = report_json(plan, trace);
    write_out(cfg, "report.json", o.json);
    if (!r.trace.completed) return deadlocked(r, o.json);
    const auto rep = json::parse(o.json);
    std::ostringstream os;
    os << rep["fps"].get<double>() << " fps measured, " << rep["predicted_fps"].get<double>() << " predicted (ratio "
       << rep["fps_ratio"].get<double>() << "), " << rep["gops"].get<double>() << " Gops/s, latency "
       << rep["latency_cycles"].get<int64_t>() << " cycles\n";
    o.text = plan_text(r.pipe, cfg) + os.str();
    return o;
  });
}

Outcome cmd_generate(const GenerateConfig& cfg) {
  return guarded([&] {
    if (cfg.out_dir.empty()) throw ConfigError("--out is required");
    if (cfg.frames < 0) throw ConfigError("frames must be >= 0");
    Graph g;
    if (cfg.net == "resnet8") {
      g = build_resnet8(cfg.seed);
    } else if (cfg.net == "resnet20") {
      g = build_resnet20(cfg.seed);
    } else {
      throw ConfigError("unknown net '" + cfg.net + "' (resnet8, resnet20)");
    }
    const fs::path dir(cfg.out_dir);
    fs::create_directories(dir);
    save_model_files(g, (dir / "model.json").string(), (dir / "weights.bin").string());
    json j = {{"net", cfg.net},
              {"seed", cfg.seed},
              {"model", (dir / "model.json").string()},
              {"weights", (dir / "weights.bin").string()}};
    if (cfg.frames > 0) {
      const fs::path gd = dir / "golden";
      json layers = json::array();
      for (const auto& id : g.topo_order()) layers.push_back(id);
      const auto inputs = frames_for(g, cfg.seed, cfg.frames);
      for (int f = 0; f < cfg.frames; ++f) {
        const fs::path fd = gd / ("frame" + std::to_string(f));
        fs::create_directories(fd);
        const auto run = ref::run_graph(g, inputs[size_t(f)]);
        for (const auto& [id, t] : run.activations) ref::save_tensor(t, (fd / tensor_file(id)).string());
      }
      write_text(gd / "index.json", json{{"seed", cfg.seed}, {"frames", cfg.frames}, {"layers", layers}}.dump(2));
      j["golden"] = gd.string();
    }
    Outcome o;
    o.json = j.dump(2);
    o.text = "wrote " + cfg.net + " to " + dir.string() + "\n";
    return o;
  });
}

}  // namespace resflow::cli
