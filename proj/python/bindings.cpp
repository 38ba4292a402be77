#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "resflow/alloc.hpp"
#include "resflow/cli_report.hpp"
#include "resflow/dsp_pack.hpp"
#include "resflow/errors.hpp"
#include "resflow/quant.hpp"

namespace py = pybind11;
using namespace resflow;

namespace {

py::tuple outcome(const cli::Outcome& o) { return py::make_tuple(o.exit_code, o.json, o.text); }

cli::RunConfig run_config(const std::string& model, const std::string& weights, const std::string& board,
                          int64_t n_par, int frames, uint64_t seed) {
  cli::RunConfig c;
  c.model = model;
  c.weights = weights;
  c.board = board;
  c.n_par = n_par;
  c.frames = frames;
  c.seed = seed;
  return c;
}

LayerGeom geom(int ich, int ih, int iw, int och, int oh, int ow, int fh, int fw, int stride, int pad) {
  return {ich, ih, iw, och, oh, ow, fh, fw, stride, pad};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "resflow planner, packing and simulator";

  py::register_exception<Error>(m, "ResflowError");

  m.def("quantize", [](double v, int bw, int frac) { return quant::quantize(v, {bw, frac, true}); }, py::arg("value"),
        py::arg("bw") = 8, py::arg("frac") = 0);
  m.def("dequantize", [](int64_t c, int bw, int frac) { return quant::dequantize(c, {bw, frac, true}); },
        py::arg("code"), py::arg("bw") = 8, py::arg("frac") = 0);

  m.def(
      "accumulator_requirements",
      [](int ich, int ih, int iw, int och, int oh, int ow, int fh, int fw, int stride, int pad, int bw) {
        const auto a = quant::accumulator_requirements(geom(ich, ih, iw, och, oh, ow, fh, fw, stride, pad), bw);
        py::dict d;
        d["width"] = a.width;
        d["n_acc"] = a.n_acc;
        d["bw_acc_required"] = a.bw_acc_required;
        d["n_phys"] = a.n_phys;
        d["bw_phys_required"] = a.bw_phys_required;
        return d;
      },
      py::arg("ich"), py::arg("ih"), py::arg("iw"), py::arg("och"), py::arg("oh"), py::arg("ow"), py::arg("fh"),
      py::arg("fw"), py::arg("stride") = 1, py::arg("pad") = 0, py::arg("bw") = 8);

  m.def(
      "window_slices",
      [](int ich, int iw, int fh, int fw, int ow_par) {
        LayerGeom g;
        g.ich = ich;
        g.iw = iw;
        g.fh = fh;
        g.fw = fw;
        return alloc::window_buffer_plan(g, ow_par).slice_sizes;
      },
      py::arg("ich"), py::arg("iw"), py::arg("fh"), py::arg("fw"), py::arg("ow_par") = 1);

  m.def(
      "packed_dot",
      [](const std::vector<int32_t>& a, const std::vector<int32_t>& d, const std::vector<int32_t>& b, int64_t init) {
        const auto r = dsp::packed_dot(std::span<const int32_t>(a), d, b, init);
        return py::make_tuple(r.a, r.d);
      },
      py::arg("a"), py::arg("d"), py::arg("b"), py::arg("init") = 0);

  // Commands return (exit_code, json, text), the same as the CLI.
  m.def(
      "generate",
      [](const std::string& net, const std::string& out_dir, uint64_t seed, int frames) {
        cli::GenerateConfig c;
        c.net = net;
        c.out_dir = out_dir;
        c.seed = seed;
        c.frames = frames;
        return outcome(cli::cmd_generate(c));
      },
      py::arg("net"), py::arg("out_dir"), py::arg("seed") = 1, py::arg("frames") = 0);
  m.def(
      "plan",
      [](const std::string& model, const std::string& weights, const std::string& board, int64_t n_par) {
        return outcome(cli::cmd_plan(run_config(model, weights, board, n_par, 1, 1)));
      },
      py::arg("model"), py::arg("weights"), py::arg("board") = "kv260", py::arg("n_par") = 0);
  m.def(
      "simulate",
      [](const std::string& model, const std::string& weights, const std::string& board, int64_t n_par, int frames,
         uint64_t seed) {
        cli::Outcome o;
        {
          py::gil_scoped_release unlocked;
          o = cli::cmd_simulate(run_config(model, weights, board, n_par, frames, seed));
        }
        return outcome(o);
      },
      py::arg("model"), py::arg("weights"), py::arg("board") = "kv260", py::arg("n_par") = 0, py::arg("frames") = 1,
      py::arg("seed") = 1);
}
