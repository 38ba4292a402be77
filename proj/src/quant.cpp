#include "resflow/quant.hpp"

#include <algorithm>
#include <cmath>

namespace resflow::quant {

int64_t shift_round(int64_t x, int shift) {
  if (shift <= 0) return x;
  const int64_t half = int64_t{1} << (shift - 1);
  if (x >= 0) return (x + half) >> shift;
  return -((-x + half) >> shift);
}

int64_t clamp_code(int64_t v, const QuantSpec& spec, bool relu) {
  int64_t lo = spec.min_code();
  if (relu) lo = std::max<int64_t>(lo, 0);
  return std::clamp(v, lo, spec.max_code());
}

int64_t quantize(double b, const QuantSpec& spec) {
  const double scaled = std::ldexp(b, spec.frac);
  // std::round is half-away-from-zero.
  const double r = std::round(scaled);
  const double lo = static_cast<double>(spec.min_code());
  const double hi = static_cast<double>(spec.max_code());
  if (!(r > lo)) return spec.min_code();
  if (r >= hi) return spec.max_code();
  return static_cast<int64_t>(r);
}

double dequantize(int64_t code, const QuantSpec& spec) {
  if (!spec.contains(code)) throw ConfigError("code " + std::to_string(code) + " outside spec range");
  return std::ldexp(static_cast<double>(code), -spec.frac);
}

QuantSpec bias_spec(const QuantSpec& x, const QuantSpec& w) { return {16, x.frac + w.frac, true}; }

int64_t requantize(int64_t acc, int in_frac, const QuantSpec& out, bool relu) {
  if (in_frac < out.frac) {
    throw ConfigError("requantize needs in_frac >= out.frac (got " + std::to_string(in_frac) + " < " +
                      std::to_string(out.frac) + ")");
  }
  return clamp_code(shift_round(acc, in_frac - out.frac), out, relu);
}

int ceil_log2(int64_t n) {
  int b = 0;
  while ((int64_t{1} << b) < n) ++b;
  return b;
}

AccSpec accumulator_requirements(const LayerGeom& g, int bw) {
  AccSpec a;
  a.n_acc = int64_t{g.och} * g.ich * g.fh * g.fw;
  a.bw_acc_required = ceil_log2(a.n_acc) + 2 * bw;
  a.n_phys = int64_t{g.ich} * g.fh * g.fw;
  a.bw_phys_required = ceil_log2(a.n_phys) + 2 * bw;
  if (a.bw_acc_required > a.width) {
    throw PlanningError("accumulator overflow risk: " + std::to_string(a.bw_acc_required) + " bits needed for N_acc " +
                        std::to_string(a.n_acc));
  }
  return a;
}

}  // namespace resflow::quant
