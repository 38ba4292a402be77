#pragma once

#include <cstdint>

#include "resflow/model_ir.hpp"

namespace resflow::quant {

// Round half away from zero of x / 2^shift, shift >= 0.
int64_t shift_round(int64_t x, int shift);

int64_t clamp_code(int64_t v, const QuantSpec& spec, bool relu = false);

int64_t quantize(double b, const QuantSpec& spec);
double dequantize(int64_t code, const QuantSpec& spec);

// 16-bit signed with frac = frac_x + frac_w.
QuantSpec bias_spec(const QuantSpec& x, const QuantSpec& w);

// Power-of-two down-scale of an accumulator into `out`. Throws ConfigError
// when in_frac < out.frac.
int64_t requantize(int64_t acc, int in_frac, const QuantSpec& out, bool relu);

struct AccSpec {
  int width = 32;
  int64_t n_acc = 0;
  int bw_acc_required = 0;
  int64_t n_phys = 0;
  int bw_phys_required = 0;
};

int ceil_log2(int64_t n);

// Throws PlanningError when the required width exceeds 32 bits.
AccSpec accumulator_requirements(const LayerGeom& geom, int bw);

}  // namespace resflow::quant
