#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace resflow::dsp {

// 27x18 multiplier with a 48-bit post-adder. Two 8-bit activations share one
// 8-bit weight; the low field is 18 bits wide (16-bit product + 2 guard bits).
inline constexpr int kWordA = 27;
inline constexpr int kWordB = 18;
inline constexpr int kAccBits = 48;
inline constexpr int kLowField = 18;
inline constexpr int kMaxChain = 7;

int64_t sign_extend(int64_t v, int bits);
bool fits_signed(int64_t v, int bits);

struct PackedOperand {
  int64_t word27 = 0;
  int64_t word18 = 0;
};

struct ChainState {
  int64_t p = 0;
  int taps_done = 0;
};

int64_t pack_activations(int a, int d);
PackedOperand make_operand(int a, int d, int b);

// One DSP stage: p += word27 * word18. Throws when the chain is already full
// or a value leaves its hardware width.
ChainState packed_mac(const PackedOperand& op, const ChainState& prev);

// Splits the final chain value back into the two dot products.
std::pair<int64_t, int64_t> restore(const ChainState& final_state);

std::vector<int> split_chain(int n_taps);

struct DotPair {
  int64_t a = 0;
  int64_t d = 0;
  bool operator==(const DotPair&) const = default;
};

DotPair packed_dot(std::span<const int8_t> a_row, std::span<const int8_t> d_row, std::span<const int8_t> b_row,
                   int64_t init);

// Same, for int32 storage of 8-bit codes (the simulator keeps codes as int32).
DotPair packed_dot(std::span<const int32_t> a_row, std::span<const int32_t> d_row, std::span<const int32_t> b_row,
                   int64_t init);

}  // namespace resflow::dsp
