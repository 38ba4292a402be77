#include "resflow/dsp_pack.hpp"

#include "resflow/errors.hpp"

namespace resflow::dsp {

int64_t sign_extend(int64_t v, int bits) {
  const uint64_t mask = (uint64_t{1} << bits) - 1;
  const uint64_t sign = uint64_t{1} << (bits - 1);
  const uint64_t u = static_cast<uint64_t>(v) & mask;
  return static_cast<int64_t>((u ^ sign) - sign);
}

bool fits_signed(int64_t v, int bits) {
  const int64_t lim = int64_t{1} << (bits - 1);
  return v >= -lim && v < lim;
}

namespace {

void check_code(int v, const char* what) {
  if (v < -128 || v > 127) throw Error(std::string("packed operand ") + what + " is not an 8-bit code");
}

}  // namespace

int64_t pack_activations(int a, int d) {
  check_code(a, "A");
  check_code(d, "D");
  // Pre-adder: A shifted into the high field, D sign-extended into the low
  // one. A negative D borrows from the A field; restore undoes that.
  const int64_t w = (int64_t{a} << kLowField) + sign_extend(d, kLowField);
  return sign_extend(w, kWordA);
}

PackedOperand make_operand(int a, int d, int b) {
  check_code(b, "B");
  return {pack_activations(a, d), sign_extend(b, kWordB)};
}

ChainState packed_mac(const PackedOperand& op, const ChainState& prev) {
  if (prev.taps_done >= kMaxChain) throw Error("packed chain longer than " + std::to_string(kMaxChain) + " taps");
  if (!fits_signed(op.word27, kWordA) || !fits_signed(op.word18, kWordB)) {
    throw Error("packed operand exceeds multiplier port width");
  }
  const int64_t m = op.word27 * op.word18;
  ChainState next{prev.p + m, prev.taps_done + 1};
  if (!fits_signed(next.p, kAccBits)) throw Error("packed accumulation exceeds 48 bits");
  return next;
}

std::pair<int64_t, int64_t> restore(const ChainState& s) {
  // Low field holds sum(d*b) exactly as long as |sum| < 2^17, which the
  // 7-tap limit guarantees (7 * 2^14 < 2^17). Its sign leaked a borrow into
  // the high field; subtracting it back makes the high part exact.
  const int64_t acc_d = sign_extend(s.p, kLowField);
  const int64_t acc_a = (s.p - acc_d) >> kLowField;
  return {acc_a, acc_d};
}

std::vector<int> split_chain(int n_taps) {
  if (n_taps < 0) throw Error("negative tap count");
  if (n_taps == 0) return {};
  const int parts = (n_taps + kMaxChain - 1) / kMaxChain;
  std::vector<int> out(parts, n_taps / parts);
  for (int i = 0; i < n_taps % parts; ++i) ++out[i];
  return out;
}

namespace {

template <typename T>
DotPair packed_dot_impl(std::span<const T> a, std::span<const T> d, std::span<const T> b, int64_t init) {
  if (a.size() != d.size() || a.size() != b.size()) throw Error("packed_dot row length mismatch");
  DotPair out{init, init};
  size_t pos = 0;
  for (int len : split_chain(static_cast<int>(a.size()))) {
    ChainState st;
    for (int t = 0; t < len; ++t, ++pos) {
      st = packed_mac(make_operand(static_cast<int>(a[pos]), static_cast<int>(d[pos]), static_cast<int>(b[pos])), st);
    }
    auto [ra, rd] = restore(st);
    out.a += ra;
    out.d += rd;
  }
  return out;
}

}  // namespace

DotPair packed_dot(std::span<const int8_t> a, std::span<const int8_t> d, std::span<const int8_t> b, int64_t init) {
  return packed_dot_impl(a, d, b, init);
}

DotPair packed_dot(std::span<const int32_t> a, std::span<const int32_t> d, std::span<const int32_t> b,
                   int64_t init) {
  return packed_dot_impl(a, d, b, init);
}

}  // namespace resflow::dsp
