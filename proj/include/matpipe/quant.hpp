#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "matpipe/common.hpp"

namespace matpipe {

// Two's-complement fixed point: raw integers of `width` bits with `frac`
// fractional bits. value = raw / 2^frac. Arithmetic saturates at the raw
// bounds instead of wrapping.
struct QuantSpec {
  int width = 16;
  int frac = 0;

  int64_t raw_min() const { return -(int64_t(1) << (width - 1)); }
  int64_t raw_max() const { return (int64_t(1) << (width - 1)) - 1; }
  double step() const { return std::ldexp(1.0, -frac); }
  double lo() const { return std::ldexp(double(raw_min()), -frac); }
  double hi() const { return std::ldexp(double(raw_max()), -frac); }
  bool operator==(const QuantSpec& o) const {
    return width == o.width && frac == o.frac;
  }
};

// Picks the largest fractional precision whose integer part still covers the
// range with a sign bit: f = w-1-ceil(log2(max(|lo|,|hi|,2^-(w-1)) + eps)).
inline QuantSpec choose_fixed_point(double lo, double hi, int width = 16) {
  if (!(hi >= lo) || !std::isfinite(lo) || !std::isfinite(hi))
    throw Error("quant", "range must be finite with max >= min");
  double m = std::max({std::fabs(lo), std::fabs(hi), std::ldexp(1.0, -(width - 1))});
  int int_bits = int(std::ceil(std::log2(m + 1e-12)));
  int f = width - 1 - int_bits;
  f = std::clamp(f, 0, width - 1);
  return QuantSpec{width, f};
}

// Round-to-nearest-even of x * 2^f, saturated to the raw bounds.
inline int64_t quantize(double x, const QuantSpec& q) {
  if (std::isnan(x)) return 0;
  double scaled = x * std::ldexp(1.0, q.frac);
  if (scaled >= double(q.raw_max())) return q.raw_max();
  if (scaled <= double(q.raw_min())) return q.raw_min();
  double r = std::nearbyint(scaled);  // FE_TONEAREST: ties to even
  return std::clamp(int64_t(r), q.raw_min(), q.raw_max());
}

inline double dequantize(int64_t raw, const QuantSpec& q) {
  return std::ldexp(double(raw), -q.frac);
}

inline int64_t saturate(int64_t raw, const QuantSpec& q) {
  return std::clamp(raw, q.raw_min(), q.raw_max());
}

inline int64_t saturating_add(int64_t a, int64_t b, const QuantSpec& q) {
  return saturate(a + b, q);
}

// Re-express a raw value from one fractional position into another. Shifts
// are the only scaling the dataplane supports, so this is what SumReduce
// alignment compiles down to. C++20 guarantees arithmetic right shift.
inline int64_t shift_align(int64_t raw, int from_frac, int to_frac) {
  int d = to_frac - from_frac;
  if (d == 0) return raw;
  if (d > 0) return raw << d;
  return raw >> (-d);
}

}  // namespace matpipe
