#pragma once

#include <bit>
#include <cstdint>
#include <vector>

#include "matpipe/common.hpp"

namespace matpipe {

// One TCAM rule: key bits where mask=1 must equal value, mask=0 bits are
// wildcards. Wildcarded bits are stored as 0 in value. Lower priority wins.
struct TernaryRule {
  uint64_t value = 0;
  uint64_t mask = 0;
  int priority = 0;
  int payload = 0;  // fuzzy index / payload row id

  bool matches(uint64_t key) const { return (key & mask) == value; }
};

// Minimal prefix cover of the inclusive integer range [lo, hi] on a w-bit
// unsigned key. Emits at most 2w-2 rules; the matched key set equals the
// range exactly. Greedy: repeatedly take the largest aligned power-of-two
// block that starts at the current position and fits in the remainder.
inline std::vector<TernaryRule> range_to_ternary(uint64_t lo, uint64_t hi, int width) {
  if (width < 1 || width > 32) throw Error("ternary", "key width out of range");
  uint64_t full = (uint64_t(1) << width) - 1;
  if (lo > hi || hi > full) throw Error("ternary", "invalid range");

  std::vector<TernaryRule> rules;
  uint64_t cur = lo;
  while (cur <= hi) {
    int align = (cur == 0) ? width : std::countr_zero(cur);
    uint64_t span = hi - cur + 1;
    int span_bits = std::bit_width(span) - 1;  // floor(log2(span))
    int bits = std::min({align, span_bits, width});
    uint64_t block = uint64_t(1) << bits;
    TernaryRule r;
    r.mask = full & ~(block - 1);
    r.value = cur & r.mask;
    r.priority = int(rules.size());
    rules.push_back(r);
    cur += block;
    if (cur == 0) break;  // wrapped past a full-width block
  }
  return rules;
}

// Test helper semantics: the exact key set covered by a rule list.
inline bool ternary_covers(const std::vector<TernaryRule>& rules, uint64_t key) {
  for (const auto& r : rules)
    if (r.matches(key)) return true;
  return false;
}

}  // namespace matpipe
