#include <catch2/catch_amalgamated.hpp>

#include "matpipe/quant.hpp"
#include "matpipe/ternary.hpp"

using namespace matpipe;

TEST_CASE("fixed point position from range") {
  CHECK(choose_fixed_point(-100, 100, 16).frac == 8);
  CHECK(choose_fixed_point(0, 5, 16).frac == 12);
  CHECK(choose_fixed_point(0, 0, 16).frac == 15);
  // powers of two still covered thanks to the epsilon
  auto q = choose_fixed_point(-128, 128, 16);
  CHECK(dequantize(quantize(128.0, q), q) == Catch::Approx(128.0).margin(q.step()));
}

TEST_CASE("quantize round-to-nearest-even and saturation") {
  QuantSpec q{16, 8};
  CHECK(quantize(0.4, q) == 102);
  CHECK(dequantize(102, q) == Catch::Approx(0.3984375));
  CHECK(quantize(0.0, q) == 0);
  CHECK(quantize(1e9, q) == 32767);
  CHECK(quantize(-1e9, q) == -32768);
  CHECK(quantize(q.hi(), q) == q.raw_max());
  CHECK(quantize(q.lo(), q) == q.raw_min());
  // ties to even
  QuantSpec q0{16, 0};
  CHECK(quantize(2.5, q0) == 2);
  CHECK(quantize(3.5, q0) == 4);
}

TEST_CASE("quantization roundtrip error bound") {
  Rng rng(7);
  for (int f : {0, 4, 8, 12}) {
    QuantSpec q{16, f};
    double half = q.step() / 2.0;
    for (int i = 0; i < 2000; ++i) {
      double x = rng.uniform(q.lo(), q.hi());
      double err = std::abs(dequantize(quantize(x, q), q) - x);
      CHECK(err <= half + 1e-15);
    }
  }
}

TEST_CASE("shift alignment is exact scaling") {
  CHECK(shift_align(100, 8, 10) == 400);
  CHECK(shift_align(400, 10, 8) == 100);
  CHECK(shift_align(-401, 10, 8) == -101);  // arithmetic shift floors
  CHECK(shift_align(55, 6, 6) == 55);
}

TEST_CASE("range to ternary pinned cases") {
  auto r1 = range_to_ternary(3, 5, 4);
  REQUIRE(r1.size() == 2);
  CHECK(r1[0].value == 0b0011);
  CHECK(r1[0].mask == 0b1111);
  CHECK(r1[1].value == 0b0100);
  CHECK(r1[1].mask == 0b1110);

  auto r2 = range_to_ternary(0, 15, 4);
  REQUIRE(r2.size() == 1);
  CHECK(r2[0].mask == 0);

  auto r3 = range_to_ternary(1, 14, 4);
  CHECK(r3.size() == 6);

  CHECK_THROWS_AS(range_to_ternary(5, 3, 4), Error);
  CHECK_THROWS_AS(range_to_ternary(0, 16, 4), Error);
}

TEST_CASE("range to ternary equals enumeration at small widths") {
  for (int w = 1; w <= 6; ++w) {
    uint64_t top = (uint64_t(1) << w) - 1;
    for (uint64_t lo = 0; lo <= top; ++lo)
      for (uint64_t hi = lo; hi <= top; ++hi) {
        auto rules = range_to_ternary(lo, hi, w);
        REQUIRE(int(rules.size()) <= std::max(1, 2 * w - 2));
        for (const auto& r : rules) CHECK((r.value & ~r.mask) == 0);
        for (uint64_t k = 0; k <= top; ++k) {
          int hits = 0;
          for (const auto& r : rules) hits += r.matches(k) ? 1 : 0;
          bool inside = k >= lo && k <= hi;
          CHECK(hits == (inside ? 1 : 0));  // disjoint and exact
        }
      }
  }
}
