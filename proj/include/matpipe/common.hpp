#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace matpipe {

using Vec = std::vector<double>;
using Mat = std::vector<std::vector<double>>;  // row-major

// Every operational failure carries the pipeline phase it came from, so the
// CLI can report "compile/schedule: insufficient stages" style diagnostics.
class Error : public std::runtime_error {
 public:
  Error(std::string phase, const std::string& msg)
      : std::runtime_error(phase + ": " + msg), phase_(std::move(phase)) {}
  const std::string& phase() const { return phase_; }

 private:
  std::string phase_;
};

inline Mat zeros(size_t rows, size_t cols) {
  return Mat(rows, Vec(cols, 0.0));
}

inline Vec matvec(const Mat& a, const Vec& x) {
  Vec y(a.size(), 0.0);
  for (size_t i = 0; i < a.size(); ++i) {
    double s = 0.0;
    for (size_t j = 0; j < x.size(); ++j) s += a[i][j] * x[j];
    y[i] = s;
  }
  return y;
}

inline bool approx_rel(double a, double b, double tol) {
  double d = std::abs(a - b);
  double m = std::max(std::abs(a), std::abs(b));
  return d <= tol * std::max(1.0, m);
}

// Shared RNG wrapper: all stochastic code paths take an explicit seed so
// artifacts are reproducible byte-for-byte.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }
  int64_t integer(int64_t lo, int64_t hi) {  // inclusive
    return std::uniform_int_distribution<int64_t>(lo, hi)(gen_);
  }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace matpipe
