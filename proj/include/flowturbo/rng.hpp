#pragma once

/*
 * Deterministic random source. std::mt19937_64 has a pinned algorithm, but
 * the standard distributions do not, so the uniform and normal transforms
 * are implemented here directly: 53-bit ldexp uniforms and Box-Muller
 * normals give identical streams on every platform and compiler.
 */

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>

#include "flowturbo/mat.hpp"

namespace flowturbo {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return std::ldexp(static_cast<double>(gen_() >> 11), -53); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform on {0, 1, ..., n-1} via rejection, bias-free.
  int uniform_int(int n) {
    if (n <= 0) throw DomainError("uniform_int: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t v = gen_();
    while (v >= limit) v = gen_();
    return static_cast<int>(v % un);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal, Box-Muller, one spare cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

  void fill_normal(Mat& m) {
    for (double& v : m.a) v = normal();
  }

  void fill_normal(std::span<double> s) {
    for (double& v : s) v = normal();
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace flowturbo
