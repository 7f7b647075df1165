#pragma once

/*
 * Row-major dense matrix of doubles. Batches of samples are Mats with one
 * row per sample; network weights use the same type. Deliberately minimal:
 * the solvers and nets only need element access, rows as spans, and a few
 * fused axpy-style helpers, all with fixed left-to-right accumulation order
 * so results are bit-reproducible.
 */

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "flowturbo/errors.hpp"

namespace flowturbo {

struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {
    if (r < 0 || c < 0) throw ValidationError("matrix dimensions must be non-negative");
  }

  double& operator()(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return a[static_cast<std::size_t>(i) * cols + j]; }

  std::span<double> row(int i) { return {a.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)}; }
  std::span<const double> row(int i) const {
    return {a.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
  }

  std::size_t size() const { return a.size(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

  void zero() { std::fill(a.begin(), a.end(), 0.0); }

  // Reshapes without preserving contents. Reuses storage when it already fits.
  void resize(int r, int c) {
    rows = r;
    cols = c;
    a.resize(static_cast<std::size_t>(r) * c);
  }
};

inline void require_same_shape(const Mat& x, const Mat& y, const char* what) {
  if (!x.same_shape(y))
    throw ValidationError(std::string(what) + ": shape mismatch (" + std::to_string(x.rows) + "x" +
                          std::to_string(x.cols) + " vs " + std::to_string(y.rows) + "x" +
                          std::to_string(y.cols) + ")");
}

// out = x + s * d
inline void add_scaled(const Mat& x, const Mat& d, double s, Mat& out) {
  require_same_shape(x, d, "add_scaled");
  out.resize(x.rows, x.cols);
  for (std::size_t i = 0; i < x.size(); ++i) out.a[i] = x.a[i] + s * d.a[i];
}

// out = x + s * (d0 + d1)
inline void add_scaled_sum(const Mat& x, const Mat& d0, const Mat& d1, double s, Mat& out) {
  require_same_shape(x, d0, "add_scaled_sum");
  require_same_shape(x, d1, "add_scaled_sum");
  out.resize(x.rows, x.cols);
  for (std::size_t i = 0; i < x.size(); ++i) out.a[i] = x.a[i] + s * (d0.a[i] + d1.a[i]);
}

inline double max_abs_diff(const Mat& x, const Mat& y) {
  require_same_shape(x, y, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x.a[i] - y.a[i]));
  return m;
}

inline double mean_squared(const Mat& x) {
  if (x.size() == 0) return 0.0;
  double s = 0.0;
  for (double v : x.a) s += v * v;
  return s / static_cast<double>(x.size());
}

inline bool all_finite(const Mat& x) {
  for (double v : x.a)
    if (!std::isfinite(v)) return false;
  return true;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace flowturbo
