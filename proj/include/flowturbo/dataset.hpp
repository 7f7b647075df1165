#pragma once

/*
 * Seeded 2-D toy distributions with class labels. Each draw consumes a
 * fixed number of RNG values per sample (label, shape parameters, noise),
 * so streams are reproducible and independent of batch size splits.
 */

#include <cmath>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "flowturbo/errors.hpp"
#include "flowturbo/mat.hpp"
#include "flowturbo/rng.hpp"

namespace flowturbo {

enum class DatasetKind { TwoMoons, GaussianRing, Checkerboard, Spiral };

struct Dataset {
  DatasetKind kind = DatasetKind::TwoMoons;

  static Dataset from_name(std::string_view name) {
    if (name == "moons") return {DatasetKind::TwoMoons};
    if (name == "ring") return {DatasetKind::GaussianRing};
    if (name == "checkerboard") return {DatasetKind::Checkerboard};
    if (name == "spiral") return {DatasetKind::Spiral};
    throw ValidationError("unknown dataset '" + std::string(name) +
                          "', expected moons|ring|checkerboard|spiral");
  }

  std::string name() const {
    switch (kind) {
      case DatasetKind::TwoMoons: return "moons";
      case DatasetKind::GaussianRing: return "ring";
      case DatasetKind::Checkerboard: return "checkerboard";
      case DatasetKind::Spiral: return "spiral";
    }
    return "?";
  }

  int num_classes() const {
    return kind == DatasetKind::GaussianRing ? 8 : 2;
  }

  static constexpr int dim() { return 2; }

  void sample(int n, Rng& rng, Mat& x, std::vector<int>& y) const {
    using std::numbers::pi;
    x.resize(n, 2);
    y.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const int label = rng.uniform_int(num_classes());
      y[static_cast<std::size_t>(i)] = label;
      double px = 0.0, py = 0.0;
      switch (kind) {
        case DatasetKind::TwoMoons: {
          const double th = pi * rng.uniform();
          if (label == 0) {
            px = std::cos(th);
            py = std::sin(th);
          } else {
            px = 1.0 - std::cos(th);
            py = 0.5 - std::sin(th);
          }
          px += -0.5 + 0.08 * rng.normal();
          py += -0.125 + 0.08 * rng.normal();
          break;
        }
        case DatasetKind::GaussianRing: {
          const double th = 2.0 * pi * label / 8.0;
          px = 1.8 * std::cos(th) + 0.12 * rng.normal();
          py = 1.8 * std::sin(th) + 0.12 * rng.normal();
          break;
        }
        case DatasetKind::Checkerboard: {
          // 4x4 board over [-2,2]^2; label is the cell color, 8 cells each.
          // Row ci holds color cells at columns (label+ci)%2 and +2.
          const int pick = rng.uniform_int(8);
          const int ci = pick / 2;
          const int cj = (label + ci) % 2 + 2 * (pick % 2);
          px = -2.0 + (ci + rng.uniform());
          py = -2.0 + (cj + rng.uniform());
          break;
        }
        case DatasetKind::Spiral: {
          const double u = rng.uniform();
          const double r = 0.3 + 1.5 * u;
          const double th = 3.0 * pi * u + pi * label;
          px = 0.6 * r * std::cos(th) + 0.03 * rng.normal();
          py = 0.6 * r * std::sin(th) + 0.03 * rng.normal();
          break;
        }
      }
      x(i, 0) = px;
      x(i, 1) = py;
    }
  }
};

}  // namespace flowturbo
