#pragma once

/*
 * Noise schedules for the linear-path flow objective.
 *
 * Time here is "corruption time": t = 0 is clean data, t = 1 is pure noise.
 * A schedule is a pair of coefficient curves (alpha, sigma) with
 * alpha(0) = 1, sigma(0) = 0, alpha(1) = 0, sigma(1) = 1. The interpolant
 *
 *   psi_t(x0 | eps) = alpha(t) * x0 + sigma(t) * eps
 *
 * moves a data point toward noise, and the regression target for a velocity
 * network is its exact time derivative. Derivatives are supplied in closed
 * form; nothing here differentiates numerically.
 */

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <utility>

#include "flowturbo/errors.hpp"
#include "flowturbo/mat.hpp"

namespace flowturbo {

class NoiseSchedule {
 public:
  using Curve = std::function<double(double)>;

  // Straight-line interpolant, alpha = 1 - t, sigma = t. The workhorse: its
  // regression target eps - x0 does not depend on t at all.
  static NoiseSchedule linear() {
    NoiseSchedule s;
    s.name_ = "linear";
    s.alpha_ = [](double t) { return 1.0 - t; };
    s.sigma_ = [](double t) { return t; };
    s.dalpha_ = [](double) { return -1.0; };
    s.dsigma_ = [](double) { return 1.0; };
    s.check_boundaries();
    return s;
  }

  // Trigonometric variance-preserving schedule.
  static NoiseSchedule cosine() {
    using std::numbers::pi;
    return general_vp(
        "cosine", [](double t) { return std::cos(0.5 * pi * t); },
        [](double t) { return std::sin(0.5 * pi * t); },
        [](double t) { return -0.5 * pi * std::sin(0.5 * pi * t); },
        [](double t) { return 0.5 * pi * std::cos(0.5 * pi * t); });
  }

  // Arbitrary schedule from closed-form curves and their derivatives.
  // Boundary values are validated at construction.
  static NoiseSchedule general_vp(std::string name, Curve alpha, Curve sigma, Curve dalpha,
                                  Curve dsigma) {
    NoiseSchedule s;
    s.name_ = std::move(name);
    s.alpha_ = std::move(alpha);
    s.sigma_ = std::move(sigma);
    s.dalpha_ = std::move(dalpha);
    s.dsigma_ = std::move(dsigma);
    s.check_boundaries();
    return s;
  }

  const std::string& name() const { return name_; }

  double alpha(double t) const { return (check_time(t), alpha_(t)); }
  double sigma(double t) const { return (check_time(t), sigma_(t)); }
  double dalpha(double t) const { return (check_time(t), dalpha_(t)); }
  double dsigma(double t) const { return (check_time(t), dsigma_(t)); }

  // psi_t(x0 | eps), rows are independent samples.
  Mat psi(const Mat& x0, const Mat& eps, double t) const {
    check_time(t);
    require_same_shape(x0, eps, "psi");
    const double at = alpha_(t), st = sigma_(t);
    Mat out(x0.rows, x0.cols);
    for (std::size_t i = 0; i < x0.size(); ++i) out.a[i] = at * x0.a[i] + st * eps.a[i];
    return out;
  }

  // d/dt psi_t(x0 | eps), the conditional regression target.
  Mat target_velocity(const Mat& x0, const Mat& eps, double t) const {
    check_time(t);
    require_same_shape(x0, eps, "target_velocity");
    const double da = dalpha_(t), ds = dsigma_(t);
    Mat out(x0.rows, x0.cols);
    for (std::size_t i = 0; i < x0.size(); ++i) out.a[i] = da * x0.a[i] + ds * eps.a[i];
    return out;
  }

  // Conversion weight between velocity error and noise error:
  //   zeta(t) = dsigma(t) - dalpha(t) * sigma(t) / alpha(t).
  // Velocity and noise predictions relate through
  //   v = (dalpha/alpha) * x_t + zeta * eps_hat,
  // so |v - u|^2 = zeta^2 |eps_hat - eps|^2 pointwise. Blows up as alpha -> 0.
  double zeta_weight(double t) const {
    if (!(t >= 0.0 && t < 1.0))
      throw DomainError("zeta_weight: t must lie in [0, 1), got " + std::to_string(t));
    const double at = alpha_(t);
    if (at <= 0.0)
      throw DomainError("zeta_weight: data coefficient alpha(t) vanishes at t = " +
                        std::to_string(t));
    return dsigma_(t) - dalpha_(t) * sigma_(t) / at;
  }

 private:
  static void check_time(double t) {
    if (!(t >= 0.0 && t <= 1.0))
      throw DomainError("schedule time must lie in [0, 1], got " + std::to_string(t));
  }

  void check_boundaries() const {
    constexpr double kTol = 1e-9;
    if (std::abs(alpha_(0.0) - 1.0) > kTol || std::abs(sigma_(0.0)) > kTol ||
        std::abs(alpha_(1.0)) > kTol || std::abs(sigma_(1.0) - 1.0) > kTol)
      throw ValidationError("schedule '" + name_ +
                            "' violates boundary conditions alpha(0)=1, sigma(0)=0, "
                            "alpha(1)=0, sigma(1)=1");
  }

  std::string name_;
  Curve alpha_, sigma_, dalpha_, dsigma_;
};

}  // namespace flowturbo
