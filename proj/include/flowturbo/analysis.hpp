#pragma once

/*
 * Verification instruments: analytic vector fields with closed-form flows,
 * empirical convergence-order estimation, trajectory curvature statistics,
 * the loss-weight identity check, and a sliced Wasserstein-2 distance.
 *
 * Everything here works in solver time s in [0, 1] (noise at 0, data at 1)
 * and is deterministic given the caller's Rng.
 */

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "flowturbo/errors.hpp"
#include "flowturbo/io.hpp"
#include "flowturbo/mat.hpp"
#include "flowturbo/net.hpp"
#include "flowturbo/rng.hpp"
#include "flowturbo/sampling.hpp"
#include "flowturbo/schedule.hpp"

namespace flowturbo {

// ---- analytic fields -------------------------------------------------------

// A velocity field dx/ds = v(x, s) whose exact flow map is known, used as
// ground truth for solver convergence tests.
class AnalyticField {
 public:
  enum class Kind { Constant, LinearDecay, AffineTimeVarying };

  // v(x, s) = c
  static AnalyticField constant(std::vector<double> c) {
    if (c.empty()) throw ValidationError("constant field needs at least one dimension");
    AnalyticField f;
    f.kind_ = Kind::Constant;
    f.c_ = std::move(c);
    return f;
  }

  // v(x, s) = -lambda * x, flow x0 * exp(-lambda s)
  static AnalyticField linear_decay(double lambda) {
    if (!std::isfinite(lambda)) throw ValidationError("decay rate must be finite");
    AnalyticField f;
    f.kind_ = Kind::LinearDecay;
    f.a_ = -lambda;
    return f;
  }

  // v(x, s) = a (x - p(s)) + p'(s) with p_d(s) = amp_d sin(omega_d s + phase_d);
  // flow x(s) = p(s) + exp(a s) (x0 - p(0)).
  static AnalyticField affine_time_varying(double a, std::vector<double> amp,
                                           std::vector<double> omega,
                                           std::vector<double> phase) {
    if (amp.empty() || amp.size() != omega.size() || amp.size() != phase.size())
      throw ValidationError("affine field needs matching nonempty amp/omega/phase");
    if (!std::isfinite(a)) throw ValidationError("affine field rate must be finite");
    AnalyticField f;
    f.kind_ = Kind::AffineTimeVarying;
    f.a_ = a;
    f.c_ = std::move(amp);
    f.omega_ = std::move(omega);
    f.phase_ = std::move(phase);
    return f;
  }

  Kind kind() const { return kind_; }

  // 0 means any dimension is accepted.
  int dim() const {
    if (kind_ == Kind::LinearDecay) return 0;
    return static_cast<int>(c_.size());
  }

  Mat velocity(const Mat& x, double s) const {
    check_dim(x);
    Mat out(x.rows, x.cols);
    switch (kind_) {
      case Kind::Constant:
        for (int r = 0; r < x.rows; ++r)
          for (int c = 0; c < x.cols; ++c) out(r, c) = c_[static_cast<std::size_t>(c)];
        break;
      case Kind::LinearDecay:
        for (std::size_t i = 0; i < x.size(); ++i) out.a[i] = a_ * x.a[i];
        break;
      case Kind::AffineTimeVarying:
        for (int r = 0; r < x.rows; ++r)
          for (int c = 0; c < x.cols; ++c) {
            const std::size_t d = static_cast<std::size_t>(c);
            const double arg = omega_[d] * s + phase_[d];
            const double p = c_[d] * std::sin(arg);
            const double dp = c_[d] * omega_[d] * std::cos(arg);
            out(r, c) = a_ * (x(r, c) - p) + dp;
          }
        break;
    }
    return out;
  }

  // Exact flow from state x0 at s = 0 to time s.
  Mat solution(const Mat& x0, double s) const {
    check_dim(x0);
    Mat out(x0.rows, x0.cols);
    switch (kind_) {
      case Kind::Constant:
        for (int r = 0; r < x0.rows; ++r)
          for (int c = 0; c < x0.cols; ++c)
            out(r, c) = x0(r, c) + s * c_[static_cast<std::size_t>(c)];
        break;
      case Kind::LinearDecay: {
        const double e = std::exp(a_ * s);
        for (std::size_t i = 0; i < x0.size(); ++i) out.a[i] = x0.a[i] * e;
        break;
      }
      case Kind::AffineTimeVarying: {
        const double e = std::exp(a_ * s);
        for (int r = 0; r < x0.rows; ++r)
          for (int c = 0; c < x0.cols; ++c) {
            const std::size_t d = static_cast<std::size_t>(c);
            const double p_s = c_[d] * std::sin(omega_[d] * s + phase_[d]);
            const double p_0 = c_[d] * std::sin(phase_[d]);
            out(r, c) = p_s + e * (x0(r, c) - p_0);
          }
        break;
      }
    }
    return out;
  }

 private:
  void check_dim(const Mat& x) const {
    const int d = dim();
    if (d != 0 && x.cols != d)
      throw ValidationError("field expects dimension " + std::to_string(d) + ", got " +
                            std::to_string(x.cols));
  }

  Kind kind_ = Kind::Constant;
  double a_ = 0.0;
  std::vector<double> c_, omega_, phase_;
};

// ---- empirical convergence order --------------------------------------------

enum class SolverTemplate { Euler, Heun, PseudoCorrector };

inline std::string solver_name(SolverTemplate s) {
  switch (s) {
    case SolverTemplate::Euler: return "euler";
    case SolverTemplate::Heun: return "heun";
    case SolverTemplate::PseudoCorrector: return "pseudo";
  }
  return "?";
}

inline SolverTemplate solver_from_name(std::string_view name) {
  if (name == "euler") return SolverTemplate::Euler;
  if (name == "heun") return SolverTemplate::Heun;
  if (name == "pseudo") return SolverTemplate::PseudoCorrector;
  throw ValidationError("unknown solver '" + std::string(name) + "', expected euler, heun or pseudo");
}

// Integrates the field over [0, 1] with n uniform steps of the template.
// PseudoCorrector means one Heun step to prime the cache, then correctors.
inline Mat integrate_field(const AnalyticField& field, SolverTemplate solver, int n,
                           const Mat& x0) {
  if (n < 1) throw ValidationError("step count must be at least 1");
  auto vel = [&](const Mat& x, double s) { return field.velocity(x, s); };
  Mat x = x0;
  VelocityCache cache;
  for (int i = 0; i < n; ++i) {
    const double s0 = static_cast<double>(i) / n;
    const double s1 = (i + 1 == n) ? 1.0 : static_cast<double>(i + 1) / n;
    switch (solver) {
      case SolverTemplate::Euler: euler_step(vel, x, s0, s1, cache); break;
      case SolverTemplate::Heun: heun_step(vel, x, s0, s1, cache); break;
      case SolverTemplate::PseudoCorrector:
        if (i == 0)
          heun_step(vel, x, s0, s1, cache);
        else
          pseudo_corrector_step(vel, x, s0, s1, cache);
        break;
    }
  }
  return x;
}

struct OrderPoint {
  int steps;
  double h;
  double error;
};

struct OrderReport {
  std::string solver;
  std::vector<OrderPoint> points;
  double slope = 0.0;
  double half_width = 0.0;  // 95% confidence half width on the slope
  bool exact = false;       // errors at rounding level; no slope to fit

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["solver"] = solver;
    j["exact"] = exact;
    if (exact) {
      j["slope"] = nullptr;
      j["half_width"] = nullptr;
    } else {
      j["slope"] = slope;
      j["half_width"] = half_width;
    }
    nlohmann::json pts = nlohmann::json::array();
    for (const OrderPoint& p : points) {
      nlohmann::json q;
      q["steps"] = p.steps;
      q["h"] = p.h;
      q["error"] = p.error;
      pts.push_back(q);
    }
    j["points"] = pts;
    return j;
  }

  std::string to_csv() const {
    CsvBuilder csv({"steps", "h", "error"});
    for (const OrderPoint& p : points) {
      csv.cell(static_cast<std::int64_t>(p.steps));
      csv.cell(p.h);
      csv.cell(p.error);
      csv.end_row();
    }
    return csv.str();
  }
};

namespace detail {

// Two-sided 97.5% Student-t quantiles; beyond the table the normal value is
// close enough for a diagnostic band.
inline double student_t975(int df) {
  static const double table[] = {12.706, 4.303, 3.182, 2.776, 2.571,
                                 2.447,  2.365, 2.306, 2.262, 2.228};
  if (df < 1) return std::numeric_limits<double>::infinity();
  if (df <= 10) return table[df - 1];
  return 2.0;
}

}  // namespace detail

// Tolerance below which an error is treated as exactly integrated (the
// scheme has no truncation error on this field) rather than fit for a slope.
inline constexpr double kExactErrorFloor = 1e-13;

inline OrderReport empirical_order(const AnalyticField& field, SolverTemplate solver,
                                   const std::vector<int>& steps, const Mat& x0) {
  if (steps.size() < 2) throw ValidationError("order fit needs at least two step counts");
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (steps[i] < 1) throw ValidationError("step counts must be positive");
    if (i > 0 && steps[i] <= steps[i - 1])
      throw ValidationError("step counts must increase strictly");
  }
  if (x0.rows == 0 || x0.cols == 0) throw ValidationError("order fit needs a nonempty state");

  OrderReport rep;
  rep.solver = solver_name(solver);
  const Mat exact1 = field.solution(x0, 1.0);
  for (int n : steps) {
    const Mat got = integrate_field(field, solver, n, x0);
    Mat diff(got.rows, got.cols);
    for (std::size_t i = 0; i < got.size(); ++i) diff.a[i] = got.a[i] - exact1.a[i];
    rep.points.push_back({n, 1.0 / n, std::sqrt(mean_squared(diff))});
  }

  std::vector<double> lx, ly;
  for (const OrderPoint& p : rep.points)
    if (p.error >= kExactErrorFloor) {
      lx.push_back(std::log(p.h));
      ly.push_back(std::log(p.error));
    }
  if (lx.size() < 2) {
    rep.exact = true;
    return rep;
  }
  const double n = static_cast<double>(lx.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  rep.slope = sxy / sxx;
  const double intercept = my - rep.slope * mx;
  double ssr = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    const double r = ly[i] - (intercept + rep.slope * lx[i]);
    ssr += r * r;
  }
  const int df = static_cast<int>(lx.size()) - 2;
  if (df >= 1) {
    const double se = std::sqrt(ssr / df / sxx);
    rep.half_width = detail::student_t975(df) * se;
  }
  return rep;
}

// ---- trajectory curvature ----------------------------------------------------

/*
 * Runs a plan and records, at each block's start knot, the velocity the
 * sampler actually integrates there. Curvature between consecutive block
 * starts is reported for two parameterizations of the same prediction:
 * the velocity itself, and its noise-space conversion
 * eps_hat_i = x_i + (1 - s_i) * v_flow_i (the raw net prediction, so
 * v_flow = -d in solver terms). A plan with a single block has no
 * consecutive pairs and yields an empty series.
 */
struct CurvatureSeries {
  std::vector<double> s;  // gap start knots, one per consecutive block pair
  std::vector<double> velocity_curv;
  std::vector<double> epsilon_curv;
  double velocity_mean = 0.0;
  double epsilon_mean = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["velocity_mean"] = velocity_mean;
    j["epsilon_mean"] = epsilon_mean;
    j["s"] = s;
    j["velocity_curvature"] = velocity_curv;
    j["epsilon_curvature"] = epsilon_curv;
    return j;
  }

  std::string to_csv() const {
    CsvBuilder csv({"s", "velocity_curvature", "epsilon_curvature"});
    for (std::size_t i = 0; i < s.size(); ++i) {
      csv.cell(s[i]);
      csv.cell(velocity_curv[i]);
      csv.cell(epsilon_curv[i]);
      csv.end_row();
    }
    return csv.str();
  }
};

inline CurvatureSeries curvature_comparison(const SamplePlan& plan, const DenseNet& net,
                                            const DenseNet* refiner, const Mat& noise,
                                            const GuidanceSpec& spec) {
  plan.validate(refiner != nullptr);
  NfeCounters nfe;
  GuidedModel gm(net, refiner, spec, nfe);
  auto vel = [&](const Mat& xx, double ss) { return gm.velocity(xx, ss); };

  std::vector<Mat> xs, ps;  // state and integrated velocity at block starts
  Mat x = noise;
  VelocityCache cache;
  for (std::size_t i = 0; i < plan.blocks.size(); ++i) {
    const double s0 = plan.knots[i], s1 = plan.knots[i + 1];
    xs.push_back(x);
    switch (plan.blocks[i]) {
      case BlockKind::Heun: {
        const double dt = s1 - s0;
        Mat d0 = vel(x, s0);
        Mat xt;
        add_scaled(x, d0, dt, xt);
        Mat d1 = vel(xt, s1);
        Mat next;
        add_scaled_sum(x, d0, d1, 0.5 * dt, next);
        x = std::move(next);
        cache.d = std::move(d1);
        cache.t_of_d = s1;
        cache.full = true;
        ps.push_back(std::move(d0));
        break;
      }
      case BlockKind::Pseudo: {
        ps.push_back(cache.d);
        pseudo_corrector_step(vel, x, s0, s1, cache);
        break;
      }
      case BlockKind::Euler: {
        euler_step(vel, x, s0, s1, cache);
        ps.push_back(cache.d);
        break;
      }
      case BlockKind::Refiner: {
        refiner_step(gm, x, s0, s1, cache);
        ps.push_back(cache.d);
        break;
      }
    }
  }

  CurvatureSeries out;
  const std::size_t n = plan.blocks.size();
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double si = plan.knots[i];
    const double sj = plan.knots[i + 1];
    const double ds = sj - si;

    double vc = 0.0, ec = 0.0;
    for (int r = 0; r < noise.rows; ++r) {
      double dv = 0.0, de = 0.0;
      for (int c = 0; c < noise.cols; ++c) {
        const double dvel = ps[i + 1](r, c) - ps[i](r, c);
        dv += dvel * dvel;
        // eps_hat = x + (1 - s) * v_flow with v_flow = -d
        const double ei = xs[i](r, c) - (1.0 - si) * ps[i](r, c);
        const double ej = xs[i + 1](r, c) - (1.0 - sj) * ps[i + 1](r, c);
        de += (ej - ei) * (ej - ei);
      }
      vc += std::sqrt(dv);
      ec += std::sqrt(de);
    }
    vc /= noise.rows;
    ec /= noise.rows;
    out.s.push_back(si);
    out.velocity_curv.push_back(vc / ds);
    out.epsilon_curv.push_back(ec / ds);
  }
  if (!out.s.empty()) {
    double vm = 0.0, em = 0.0;
    for (std::size_t i = 0; i < out.s.size(); ++i) {
      vm += out.velocity_curv[i];
      em += out.epsilon_curv[i];
    }
    out.velocity_mean = vm / static_cast<double>(out.s.size());
    out.epsilon_mean = em / static_cast<double>(out.s.size());
  }
  return out;
}

// ---- loss-weight identity ------------------------------------------------------

/*
 * For any prediction v_hat at (x_t, t), converting it to a noise prediction
 * via eps_hat = (v_hat - (alpha'/alpha) x_t) / zeta_t satisfies
 * zeta_t^2 |eps_hat - eps|^2 = |v_hat - u_t|^2 exactly. This measures how far
 * the implementation drifts from that algebra in floating point.
 */
struct IdentityReport {
  int tuples = 0;
  double sum_velocity_mse = 0.0;
  double sum_scaled_eps_mse = 0.0;
  double residual = 0.0;            // aggregate relative mismatch
  double max_tuple_residual = 0.0;  // worst single tuple

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["tuples"] = tuples;
    j["sum_velocity_mse"] = sum_velocity_mse;
    j["sum_scaled_eps_mse"] = sum_scaled_eps_mse;
    j["residual"] = residual;
    j["max_tuple_residual"] = max_tuple_residual;
    return j;
  }
};

inline IdentityReport loss_weight_identity(const DenseNet& net, const NoiseSchedule& sched,
                                           int tuples, double t_max, Rng& rng) {
  if (net.cfg.kind != NetKind::Velocity)
    throw ValidationError("loss identity needs a velocity net");
  if (tuples < 1) throw ValidationError("loss identity needs at least one tuple");
  if (!(t_max > 0.0 && t_max < 1.0))
    throw DomainError("loss identity t_max must lie in (0, 1); the weight diverges at t = 1");

  const int d = net.cfg.data_dim;
  IdentityReport rep;
  rep.tuples = tuples;
  Mat x0(1, d), eps(1, d);
  const std::vector<int> label = {0};
  for (int i = 0; i < tuples; ++i) {
    rng.fill_normal(x0);
    rng.fill_normal(eps);
    const double t = rng.uniform() * t_max;
    const double zeta = sched.zeta_weight(t);
    const double ratio = sched.dalpha(t) / sched.alpha(t);

    const Mat xt = sched.psi(x0, eps, t);
    const Mat v_hat = forward(net, xt, t, label);
    const Mat u = sched.target_velocity(x0, eps, t);

    double mse_v = 0.0, mse_e = 0.0;
    for (int c = 0; c < d; ++c) {
      const double dv = v_hat(0, c) - u(0, c);
      mse_v += dv * dv;
      const double eps_hat = (v_hat(0, c) - ratio * xt(0, c)) / zeta;
      const double de = eps_hat - eps(0, c);
      mse_e += de * de;
    }
    const double scaled = zeta * zeta * mse_e;
    rep.sum_velocity_mse += mse_v;
    rep.sum_scaled_eps_mse += scaled;
    const double tr = std::abs(scaled - mse_v) / std::max(1.0, mse_v);
    rep.max_tuple_residual = std::max(rep.max_tuple_residual, tr);
  }
  rep.residual = std::abs(rep.sum_scaled_eps_mse - rep.sum_velocity_mse) /
                 std::max(1.0, rep.sum_velocity_mse);
  return rep;
}

// ---- sliced Wasserstein-2 ------------------------------------------------------

struct DistanceReport {
  int projections = 0;
  double value = 0.0;  // mean over projections of the exact 1-D W2

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["projections"] = projections;
    j["value"] = value;
    return j;
  }
};

namespace detail {

// Exact W2 between two sorted 1-D empirical distributions with uniform
// weights, via the merged quantile partition. Quantile crossings are
// compared in integers, so unequal sizes are handled exactly.
inline double w2_sorted_1d(const std::vector<double>& xs, const std::vector<double>& ys) {
  const long long m = static_cast<long long>(xs.size());
  const long long n = static_cast<long long>(ys.size());
  double acc = 0.0;
  long long i = 0, j = 0;
  long long q_prev = 0;  // current quantile in units of 1/(m n)
  const double inv = 1.0 / (static_cast<double>(m) * static_cast<double>(n));
  while (i < m && j < n) {
    const long long qx = (i + 1) * n;
    const long long qy = (j + 1) * m;
    const long long q = qx < qy ? qx : qy;
    const double diff = xs[static_cast<std::size_t>(i)] - ys[static_cast<std::size_t>(j)];
    acc += static_cast<double>(q - q_prev) * inv * diff * diff;
    if (qx == q) ++i;
    if (qy == q) ++j;
    q_prev = q;
  }
  return std::sqrt(acc);
}

}  // namespace detail

inline DistanceReport sliced_wasserstein(const Mat& x, const Mat& y, int projections, Rng& rng) {
  if (x.cols != y.cols) throw ValidationError("sliced distance: dimension mismatch");
  if (x.rows == 0 || y.rows == 0) throw ValidationError("sliced distance: empty sample set");
  if (projections < 1) throw ValidationError("sliced distance needs at least one projection");

  const int d = x.cols;
  std::vector<double> dir(static_cast<std::size_t>(d));
  std::vector<double> px(static_cast<std::size_t>(x.rows));
  std::vector<double> py(static_cast<std::size_t>(y.rows));
  double total = 0.0;
  for (int k = 0; k < projections; ++k) {
    double norm = 0.0;
    do {
      for (double& v : dir) v = rng.normal();
      norm = l2_norm(dir);
    } while (norm < 1e-12);
    for (double& v : dir) v /= norm;

    for (int r = 0; r < x.rows; ++r) {
      double acc = 0.0;
      const auto row = x.row(r);
      for (int c = 0; c < d; ++c) acc += row[static_cast<std::size_t>(c)] * dir[static_cast<std::size_t>(c)];
      px[static_cast<std::size_t>(r)] = acc;
    }
    for (int r = 0; r < y.rows; ++r) {
      double acc = 0.0;
      const auto row = y.row(r);
      for (int c = 0; c < d; ++c) acc += row[static_cast<std::size_t>(c)] * dir[static_cast<std::size_t>(c)];
      py[static_cast<std::size_t>(r)] = acc;
    }
    std::sort(px.begin(), px.end());
    std::sort(py.begin(), py.end());
    total += detail::w2_sorted_1d(px, py);
  }

  DistanceReport rep;
  rep.projections = projections;
  rep.value = total / projections;
  return rep;
}

}  // namespace flowturbo
