#pragma once

/*
 * Plan-driven sampling.
 *
 * Two clocks meet here. Nets and schedules run on corruption time tau
 * (tau = 0 is data) while the sampler's public API runs on solver time
 * s = 1 - tau: trajectories start at s = 0 in noise and end at s = 1 in
 * data. The GuidedModel adapter flips the clock and the sign, so every
 * block below just integrates dx/ds = d(x, s) forward in s.
 *
 * A plan is a block sequence over a strictly increasing knot grid. Each
 * block advances one interval and leaves behind the velocity of its most
 * recent model evaluation; pseudo-corrector and refiner blocks consume
 * that cache instead of paying for a fresh evaluation at their start knot.
 * That is what makes mixed plans cheap: a Heun block costs 2 evaluations,
 * every other block kind costs 1 (refiner blocks bill the refiner net).
 *
 * This is the readable reference implementation; it allocates freely.
 * plan.hpp compiles the same semantics into a preallocated, fused form.
 */

#include <cmath>
#include <string>
#include <vector>

#include "flowturbo/errors.hpp"
#include "flowturbo/mat.hpp"
#include "flowturbo/net.hpp"
#include "flowturbo/schedule.hpp"

namespace flowturbo {

// Classifier-free guidance: blend of conditional and unconditional branches
// with weight zeta. zeta = 1 is pure conditional, zeta = 0 unconditional;
// anything else evaluates both branches.
struct GuidanceSpec {
  double zeta = 1.0;
  std::vector<int> labels = {0};  // size 1 (broadcast) or one per batch row
};

struct NfeCounters {
  long long base_evals = 0;        // per-branch velocity-net evaluations
  long long base_dispatches = 0;   // forward launches; a fused pass counts once
  long long refiner_evals = 0;
  long long refiner_dispatches = 0;
};

// Velocity left behind by the most recent model evaluation on the current
// trajectory, tagged with the solver time it was evaluated at.
struct VelocityCache {
  bool full = false;
  Mat d;
  double t_of_d = 0.0;
};

enum class BlockKind : char { Heun = 'H', Pseudo = 'P', Refiner = 'R', Euler = 'E' };

inline char block_code(BlockKind k) { return static_cast<char>(k); }

inline BlockKind block_from_code(char c, std::size_t byte_offset) {
  switch (c) {
    case 'H': return BlockKind::Heun;
    case 'P': return BlockKind::Pseudo;
    case 'R': return BlockKind::Refiner;
    case 'E': return BlockKind::Euler;
  }
  throw PlanParseError(std::string("unknown block kind '") + c + "'", byte_offset);
}

// Wraps the nets with guidance, the time flip, and evaluation counting.
class GuidedModel {
 public:
  GuidedModel(const DenseNet& net, const DenseNet* refiner, const GuidanceSpec& spec,
              NfeCounters& nfe)
      : net_(net), refiner_(refiner), spec_(spec), nfe_(nfe), null_label_{net.null_label()} {
    if (net.cfg.kind != NetKind::Velocity)
      throw ValidationError("sampling: base model must be a velocity net");
    if (!std::isfinite(spec.zeta)) throw DomainError("guidance weight must be finite");
    if (spec.labels.empty()) throw ValidationError("guidance labels must not be empty");
    if (refiner) {
      if (refiner->cfg.kind != NetKind::Refiner)
        throw ValidationError("sampling: refiner checkpoint is not a refiner net");
      if (refiner->cfg.data_dim != net.cfg.data_dim ||
          refiner->cfg.num_classes != net.cfg.num_classes)
        throw ValidationError("sampling: refiner and base net disagree on dimensions");
    }
  }

  bool has_refiner() const { return refiner_ != nullptr; }

  // Solver-time velocity field d(x, s).
  Mat velocity(const Mat& x, double s) {
    Mat out = guided(net_, x, nullptr, 1.0 - s, nfe_.base_evals, nfe_.base_dispatches);
    for (double& v : out.a) v = -v;
    return out;
  }

  // Correction offset for a carried velocity: d_refined = d_prev + offset.
  Mat refine_offset(const Mat& x, const Mat& d_prev, double s) {
    if (!refiner_) throw ValidationError("sampling: refiner block without a refiner net");
    Mat v_prev(d_prev.rows, d_prev.cols);
    for (std::size_t i = 0; i < d_prev.size(); ++i) v_prev.a[i] = -d_prev.a[i];
    Mat out =
        guided(*refiner_, x, &v_prev, 1.0 - s, nfe_.refiner_evals, nfe_.refiner_dispatches);
    for (double& v : out.a) v = -v;
    return out;
  }

  NfeCounters& nfe() { return nfe_; }

 private:
  Mat guided(const DenseNet& net, const Mat& x, const Mat* v_prev, double tau, long long& evals,
             long long& dispatches) {
    if (spec_.zeta == 1.0) {
      evals += 1;
      dispatches += 1;
      return v_prev ? forward(net, x, *v_prev, tau, spec_.labels)
                    : forward(net, x, tau, spec_.labels);
    }
    if (spec_.zeta == 0.0) {
      evals += 1;
      dispatches += 1;
      return v_prev ? forward(net, x, *v_prev, tau, null_label_)
                    : forward(net, x, tau, null_label_);
    }
    evals += 2;
    dispatches += 2;
    Mat cond = v_prev ? forward(net, x, *v_prev, tau, spec_.labels)
                      : forward(net, x, tau, spec_.labels);
    Mat out = v_prev ? forward(net, x, *v_prev, tau, null_label_)
                     : forward(net, x, tau, null_label_);
    const double z = spec_.zeta;
    for (std::size_t i = 0; i < out.size(); ++i) out.a[i] = (1.0 - z) * out.a[i] + z * cond.a[i];
    return out;
  }

  const DenseNet& net_;
  const DenseNet* refiner_;
  GuidanceSpec spec_;
  NfeCounters& nfe_;
  std::vector<int> null_label_;
};

namespace detail {

inline double interval(double s0, double s1) {
  const double dt = s1 - s0;
  if (!(dt > 0.0)) throw ValidationError("block interval must move forward in time");
  return dt;
}

}  // namespace detail

// One Heun (explicit trapezoid) interval. Two evaluations; caches the
// velocity at the predicted endpoint.
template <typename VelocityFn>
void heun_step(VelocityFn&& vel, Mat& x, double s0, double s1, VelocityCache& cache) {
  const double dt = detail::interval(s0, s1);
  const Mat d0 = vel(x, s0);
  Mat xt;
  add_scaled(x, d0, dt, xt);
  Mat d1 = vel(xt, s1);
  Mat next;
  add_scaled_sum(x, d0, d1, 0.5 * dt, next);
  x = std::move(next);
  cache.d = std::move(d1);
  cache.t_of_d = s1;
  cache.full = true;
}

// Heun's trapezoid with the start velocity taken from the cache instead of
// a fresh evaluation: one evaluation per interval, still second order.
template <typename VelocityFn>
void pseudo_corrector_step(VelocityFn&& vel, Mat& x, double s0, double s1, VelocityCache& cache) {
  if (!cache.full)
    throw ValidationError("pseudo-corrector block needs a cached velocity; start the plan with "
                          "a Heun or Euler block");
  const double dt = detail::interval(s0, s1);
  Mat xt;
  add_scaled(x, cache.d, dt, xt);
  Mat d1 = vel(xt, s1);
  Mat next;
  add_scaled_sum(x, cache.d, d1, 0.5 * dt, next);
  x = std::move(next);
  cache.d = std::move(d1);
  cache.t_of_d = s1;
}

template <typename VelocityFn>
void euler_step(VelocityFn&& vel, Mat& x, double s0, double s1, VelocityCache& cache) {
  const double dt = detail::interval(s0, s1);
  Mat d = vel(x, s0);
  Mat next;
  add_scaled(x, d, dt, next);
  x = std::move(next);
  cache.d = std::move(d);
  cache.t_of_d = s0;
  cache.full = true;
}

// Refiner interval: correct the carried velocity with the small net, take
// an Euler step along the corrected velocity, cache the corrected velocity.
inline void refiner_step(GuidedModel& gm, Mat& x, double s0, double s1, VelocityCache& cache) {
  if (!cache.full)
    throw ValidationError("refiner block needs a cached velocity; start the plan with a Heun "
                          "or Euler block");
  const double dt = detail::interval(s0, s1);
  const Mat off = gm.refine_offset(x, cache.d, s0);
  Mat d(cache.d.rows, cache.d.cols);
  for (std::size_t i = 0; i < d.size(); ++i) d.a[i] = cache.d.a[i] + off.a[i];
  Mat next;
  add_scaled(x, d, dt, next);
  x = std::move(next);
  cache.d = std::move(d);
  cache.t_of_d = s0;
}

// ---- single-block public wrappers -----------------------------------------

inline Mat heun_block(const DenseNet& net, const Mat& x, double s0, double s1,
                      const GuidanceSpec& spec, VelocityCache& cache, NfeCounters* nfe = nullptr) {
  NfeCounters local;
  GuidedModel gm(net, nullptr, spec, nfe ? *nfe : local);
  Mat out = x;
  heun_step([&](const Mat& xx, double ss) { return gm.velocity(xx, ss); }, out, s0, s1, cache);
  return out;
}

inline Mat pseudo_corrector_block(const DenseNet& net, const Mat& x, double s0, double s1,
                                  const GuidanceSpec& spec, VelocityCache& cache,
                                  NfeCounters* nfe = nullptr) {
  NfeCounters local;
  GuidedModel gm(net, nullptr, spec, nfe ? *nfe : local);
  Mat out = x;
  pseudo_corrector_step([&](const Mat& xx, double ss) { return gm.velocity(xx, ss); }, out, s0, s1,
                        cache);
  return out;
}

inline Mat euler_block(const DenseNet& net, const Mat& x, double s0, double s1,
                       const GuidanceSpec& spec, VelocityCache& cache, NfeCounters* nfe = nullptr) {
  NfeCounters local;
  GuidedModel gm(net, nullptr, spec, nfe ? *nfe : local);
  Mat out = x;
  euler_step([&](const Mat& xx, double ss) { return gm.velocity(xx, ss); }, out, s0, s1, cache);
  return out;
}

inline Mat refiner_block(const DenseNet& net, const DenseNet& refiner, const Mat& x, double s0,
                         double s1, const GuidanceSpec& spec, VelocityCache& cache,
                         NfeCounters* nfe = nullptr) {
  NfeCounters local;
  GuidedModel gm(net, &refiner, spec, nfe ? *nfe : local);
  Mat out = x;
  refiner_step(gm, out, s0, s1, cache);
  return out;
}

// ---- plans -----------------------------------------------------------------

struct SamplePlan {
  std::vector<BlockKind> blocks;
  std::vector<double> knots;  // blocks.size() + 1, strictly increasing in [0, 1]
  GuidanceSpec guidance;      // baked into the compiled form
  std::string source;         // original text when parsed

  static SamplePlan uniform(std::vector<BlockKind> blocks_in) {
    SamplePlan p;
    p.blocks = std::move(blocks_in);
    const int n = static_cast<int>(p.blocks.size());
    if (n == 0) throw ValidationError("plan has no blocks");
    p.knots.resize(static_cast<std::size_t>(n) + 1);
    for (int i = 0; i <= n; ++i)
      p.knots[static_cast<std::size_t>(i)] = static_cast<double>(i) / n;
    p.knots.back() = 1.0;
    return p;
  }

  int num_blocks() const { return static_cast<int>(blocks.size()); }

  std::string text() const {
    std::string out;
    for (BlockKind k : blocks) out.push_back(block_code(k));
    return out;
  }

  void validate(bool has_refiner) const {
    if (blocks.empty()) throw ValidationError("plan has no blocks");
    if (knots.size() != blocks.size() + 1)
      throw ValidationError("plan has " + std::to_string(blocks.size()) + " blocks but " +
                            std::to_string(knots.size()) + " knots");
    if (!(knots.front() >= 0.0) || !(knots.back() <= 1.0))
      throw ValidationError("plan knots must lie in [0, 1]");
    for (std::size_t i = 0; i + 1 < knots.size(); ++i)
      if (!(knots[i] < knots[i + 1]))
        throw ValidationError("plan knots must increase strictly, knot " + std::to_string(i + 1) +
                              " does not");
    if (blocks.front() != BlockKind::Heun && blocks.front() != BlockKind::Euler)
      throw ValidationError(std::string("block 0 ('") + block_code(blocks.front()) +
                            "') cannot open a plan: nothing has filled the velocity cache yet");
    if (!has_refiner)
      for (std::size_t i = 0; i < blocks.size(); ++i)
        if (blocks[i] == BlockKind::Refiner)
          throw ValidationError("block " + std::to_string(i) +
                                " is a refiner block but no refiner net was given");
  }

  bool covers_unit_interval() const {
    return !knots.empty() && knots.front() == 0.0 && knots.back() == 1.0;
  }
};

struct SampleResult {
  Mat x;
  NfeCounters nfe;
};

// Integrates the plan from noise at the first knot to the last knot.
inline SampleResult run_plan(const SamplePlan& plan, const DenseNet& net, const DenseNet* refiner,
                             const Mat& noise, const GuidanceSpec& spec) {
  plan.validate(refiner != nullptr);
  if (noise.cols != net.cfg.data_dim)
    throw ValidationError("run_plan: noise has " + std::to_string(noise.cols) +
                          " columns, net expects " + std::to_string(net.cfg.data_dim));
  SampleResult res;
  res.x = noise;
  GuidedModel gm(net, refiner, spec, res.nfe);
  auto vel = [&](const Mat& xx, double ss) { return gm.velocity(xx, ss); };
  VelocityCache cache;
  for (std::size_t i = 0; i < plan.blocks.size(); ++i) {
    const double s0 = plan.knots[i], s1 = plan.knots[i + 1];
    switch (plan.blocks[i]) {
      case BlockKind::Heun: heun_step(vel, res.x, s0, s1, cache); break;
      case BlockKind::Pseudo: pseudo_corrector_step(vel, res.x, s0, s1, cache); break;
      case BlockKind::Euler: euler_step(vel, res.x, s0, s1, cache); break;
      case BlockKind::Refiner: refiner_step(gm, res.x, s0, s1, cache); break;
    }
  }
  return res;
}

// Partial-noising edit: corrupt x_ref to noise level `strength` with the
// schedule's interpolant, then resume the tail of the plan from solver time
// 1 - strength. strength = 1 reproduces a full run from the given noise; as
// strength -> 0 the output approaches x_ref. If the resume point lands
// inside a block, that block is re-anchored; a resumed pseudo-corrector or
// refiner block is promoted to Heun because its cache no longer exists.
inline SampleResult sdedit(const SamplePlan& plan, const DenseNet& net, const DenseNet* refiner,
                           const NoiseSchedule& sched, const Mat& x_ref, double strength,
                           const GuidanceSpec& spec, const Mat& noise) {
  if (!(strength > 0.0 && strength <= 1.0))
    throw DomainError("edit strength must lie in (0, 1], got " + std::to_string(strength));
  plan.validate(refiner != nullptr);
  if (!plan.covers_unit_interval())
    throw ValidationError("sdedit needs a plan covering solver time [0, 1]");
  require_same_shape(x_ref, noise, "sdedit");

  const double s_resume = 1.0 - strength;
  const Mat x_start = sched.psi(x_ref, noise, strength);

  SamplePlan tail;
  tail.guidance = plan.guidance;
  constexpr double kSnap = 1e-12;
  for (std::size_t i = 0; i < plan.blocks.size(); ++i) {
    if (plan.knots[i + 1] <= s_resume + kSnap) continue;  // fully before the resume point
    if (tail.blocks.empty()) {
      const bool needs_cache =
          plan.blocks[i] == BlockKind::Pseudo || plan.blocks[i] == BlockKind::Refiner;
      tail.blocks.push_back(needs_cache ? BlockKind::Heun : plan.blocks[i]);
      tail.knots.push_back(std::max(plan.knots[i], s_resume));
    } else {
      tail.blocks.push_back(plan.blocks[i]);
    }
    tail.knots.push_back(plan.knots[i + 1]);
  }
  return run_plan(tail, net, refiner, x_start, spec);
}

// Masked generation: after every block the known coordinates are reset to
// the schedule-consistent corruption of x_known at the block's end time,
// using the run's own starting noise. After the final block that corruption
// is the identity, so masked coordinates finish exactly at x_known.
inline SampleResult inpaint(const SamplePlan& plan, const DenseNet& net, const DenseNet* refiner,
                            const NoiseSchedule& sched, const Mat& x_known,
                            const std::vector<int>& mask, const GuidanceSpec& spec,
                            const Mat& noise) {
  plan.validate(refiner != nullptr);
  if (!plan.covers_unit_interval())
    throw ValidationError("inpaint needs a plan covering solver time [0, 1]");
  require_same_shape(x_known, noise, "inpaint");
  if (static_cast<int>(mask.size()) != x_known.cols)
    throw ValidationError("inpaint: mask length must equal the data dimension");
  int kept = 0;
  for (int m : mask) {
    if (m != 0 && m != 1) throw ValidationError("inpaint: mask entries must be 0 or 1");
    kept += m;
  }
  if (kept == 0)
    throw DomainError("inpaint: all-zero mask constrains nothing; use run_plan instead");

  SampleResult res;
  res.x = noise;
  GuidedModel gm(net, refiner, spec, res.nfe);
  auto vel = [&](const Mat& xx, double ss) { return gm.velocity(xx, ss); };
  VelocityCache cache;
  for (std::size_t i = 0; i < plan.blocks.size(); ++i) {
    const double s0 = plan.knots[i], s1 = plan.knots[i + 1];
    switch (plan.blocks[i]) {
      case BlockKind::Heun: heun_step(vel, res.x, s0, s1, cache); break;
      case BlockKind::Pseudo: pseudo_corrector_step(vel, res.x, s0, s1, cache); break;
      case BlockKind::Euler: euler_step(vel, res.x, s0, s1, cache); break;
      case BlockKind::Refiner: refiner_step(gm, res.x, s0, s1, cache); break;
    }
    const Mat known_now = sched.psi(x_known, noise, 1.0 - s1);
    for (int r = 0; r < res.x.rows; ++r)
      for (int c = 0; c < res.x.cols; ++c)
        if (mask[static_cast<std::size_t>(c)] == 1) res.x(r, c) = known_now(r, c);
  }
  return res;
}

}  // namespace flowturbo
