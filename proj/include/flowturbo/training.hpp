#pragma once

/*
 * Objectives and the optimizer.
 *
 * The velocity net regresses the interpolant derivative: draw data x0 and
 * noise eps, corrupt to psi_t, fit v(psi_t, t | y) to d/dt psi_t. Labels
 * drop to the null slot with probability cond_dropout so the same net also
 * learns the unconditional field.
 *
 * The refiner is trained against a frozen base net by simulating the
 * situation it sees at sampling time: take one Euler step of size dt along
 * the base net's own prediction, then regress the offset between the base
 * net's velocity at the arrival point and the velocity carried over.
 *
 * One optimizer step consumes RNG draws in a fixed documented order, so
 * seeded runs are bit-reproducible.
 */

#include <chrono>
#include <cmath>
#include <concepts>
#include <functional>
#include <span>
#include <vector>

#include "flowturbo/dataset.hpp"
#include "flowturbo/errors.hpp"
#include "flowturbo/net.hpp"
#include "flowturbo/rng.hpp"
#include "flowturbo/schedule.hpp"

namespace flowturbo {

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class AdamW {
 public:
  AdamW(const DenseNet& net, AdamWConfig cfg)
      : cfg_(cfg), m_(NetGrads::zeros_like(net)), v_(NetGrads::zeros_like(net)) {}

  void step(DenseNet& net, const NetGrads& g) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto update = [&](double& p, double grad, double& m, double& v) {
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * grad;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * grad * grad;
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      p -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p);
    };
    for (std::size_t i = 0; i < net.cond_table.size(); ++i)
      update(net.cond_table.a[i], g.cond_table.a[i], m_.cond_table.a[i], v_.cond_table.a[i]);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      auto& nl = net.layers[l];
      for (std::size_t i = 0; i < nl.w.size(); ++i)
        update(nl.w.a[i], g.layers[l].w.a[i], m_.layers[l].w.a[i], v_.layers[l].w.a[i]);
      for (std::size_t i = 0; i < nl.b.size(); ++i)
        update(nl.b[i], g.layers[l].b[i], m_.layers[l].b[i], v_.layers[l].b[i]);
    }
  }

 private:
  AdamWConfig cfg_;
  NetGrads m_, v_;
  long long t_ = 0;
};

inline double grad_norm(const NetGrads& g) {
  double s = 0.0;
  for (double v : g.cond_table.a) s += v * v;
  for (const auto& l : g.layers) {
    for (double v : l.w.a) s += v * v;
    for (double v : l.b) s += v * v;
  }
  return std::sqrt(s);
}

// Scales gradients so the global L2 norm is at most max_norm.
// Returns the pre-clip norm. max_norm <= 0 disables clipping.
inline double clip_global_norm(NetGrads& g, double max_norm) {
  const double norm = grad_norm(g);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (double& v : g.cond_table.a) v *= s;
    for (auto& l : g.layers) {
      for (double& v : l.w.a) v *= s;
      for (double& v : l.b) v *= s;
    }
  }
  return norm;
}

// Mean squared deviation of the net's velocity from the interpolant
// derivative, averaged over batch and dimension. Fills *grads if given.
inline double cfm_loss(const DenseNet& net, const NoiseSchedule& sched, const Mat& x0,
                       const Mat& eps, double t, std::span<const int> labels, NetGrads* grads) {
  if (net.cfg.kind != NetKind::Velocity) throw ValidationError("cfm_loss: needs a velocity net");
  const Mat xt = sched.psi(x0, eps, t);
  const Mat u = sched.target_velocity(x0, eps, t);

  Mat v;
  Tape tape;
  if (grads) {
    v = forward_tape(net, xt, nullptr, t, labels, tape);
  } else {
    v = forward(net, xt, t, labels);
  }
  const double inv = 1.0 / static_cast<double>(v.size());
  double loss = 0.0;
  Mat dout(v.rows, v.cols);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double d = v.a[i] - u.a[i];
    loss += d * d * inv;
    dout.a[i] = 2.0 * d * inv;
  }
  if (grads) *grads = backward(net, tape, dout);
  return loss;
}

struct TrainConfig {
  int steps = 6000;
  int batch_size = 64;
  double lr = 5e-4;
  double grad_clip = 1.0;     // global L2 norm; <= 0 disables
  double cond_dropout = 0.1;  // chance a label trains the null slot instead
  double dt_lo = 0.0;         // refiner step size range (dt_lo, dt_hi]
  double dt_hi = 0.12;
  int log_every = 50;

  void validate() const {
    if (steps < 1) throw ValidationError("train: steps must be positive");
    if (batch_size < 1) throw ValidationError("train: batch_size must be positive");
    if (!(lr > 0.0)) throw ValidationError("train: lr must be positive");
    if (cond_dropout < 0.0 || cond_dropout > 1.0)
      throw ValidationError("train: cond_dropout must lie in [0, 1]");
    if (!(dt_lo >= 0.0 && dt_hi > dt_lo && dt_hi <= 1.0))
      throw ValidationError("train: need 0 <= dt_lo < dt_hi <= 1");
  }
};

struct LossRecord {
  int step;
  double loss;
  double seconds;
};

struct TrainStats {
  long long labels_total = 0;
  long long labels_dropped = 0;
};

namespace detail {

inline double elapsed_seconds(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline void apply_dropout(std::vector<int>& y, int null_label, double p, Rng& rng,
                          TrainStats& stats) {
  for (int& l : y) {
    ++stats.labels_total;
    if (rng.bernoulli(p)) {
      l = null_label;
      ++stats.labels_dropped;
    }
  }
}

}  // namespace detail

// RNG order per step: batch draw, label dropout, noise, time.
inline TrainStats train_velocity(DenseNet& net, const NoiseSchedule& sched, const Dataset& data,
                                 const TrainConfig& cfg, Rng& rng,
                                 std::vector<LossRecord>* log = nullptr) {
  cfg.validate();
  if (net.cfg.kind != NetKind::Velocity) throw ValidationError("train_velocity: wrong net kind");
  if (net.cfg.num_classes != data.num_classes())
    throw ValidationError("train_velocity: net expects " + std::to_string(net.cfg.num_classes) +
                          " classes, dataset has " + std::to_string(data.num_classes()));
  if (net.cfg.data_dim != Dataset::dim())
    throw ValidationError("train_velocity: net dimensionality does not match the data");

  const auto start = std::chrono::steady_clock::now();
  AdamW opt(net, {.lr = cfg.lr});
  TrainStats stats;
  Mat x0, eps(cfg.batch_size, Dataset::dim());
  std::vector<int> y;
  NetGrads grads;
  for (int step = 0; step < cfg.steps; ++step) {
    data.sample(cfg.batch_size, rng, x0, y);
    detail::apply_dropout(y, net.null_label(), cfg.cond_dropout, rng, stats);
    rng.fill_normal(eps);
    const double t = rng.uniform();
    const double loss = cfm_loss(net, sched, x0, eps, t, y, &grads);
    if (!std::isfinite(loss)) throw TrainingDivergence(step, loss);
    clip_global_norm(grads, cfg.grad_clip);
    opt.step(net, grads);
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      log->push_back({step, loss, detail::elapsed_seconds(start)});
  }
  return stats;
}

// One simulated sampling situation for refiner training: the state x after
// an Euler step of size dt along the base velocity, the velocity v_prev that
// produced it, and the base net's fresh prediction at (x, t) as the target.
struct RefinerBatch {
  Mat x;
  Mat v_prev;
  double t = 0.0;
  std::vector<int> y;
  Mat target;
};

// RNG order: batch draw, label dropout, noise, dt, previous time.
template <typename BaseFn>
  requires std::invocable<BaseFn&, const Mat&, double, std::span<const int>>
RefinerBatch make_refiner_batch(BaseFn&& base, const NoiseSchedule& sched, const Dataset& data,
                                int batch_size, double cond_dropout, double dt_lo, double dt_hi,
                                Rng& rng, int null_label, TrainStats& stats) {
  RefinerBatch rb;
  Mat x0;
  data.sample(batch_size, rng, x0, rb.y);
  detail::apply_dropout(rb.y, null_label, cond_dropout, rng, stats);
  Mat eps(batch_size, Dataset::dim());
  rng.fill_normal(eps);
  const double dt = dt_hi - rng.uniform() * (dt_hi - dt_lo);  // (dt_lo, dt_hi]
  const double t_prev = rng.uniform(0.0, 1.0 - dt);
  const Mat x_prev = sched.psi(x0, eps, t_prev);
  rb.v_prev = base(x_prev, t_prev, std::span<const int>(rb.y));
  add_scaled(x_prev, rb.v_prev, dt, rb.x);
  rb.t = t_prev + dt;
  rb.target = base(rb.x, rb.t, std::span<const int>(rb.y));
  return rb;
}

// Trains the refiner's offset prediction against a frozen base velocity
// model; only refiner parameters move.
template <typename BaseFn>
  requires std::invocable<BaseFn&, const Mat&, double, std::span<const int>>
TrainStats train_refiner(DenseNet& refiner, BaseFn&& base, const NoiseSchedule& sched,
                         const Dataset& data, const TrainConfig& cfg, Rng& rng,
                         std::vector<LossRecord>* log = nullptr) {
  cfg.validate();
  if (refiner.cfg.kind != NetKind::Refiner) throw ValidationError("train_refiner: wrong net kind");
  if (refiner.cfg.num_classes != data.num_classes())
    throw ValidationError("train_refiner: class count mismatch with dataset");

  const auto start = std::chrono::steady_clock::now();
  AdamW opt(refiner, {.lr = cfg.lr});
  TrainStats stats;
  NetGrads grads;
  Tape tape;
  for (int step = 0; step < cfg.steps; ++step) {
    const RefinerBatch rb = make_refiner_batch(base, sched, data, cfg.batch_size,
                                               cfg.cond_dropout, cfg.dt_lo, cfg.dt_hi, rng,
                                               refiner.null_label(), stats);
    const Mat offset = forward_tape(refiner, rb.x, &rb.v_prev, rb.t, rb.y, tape);
    const double inv = 1.0 / static_cast<double>(offset.size());
    double loss = 0.0;
    Mat dout(offset.rows, offset.cols);
    for (std::size_t i = 0; i < offset.size(); ++i) {
      const double d = offset.a[i] + rb.v_prev.a[i] - rb.target.a[i];
      loss += d * d * inv;
      dout.a[i] = 2.0 * d * inv;
    }
    if (!std::isfinite(loss)) throw TrainingDivergence(step, loss);
    NetGrads g = backward(refiner, tape, dout);
    clip_global_norm(g, cfg.grad_clip);
    opt.step(refiner, g);
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      log->push_back({step, loss, detail::elapsed_seconds(start)});
  }
  return stats;
}

// Base-net adapter for the common case where the base is a DenseNet.
inline TrainStats train_refiner(DenseNet& refiner, const DenseNet& base,
                                const NoiseSchedule& sched, const Dataset& data,
                                const TrainConfig& cfg, Rng& rng,
                                std::vector<LossRecord>* log = nullptr) {
  if (base.cfg.kind != NetKind::Velocity)
    throw ValidationError("train_refiner: base must be a velocity net");
  if (base.cfg.data_dim != refiner.cfg.data_dim || base.cfg.num_classes != refiner.cfg.num_classes)
    throw ValidationError("train_refiner: base and refiner disagree on dimensions");
  check_refiner_budget(base, refiner);
  auto fn = [&base](const Mat& x, double t, std::span<const int> y) {
    return forward(base, x, t, y);
  };
  return train_refiner(refiner, fn, sched, data, cfg, rng, log);
}

}  // namespace flowturbo
