#pragma once

/*
 * Small dense networks in double precision with hand-rolled backprop.
 *
 * Two kinds share one implementation. A velocity net maps
 * (x, t, label) -> velocity; a refiner net additionally takes the previous
 * velocity estimate and predicts a correction offset, so its input block is
 * twice as wide. Inputs are assembled as
 *
 *   [ x | v_prev (refiner only) | sinusoidal time features | label embedding ]
 *
 * and pushed through SiLU-activated linear layers; the final layer has no
 * activation. Label index num_classes is the reserved unconditional slot.
 *
 * Everything is single-threaded with fixed accumulation order, so forward
 * and backward are bit-reproducible. forward_into() runs against a caller
 * owned workspace and allocates nothing once the workspace is warm; the
 * batched sampler leans on that.
 */

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowturbo/errors.hpp"
#include "flowturbo/mat.hpp"
#include "flowturbo/rng.hpp"

namespace flowturbo {

enum class NetKind { Velocity, Refiner };

struct NetConfig {
  NetKind kind = NetKind::Velocity;
  int data_dim = 2;
  int time_dim = 16;  // even; sin/cos pairs at octave-spaced frequencies
  int num_classes = 2;
  int cond_dim = 8;
  std::vector<int> hidden = {96, 96};

  int input_dim() const {
    return data_dim * (kind == NetKind::Refiner ? 2 : 1) + time_dim + cond_dim;
  }

  void validate() const {
    if (data_dim <= 0) throw ValidationError("net: data_dim must be positive");
    if (time_dim <= 0 || time_dim % 2 != 0) throw ValidationError("net: time_dim must be positive and even");
    if (cond_dim <= 0) throw ValidationError("net: cond_dim must be positive");
    if (num_classes < 1) throw ValidationError("net: num_classes must be at least 1");
    if (hidden.empty()) throw ValidationError("net: at least one hidden layer required");
    for (int h : hidden)
      if (h <= 0) throw ValidationError("net: hidden widths must be positive");
  }
};

struct DenseLayer {
  Mat w;                  // out x in
  std::vector<double> b;  // out
};

inline double silu(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return x * s;
}

inline double dsilu(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

// out[2k] = sin(pi 2^k t), out[2k+1] = cos(pi 2^k t)
inline void time_features(double t, std::span<double> out) {
  for (std::size_t k = 0; 2 * k < out.size(); ++k) {
    const double w = std::numbers::pi * std::ldexp(1.0, static_cast<int>(k)) * t;
    out[2 * k] = std::sin(w);
    out[2 * k + 1] = std::cos(w);
  }
}

struct DenseNet {
  NetConfig cfg;
  Mat cond_table;  // (num_classes + 1) x cond_dim, last row is the null label
  std::vector<DenseLayer> layers;

  int null_label() const { return cfg.num_classes; }

  std::size_t param_count() const {
    std::size_t n = cond_table.size();
    for (const auto& l : layers) n += l.w.size() + l.b.size();
    return n;
  }

  // All-zero parameters; layer shapes only. Handy as a known-output net.
  static DenseNet zeros(const NetConfig& cfg) {
    cfg.validate();
    DenseNet net;
    net.cfg = cfg;
    net.cond_table = Mat(cfg.num_classes + 1, cfg.cond_dim);
    int in = cfg.input_dim();
    for (std::size_t l = 0; l <= cfg.hidden.size(); ++l) {
      const int out = l < cfg.hidden.size() ? cfg.hidden[l] : cfg.data_dim;
      net.layers.push_back({Mat(out, in), std::vector<double>(out, 0.0)});
      in = out;
    }
    return net;
  }

  // Fan-in scaled init. The final layer starts tiny for velocity nets and
  // exactly zero for refiners, so a fresh refiner is a no-op correction.
  static DenseNet create(const NetConfig& cfg, Rng& rng) {
    DenseNet net = zeros(cfg);
    for (double& v : net.cond_table.a) v = 0.1 * rng.normal();
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      auto& layer = net.layers[l];
      const bool last = l + 1 == net.layers.size();
      double std_dev = 1.0 / std::sqrt(static_cast<double>(layer.w.cols));
      if (last) std_dev *= cfg.kind == NetKind::Refiner ? 0.0 : 0.01;
      for (double& v : layer.w.a) v = std_dev * rng.normal();
    }
    return net;
  }
};

// Gradient (or any parameter-shaped value bag) matching a DenseNet.
struct NetGrads {
  Mat cond_table;
  std::vector<DenseLayer> layers;

  static NetGrads zeros_like(const DenseNet& net) {
    NetGrads g;
    g.cond_table = Mat(net.cond_table.rows, net.cond_table.cols);
    for (const auto& l : net.layers)
      g.layers.push_back({Mat(l.w.rows, l.w.cols), std::vector<double>(l.b.size(), 0.0)});
    return g;
  }
};

// Declaration-order parameter walk: cond table, then per layer W then b.
template <typename Net, typename F>
void visit_params(Net&& net, F&& f) {
  for (auto& v : net.cond_table.a) f(v);
  for (auto& l : net.layers) {
    for (auto& v : l.w.a) f(v);
    for (auto& v : l.b) f(v);
  }
}

template <typename F>
void visit_param_pairs(DenseNet& net, NetGrads& g, F&& f) {
  for (std::size_t i = 0; i < net.cond_table.size(); ++i) f(net.cond_table.a[i], g.cond_table.a[i]);
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    auto& nl = net.layers[l];
    auto& gl = g.layers[l];
    for (std::size_t i = 0; i < nl.w.size(); ++i) f(nl.w.a[i], gl.w.a[i]);
    for (std::size_t i = 0; i < nl.b.size(); ++i) f(nl.b[i], gl.b[i]);
  }
}

inline std::vector<double> get_params(const DenseNet& net) {
  std::vector<double> out;
  out.reserve(net.param_count());
  visit_params(net, [&](double v) { out.push_back(v); });
  return out;
}

inline void set_params(DenseNet& net, std::span<const double> p) {
  if (p.size() != net.param_count()) throw ValidationError("set_params: size mismatch");
  std::size_t i = 0;
  visit_params(net, [&](double& v) { v = p[i++]; });
}

inline std::vector<double> flatten(const NetGrads& g) {
  std::vector<double> out;
  for (double v : g.cond_table.a) out.push_back(v);
  for (const auto& l : g.layers) {
    for (double v : l.w.a) out.push_back(v);
    for (double v : l.b) out.push_back(v);
  }
  return out;
}

namespace detail {

inline int resolve_label(std::span<const int> labels, int row, int num_classes) {
  const int y = labels.size() == 1 ? labels[0] : labels[static_cast<std::size_t>(row)];
  if (y < 0 || y > num_classes)
    throw std::out_of_range("label " + std::to_string(y) + " outside [0, " +
                            std::to_string(num_classes) + "]");
  return y;
}

// [x | v_prev? | time | cond] for every row.
inline void assemble_input(const DenseNet& net, const Mat& x, const Mat* v_prev, double t,
                           std::span<const int> labels, Mat& in) {
  const auto& cfg = net.cfg;
  if (x.cols != cfg.data_dim)
    throw ValidationError("forward: input has " + std::to_string(x.cols) + " columns, net expects " +
                          std::to_string(cfg.data_dim));
  if (cfg.kind == NetKind::Refiner) {
    if (v_prev == nullptr) throw ValidationError("forward: refiner net needs a previous velocity");
    require_same_shape(x, *v_prev, "forward");
  } else if (v_prev != nullptr) {
    throw ValidationError("forward: velocity net takes no previous velocity");
  }
  if (labels.size() != 1 && static_cast<int>(labels.size()) != x.rows)
    throw ValidationError("forward: labels must broadcast (1) or match the batch");
  if (!std::isfinite(t)) throw DomainError("forward: time must be finite");

  in.resize(x.rows, cfg.input_dim());
  std::vector<double> tf(static_cast<std::size_t>(cfg.time_dim));
  time_features(t, tf);
  for (int r = 0; r < x.rows; ++r) {
    auto dst = in.row(r);
    std::size_t o = 0;
    for (double v : x.row(r)) dst[o++] = v;
    if (cfg.kind == NetKind::Refiner)
      for (double v : v_prev->row(r)) dst[o++] = v;
    for (double v : tf) dst[o++] = v;
    const int y = resolve_label(labels, r, cfg.num_classes);
    for (double v : net.cond_table.row(y)) dst[o++] = v;
  }
}

// out = in * W^T + b
inline void gemm_bias(const DenseLayer& layer, const Mat& in, Mat& out) {
  if (in.cols != layer.w.cols) throw ValidationError("layer input width mismatch");
  out.resize(in.rows, layer.w.rows);
  for (int r = 0; r < in.rows; ++r) {
    const auto src = in.row(r);
    auto dst = out.row(r);
    for (int o = 0; o < layer.w.rows; ++o) {
      const auto wr = layer.w.row(o);
      double acc = layer.b[static_cast<std::size_t>(o)];
      for (std::size_t j = 0; j < src.size(); ++j) acc += wr[j] * src[j];
      dst[o] = acc;
    }
  }
}

}  // namespace detail

// Scratch space for forward passes. Reused across calls; steady-state
// forward_into does no allocation for a fixed batch size.
struct ForwardWorkspace {
  Mat input;
  std::vector<Mat> h;
};

// Forward pass writing into `out`. v_prev must be given exactly for refiners.
inline void forward_into(const DenseNet& net, const Mat& x, const Mat* v_prev, double t,
                         std::span<const int> labels, ForwardWorkspace& ws, Mat& out) {
  detail::assemble_input(net, x, v_prev, t, labels, ws.input);
  const std::size_t nl = net.layers.size();
  if (ws.h.size() < nl - 1) ws.h.resize(nl - 1);
  const Mat* cur = &ws.input;
  for (std::size_t l = 0; l < nl; ++l) {
    Mat& dst = (l + 1 == nl) ? out : ws.h[l];
    detail::gemm_bias(net.layers[l], *cur, dst);
    if (l + 1 != nl)
      for (double& v : dst.a) v = silu(v);
    cur = &dst;
  }
}

inline Mat forward(const DenseNet& net, const Mat& x, double t, std::span<const int> labels) {
  ForwardWorkspace ws;
  Mat out;
  forward_into(net, x, nullptr, t, labels, ws, out);
  return out;
}

inline Mat forward(const DenseNet& net, const Mat& x, const Mat& v_prev, double t,
                   std::span<const int> labels) {
  ForwardWorkspace ws;
  Mat out;
  forward_into(net, x, &v_prev, t, labels, ws, out);
  return out;
}

// Everything backward() needs to replay a forward pass.
struct Tape {
  const DenseNet* net = nullptr;
  Mat input;               // assembled B x input_dim
  std::vector<Mat> pre;    // pre[l]: pre-activation of layer l
  std::vector<Mat> act;    // act[l], l >= 1: SiLU(pre[l-1]) fed into layer l
  std::vector<int> labels; // resolved per row
};

inline Mat forward_tape(const DenseNet& net, const Mat& x, const Mat* v_prev, double t,
                        std::span<const int> labels, Tape& tape) {
  tape.net = &net;
  detail::assemble_input(net, x, v_prev, t, labels, tape.input);
  tape.labels.resize(static_cast<std::size_t>(x.rows));
  for (int r = 0; r < x.rows; ++r)
    tape.labels[static_cast<std::size_t>(r)] = detail::resolve_label(labels, r, net.cfg.num_classes);

  const std::size_t nl = net.layers.size();
  tape.pre.resize(nl);
  tape.act.resize(nl);
  const Mat* cur = &tape.input;
  for (std::size_t l = 0; l < nl; ++l) {
    detail::gemm_bias(net.layers[l], *cur, tape.pre[l]);
    if (l + 1 != nl) {
      Mat& a = tape.act[l + 1];
      a.resize(tape.pre[l].rows, tape.pre[l].cols);
      for (std::size_t i = 0; i < a.size(); ++i) a.a[i] = silu(tape.pre[l].a[i]);
      cur = &a;
    }
  }
  return tape.pre[nl - 1];
}

// Accumulates parameter gradients for d(loss)/d(output) = dout.
// Gradients flow into the label embedding rows that were actually used.
inline NetGrads backward(const DenseNet& net, const Tape& tape, const Mat& dout) {
  if (tape.net != &net) throw ValidationError("backward: tape was recorded on a different net");
  const std::size_t nl = net.layers.size();
  if (nl == 0 || tape.pre.size() != nl) throw ValidationError("backward: tape is empty");
  require_same_shape(dout, tape.pre[nl - 1], "backward");

  NetGrads grads = NetGrads::zeros_like(net);
  Mat g = dout;
  Mat gprev;
  for (std::size_t l = nl; l-- > 0;) {
    const Mat& ain = l == 0 ? tape.input : tape.act[l];
    auto& gl = grads.layers[l];
    for (int r = 0; r < g.rows; ++r) {
      const auto grow = g.row(r);
      const auto arow = ain.row(r);
      for (int o = 0; o < g.cols; ++o) {
        const double go = grow[static_cast<std::size_t>(o)];
        gl.b[static_cast<std::size_t>(o)] += go;
        auto wrow = gl.w.row(o);
        for (std::size_t j = 0; j < arow.size(); ++j) wrow[j] += go * arow[j];
      }
    }
    const auto& w = net.layers[l].w;
    gprev.resize(g.rows, w.cols);
    for (int r = 0; r < g.rows; ++r) {
      const auto grow = g.row(r);
      auto prow = gprev.row(r);
      for (int j = 0; j < w.cols; ++j) {
        double acc = 0.0;
        for (int o = 0; o < w.rows; ++o) acc += grow[static_cast<std::size_t>(o)] * w(o, j);
        prow[static_cast<std::size_t>(j)] = acc;
      }
    }
    if (l > 0) {
      const Mat& z = tape.pre[l - 1];
      g.resize(gprev.rows, gprev.cols);
      for (std::size_t i = 0; i < g.size(); ++i) g.a[i] = gprev.a[i] * dsilu(z.a[i]);
    }
  }

  // gprev now holds the gradient w.r.t. the assembled input; the trailing
  // cond_dim slice belongs to the embedding row each sample selected.
  const int off = net.cfg.input_dim() - net.cfg.cond_dim;
  for (int r = 0; r < gprev.rows; ++r) {
    auto dst = grads.cond_table.row(tape.labels[static_cast<std::size_t>(r)]);
    const auto src = gprev.row(r);
    for (int j = 0; j < net.cfg.cond_dim; ++j)
      dst[static_cast<std::size_t>(j)] += src[static_cast<std::size_t>(off + j)];
  }
  return grads;
}

// Refiners must stay small next to the net they correct.
inline void check_refiner_budget(const DenseNet& base, const DenseNet& refiner,
                                 double max_ratio = 0.1) {
  const double ratio = static_cast<double>(refiner.param_count()) /
                       static_cast<double>(base.param_count());
  if (ratio > max_ratio)
    throw ValidationError("refiner has " + std::to_string(refiner.param_count()) +
                          " parameters, over " + std::to_string(max_ratio * 100.0) +
                          "% of the base net's " + std::to_string(base.param_count()));
}

}  // namespace flowturbo
