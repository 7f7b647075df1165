#pragma once

/*
 * Plan text, and a compiled executor for plans.
 *
 * Plan text comes in two spellings that share one grammar: counted blocks
 * ("H8", "H2P4R2") and comma-separated singles ("H,H,P"). Both expand to a
 * block sequence on a uniform knot grid over [0, 1].
 *
 * compile() lowers a SamplePlan to a flat instruction list with every
 * interval width precomputed, and bakes in the guidance decision: when the
 * guidance weight actually mixes two branches, the executor stacks the
 * conditional and unconditional batches into one forward pass of twice the
 * rows. Results match the interpreted sampler bitwise; only the dispatch
 * count and the speed differ. All buffers live in the CompiledPlan and are
 * reused across run() calls, so steady-state execution does not allocate,
 * and forward passes run in row tiles so a tile's activations stay
 * cache-resident through the whole layer chain. Per-row arithmetic is
 * unchanged by both, which is what keeps the results bitwise equal.
 */

#include <algorithm>
#include <cctype>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "flowturbo/errors.hpp"
#include "flowturbo/mat.hpp"
#include "flowturbo/net.hpp"
#include "flowturbo/sampling.hpp"

namespace flowturbo {

inline SamplePlan parse_plan(std::string_view text) {
  std::vector<BlockKind> blocks;
  std::size_t i = 0;
  while (i < text.size()) {
    const char ch = text[i];
    if (ch == ',' || ch == ' ' || ch == '\t' || ch == '\r' || ch == '\n') {
      ++i;
      continue;
    }
    const BlockKind kind = block_from_code(ch, i);
    ++i;
    long count = 1;
    if (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) {
      const std::size_t digits_at = i;
      count = 0;
      while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) {
        count = count * 10 + (text[i] - '0');
        if (count > 100000) throw PlanParseError("block count too large", digits_at);
        ++i;
      }
      if (count == 0) throw PlanParseError("block count must be positive", digits_at);
    }
    blocks.insert(blocks.end(), static_cast<std::size_t>(count), kind);
  }
  if (blocks.empty()) throw PlanParseError("plan is empty", 0);
  SamplePlan plan = SamplePlan::uniform(std::move(blocks));
  plan.source = std::string(text);
  return plan;
}

struct PlanInstr {
  BlockKind kind;
  double s0, s1, dt, half_dt;
};

struct CompiledRunResult {
  Mat x;
  NfeCounters nfe;
};

class CompiledPlan {
 public:
  const std::vector<PlanInstr>& instructions() const { return instrs_; }
  const GuidanceSpec& guidance() const { return guidance_; }
  bool fused() const { return fused_; }
  const std::string& source() const { return source_; }

  nlohmann::json dump() const {
    nlohmann::json j;
    j["source"] = source_;
    j["fused"] = fused_;
    j["zeta"] = guidance_.zeta;
    nlohmann::json blocks = nlohmann::json::array();
    for (const PlanInstr& in : instrs_) {
      nlohmann::json b;
      b["kind"] = std::string(1, block_code(in.kind));
      b["s0"] = in.s0;
      b["s1"] = in.s1;
      blocks.push_back(b);
    }
    j["blocks"] = blocks;
    return j;
  }

  // Executes the lowered plan. Reuses internal buffers between calls; a
  // CompiledPlan is therefore cheap to run repeatedly but not thread-safe.
  CompiledRunResult run(const DenseNet& net, const DenseNet* refiner, const Mat& noise) {
    if (net.cfg.kind != NetKind::Velocity)
      throw ValidationError("compiled plan: base model must be a velocity net");
    if (needs_refiner_ && !refiner)
      throw ValidationError("compiled plan contains a refiner block but no refiner net was given");
    if (refiner) {
      if (refiner->cfg.kind != NetKind::Refiner)
        throw ValidationError("compiled plan: refiner checkpoint is not a refiner net");
      if (refiner->cfg.data_dim != net.cfg.data_dim ||
          refiner->cfg.num_classes != net.cfg.num_classes)
        throw ValidationError("compiled plan: refiner and base net disagree on dimensions");
    }
    if (noise.cols != net.cfg.data_dim)
      throw ValidationError("compiled plan: noise has " + std::to_string(noise.cols) +
                            " columns, net expects " + std::to_string(net.cfg.data_dim));
    null_label_ = net.null_label();

    CompiledRunResult res;
    res.x = noise;
    Mat& x = res.x;
    cache_full_ = false;
    for (const PlanInstr& in : instrs_) {
      switch (in.kind) {
        case BlockKind::Heun:
          eval_velocity(net, x, in.s0, d0_, res.nfe);
          add_scaled(x, d0_, in.dt, xt_);
          eval_velocity(net, xt_, in.s1, d1_, res.nfe);
          add_scaled_sum(x, d0_, d1_, in.half_dt, next_);
          x.a.swap(next_.a);
          cache_d_.a.swap(d1_.a);
          cache_d_.rows = x.rows;
          cache_d_.cols = x.cols;
          cache_full_ = true;
          break;
        case BlockKind::Pseudo:
          if (!cache_full_)
            throw ValidationError("pseudo-corrector block needs a cached velocity; start the "
                                  "plan with a Heun or Euler block");
          add_scaled(x, cache_d_, in.dt, xt_);
          eval_velocity(net, xt_, in.s1, d1_, res.nfe);
          add_scaled_sum(x, cache_d_, d1_, in.half_dt, next_);
          x.a.swap(next_.a);
          cache_d_.a.swap(d1_.a);
          break;
        case BlockKind::Euler:
          eval_velocity(net, x, in.s0, d0_, res.nfe);
          add_scaled(x, d0_, in.dt, next_);
          x.a.swap(next_.a);
          cache_d_.a.swap(d0_.a);
          cache_d_.rows = x.rows;
          cache_d_.cols = x.cols;
          cache_full_ = true;
          break;
        case BlockKind::Refiner:
          if (!cache_full_)
            throw ValidationError("refiner block needs a cached velocity; start the plan with "
                                  "a Heun or Euler block");
          eval_offset(*refiner, x, cache_d_, in.s0, d1_, res.nfe);
          d0_.resize(x.rows, x.cols);
          for (std::size_t k = 0; k < d0_.size(); ++k) d0_.a[k] = cache_d_.a[k] + d1_.a[k];
          add_scaled(x, d0_, in.dt, next_);
          x.a.swap(next_.a);
          cache_d_.a.swap(d0_.a);
          break;
      }
    }
    return res;
  }

 private:
  friend CompiledPlan compile(const SamplePlan& plan);

  // One row range of detail::gemm_bias. Outputs are computed four at a time
  // so their accumulator chains overlap; each output still sums its products
  // in the same j order as detail::gemm_bias, so every value is bitwise
  // identical to the interpreted path.
  static void gemm_bias_rows(const DenseLayer& layer, const Mat& in, int in_r0, int n, Mat& out,
                             int out_r0) {
    const int outs = layer.w.rows;
    for (int i = 0; i < n; ++i) {
      const auto src = in.row(in_r0 + i);
      auto dst = out.row(out_r0 + i);
      int o = 0;
      for (; o + 4 <= outs; o += 4) {
        const auto w0 = layer.w.row(o);
        const auto w1 = layer.w.row(o + 1);
        const auto w2 = layer.w.row(o + 2);
        const auto w3 = layer.w.row(o + 3);
        double a0 = layer.b[static_cast<std::size_t>(o)];
        double a1 = layer.b[static_cast<std::size_t>(o) + 1];
        double a2 = layer.b[static_cast<std::size_t>(o) + 2];
        double a3 = layer.b[static_cast<std::size_t>(o) + 3];
        for (std::size_t j = 0; j < src.size(); ++j) {
          const double v = src[j];
          a0 += w0[j] * v;
          a1 += w1[j] * v;
          a2 += w2[j] * v;
          a3 += w3[j] * v;
        }
        dst[o] = a0;
        dst[o + 1] = a1;
        dst[o + 2] = a2;
        dst[o + 3] = a3;
      }
      for (; o < outs; ++o) {
        const auto wr = layer.w.row(o);
        double acc = layer.b[static_cast<std::size_t>(o)];
        for (std::size_t j = 0; j < src.size(); ++j) acc += wr[j] * src[j];
        dst[o] = acc;
      }
    }
  }

  // forward_into with the layer loop inside a row-tile loop: each tile is
  // assembled straight from its source row and pushed through the whole
  // layer chain while its activations are hot, instead of streaming the
  // full batch through memory once per layer. A fused dispatch reads x
  // twice (rows b.. mirror rows 0.. with the null label) rather than
  // materialising a stacked copy. Per-row arithmetic matches forward_into,
  // so rows come out bitwise identical.
  void net_tiles(const DenseNet& net, const Mat& x, const Mat* v_prev, double tau,
                 std::span<const int> labels, bool stacked, Mat& out) {
    const auto& cfg = net.cfg;
    if (x.cols != cfg.data_dim)
      throw ValidationError("forward: input has " + std::to_string(x.cols) +
                            " columns, net expects " + std::to_string(cfg.data_dim));
    if (cfg.kind == NetKind::Refiner) {
      if (v_prev == nullptr) throw ValidationError("forward: refiner net needs a previous velocity");
      require_same_shape(x, *v_prev, "forward");
    }
    if (labels.size() != 1 && static_cast<int>(labels.size()) != x.rows)
      throw ValidationError("forward: labels must broadcast (1) or match the batch");
    if (!std::isfinite(tau)) throw DomainError("forward: time must be finite");

    tf_.resize(static_cast<std::size_t>(cfg.time_dim));
    time_features(tau, tf_);
    const int b = x.rows;
    const int rows = stacked ? 2 * b : b;
    const std::size_t nl = net.layers.size();
    out.resize(rows, net.layers[nl - 1].w.rows);
    for (int r0 = 0; r0 < rows; r0 += kTileRows) {
      const int n = std::min(kTileRows, rows - r0);
      tile_in_.resize(n, cfg.input_dim());
      for (int i = 0; i < n; ++i) {
        const int k = r0 + i;
        const int sr = k < b ? k : k - b;
        auto dst = tile_in_.row(i);
        std::size_t o = 0;
        for (double v : x.row(sr)) dst[o++] = v;
        if (cfg.kind == NetKind::Refiner)
          for (double v : v_prev->row(sr)) dst[o++] = v;
        for (double v : tf_) dst[o++] = v;
        const int y = k < b ? detail::resolve_label(labels, sr, cfg.num_classes) : null_label_;
        for (double v : net.cond_table.row(y)) dst[o++] = v;
      }
      const Mat* cur = &tile_in_;
      for (std::size_t l = 0; l < nl; ++l) {
        if (l + 1 == nl) {
          gemm_bias_rows(net.layers[l], *cur, 0, n, out, r0);
          break;
        }
        Mat& dst = l % 2 ? tile_b_ : tile_a_;
        dst.resize(n, net.layers[l].w.rows);
        gemm_bias_rows(net.layers[l], *cur, 0, n, dst, 0);
        for (double& v : dst.a) v = silu(v);
        cur = &dst;
      }
    }
  }

  // Writes the solver-time velocity d(x, s) into out.
  void eval_velocity(const DenseNet& net, const Mat& x, double s, Mat& out, NfeCounters& nfe) {
    const double tau = 1.0 - s;
    if (!fused_) {
      if (guidance_.zeta == 0.0) {
        net_tiles(net, x, nullptr, tau, std::span<const int>(&null_label_, 1), false, out);
      } else {
        net_tiles(net, x, nullptr, tau, guidance_.labels, false, out);
      }
      nfe.base_evals += 1;
      nfe.base_dispatches += 1;
      for (double& v : out.a) v = -v;
      return;
    }
    net_tiles(net, x, nullptr, tau, guidance_.labels, true, wide_out_);
    blend(x.rows, x.cols, out);
    nfe.base_evals += 2;
    nfe.base_dispatches += 1;
  }

  // Writes the solver-time correction offset into out: d_refined = d_prev + out.
  void eval_offset(const DenseNet& refiner, const Mat& x, const Mat& d_prev, double s, Mat& out,
                   NfeCounters& nfe) {
    const double tau = 1.0 - s;
    vprev_.resize(x.rows, x.cols);
    for (std::size_t k = 0; k < x.size(); ++k) vprev_.a[k] = -d_prev.a[k];
    if (!fused_) {
      if (guidance_.zeta == 0.0) {
        net_tiles(refiner, x, &vprev_, tau, std::span<const int>(&null_label_, 1), false, out);
      } else {
        net_tiles(refiner, x, &vprev_, tau, guidance_.labels, false, out);
      }
      nfe.refiner_evals += 1;
      nfe.refiner_dispatches += 1;
      for (double& v : out.a) v = -v;
      return;
    }
    net_tiles(refiner, x, &vprev_, tau, guidance_.labels, true, wide_out_);
    blend(x.rows, x.cols, out);
    nfe.refiner_evals += 2;
    nfe.refiner_dispatches += 1;
  }

  // out = -((1 - zeta) * unconditional + zeta * conditional), with the
  // conditional rows in the top half of wide_out_.
  void blend(int rows, int cols, Mat& out) {
    out.resize(rows, cols);
    const double z = guidance_.zeta;
    const std::size_t half = out.size();
    for (std::size_t k = 0; k < half; ++k)
      out.a[k] = -((1.0 - z) * wide_out_.a[half + k] + z * wide_out_.a[k]);
  }

  std::vector<PlanInstr> instrs_;
  GuidanceSpec guidance_;
  bool fused_ = false;
  bool needs_refiner_ = false;
  int null_label_ = 0;
  std::string source_;

  static constexpr int kTileRows = 128;

  Mat tile_in_, tile_a_, tile_b_;
  Mat wide_out_, vprev_;
  Mat d0_, d1_, xt_, next_, cache_d_;
  bool cache_full_ = false;
  std::vector<double> tf_;
};

inline CompiledPlan compile(const SamplePlan& plan) {
  plan.validate(/*has_refiner=*/true);
  if (plan.guidance.labels.empty())
    throw ValidationError("guidance labels must not be empty");
  CompiledPlan cp;
  cp.guidance_ = plan.guidance;
  cp.fused_ = !(plan.guidance.zeta == 0.0 || plan.guidance.zeta == 1.0);
  cp.source_ = plan.source.empty() ? plan.text() : plan.source;
  cp.instrs_.reserve(plan.blocks.size());
  for (std::size_t i = 0; i < plan.blocks.size(); ++i) {
    PlanInstr in;
    in.kind = plan.blocks[i];
    in.s0 = plan.knots[i];
    in.s1 = plan.knots[i + 1];
    in.dt = in.s1 - in.s0;
    in.half_dt = 0.5 * in.dt;
    cp.instrs_.push_back(in);
    if (in.kind == BlockKind::Refiner) cp.needs_refiner_ = true;
  }
  return cp;
}

}  // namespace flowturbo
