#include <gtest/gtest.h>

#include <string>
#include <vector>

#include "flowturbo/mat.hpp"
#include "flowturbo/net.hpp"
#include "flowturbo/plan.hpp"
#include "flowturbo/rng.hpp"
#include "flowturbo/sampling.hpp"

using namespace flowturbo;

namespace {

NetConfig velocity_cfg() {
  NetConfig cfg;
  cfg.kind = NetKind::Velocity;
  cfg.data_dim = 2;
  cfg.time_dim = 8;
  cfg.num_classes = 3;
  cfg.cond_dim = 4;
  cfg.hidden = {16, 16};
  return cfg;
}

NetConfig refiner_cfg() {
  NetConfig cfg = velocity_cfg();
  cfg.kind = NetKind::Refiner;
  cfg.hidden = {6};
  return cfg;
}

std::string kinds_of(const SamplePlan& p) { return p.text(); }

}  // namespace

TEST(ParsePlanTest, CountedForm) {
  const SamplePlan p = parse_plan("H2P4R2");
  EXPECT_EQ(kinds_of(p), "HHPPPPRR");
  ASSERT_EQ(p.knots.size(), 9u);
  EXPECT_EQ(p.knots.front(), 0.0);
  EXPECT_EQ(p.knots.back(), 1.0);
  EXPECT_DOUBLE_EQ(p.knots[4], 0.5);
  EXPECT_EQ(p.source, "H2P4R2");

  EXPECT_EQ(kinds_of(parse_plan("H8")), "HHHHHHHH");
  EXPECT_EQ(kinds_of(parse_plan("E1H3")), "EHHH");
  EXPECT_EQ(kinds_of(parse_plan("H12")), std::string(12, 'H'));
}

TEST(ParsePlanTest, CommaForm) {
  EXPECT_EQ(kinds_of(parse_plan("H,H,P")), "HHP");
  EXPECT_EQ(kinds_of(parse_plan("H, P, R")), "HPR");
  EXPECT_EQ(kinds_of(parse_plan(" H2 , P ")), "HHP");
  EXPECT_EQ(kinds_of(parse_plan("H\tP\nE")), "HPE");
}

TEST(ParsePlanTest, ErrorsCarryByteOffsets) {
  try {
    parse_plan("");
    FAIL() << "empty plan accepted";
  } catch (const PlanParseError& e) {
    EXPECT_EQ(e.byte_offset(), 0u);
  }
  try {
    parse_plan("H2Q3");
    FAIL() << "bad kind accepted";
  } catch (const PlanParseError& e) {
    EXPECT_EQ(e.byte_offset(), 2u);
  }
  try {
    parse_plan("H0");
    FAIL() << "zero count accepted";
  } catch (const PlanParseError& e) {
    EXPECT_EQ(e.byte_offset(), 1u);
  }
  try {
    parse_plan("2H");
    FAIL() << "leading digits accepted";
  } catch (const PlanParseError& e) {
    EXPECT_EQ(e.byte_offset(), 0u);
  }
  EXPECT_THROW(parse_plan(", ,"), PlanParseError);
  EXPECT_THROW(parse_plan("H2000000"), PlanParseError);
}

TEST(ParsePlanTest, PseudoFirstParsesButFailsValidation) {
  const SamplePlan p = parse_plan("P3");
  EXPECT_EQ(kinds_of(p), "PPP");
  EXPECT_THROW(p.validate(false), ValidationError);
  EXPECT_THROW(compile(p), ValidationError);
}

TEST(CompileTest, LowersIntervalsAndGuidance) {
  SamplePlan p = parse_plan("H2P2");
  p.guidance.zeta = 1.0;
  const CompiledPlan cp = compile(p);
  ASSERT_EQ(cp.instructions().size(), 4u);
  EXPECT_FALSE(cp.fused());
  EXPECT_EQ(cp.source(), "H2P2");
  for (std::size_t i = 0; i < 4; ++i) {
    const PlanInstr& in = cp.instructions()[i];
    EXPECT_DOUBLE_EQ(in.s0, p.knots[i]);
    EXPECT_DOUBLE_EQ(in.s1, p.knots[i + 1]);
    EXPECT_DOUBLE_EQ(in.dt, in.s1 - in.s0);
    EXPECT_DOUBLE_EQ(in.half_dt, 0.5 * in.dt);
  }
  EXPECT_EQ(cp.instructions()[0].kind, BlockKind::Heun);
  EXPECT_EQ(cp.instructions()[2].kind, BlockKind::Pseudo);

  SamplePlan q = parse_plan("H2");
  q.guidance.zeta = 1.5;
  EXPECT_TRUE(compile(q).fused());
  q.guidance.zeta = 0.0;
  EXPECT_FALSE(compile(q).fused());
}

TEST(CompileTest, DumpIsStableAndIdempotent) {
  SamplePlan p = parse_plan("H2");
  p.guidance.zeta = 1.0;
  const nlohmann::json a = compile(p).dump();
  const nlohmann::json b = compile(p).dump();
  EXPECT_EQ(a, b);

  nlohmann::json want;
  want["source"] = "H2";
  want["fused"] = false;
  want["zeta"] = 1.0;
  want["blocks"] = nlohmann::json::array();
  {
    nlohmann::json b0;
    b0["kind"] = "H";
    b0["s0"] = 0.0;
    b0["s1"] = 0.5;
    want["blocks"].push_back(b0);
    nlohmann::json b1;
    b1["kind"] = "H";
    b1["s0"] = 0.5;
    b1["s1"] = 1.0;
    want["blocks"].push_back(b1);
  }
  EXPECT_EQ(a, want);
}

TEST(CompiledRunTest, MatchesInterpreterBitwiseAcrossRandomPlans) {
  Rng rng(61);
  const DenseNet net = DenseNet::create(velocity_cfg(), rng);
  DenseNet refiner = DenseNet::create(refiner_cfg(), rng);
  std::vector<double> params = get_params(refiner);
  for (double& v : params) v += 0.02 * rng.normal();
  set_params(refiner, params);

  const double zetas[5] = {1.0, 0.0, 1.7, -0.3, 2.5};
  for (int trial = 0; trial < 12; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(8));
    std::vector<BlockKind> blocks;
    blocks.push_back(rng.uniform_int(2) == 0 ? BlockKind::Heun : BlockKind::Euler);
    const BlockKind rest[4] = {BlockKind::Heun, BlockKind::Pseudo, BlockKind::Euler,
                               BlockKind::Refiner};
    for (int i = 1; i < n; ++i) blocks.push_back(rest[rng.uniform_int(4)]);

    SamplePlan plan = SamplePlan::uniform(blocks);
    plan.guidance.zeta = zetas[trial % 5];
    const int batch = 1 + static_cast<int>(rng.uniform_int(5));
    if (trial % 2 == 0) {
      plan.guidance.labels.assign(1, static_cast<int>(rng.uniform_int(3)));
    } else {
      plan.guidance.labels.resize(static_cast<std::size_t>(batch));
      for (int& l : plan.guidance.labels) l = static_cast<int>(rng.uniform_int(3));
    }

    Mat noise(batch, 2);
    rng.fill_normal(noise);

    const SampleResult interp = run_plan(plan, net, &refiner, noise, plan.guidance);
    CompiledPlan cp = compile(plan);
    const CompiledRunResult comp = cp.run(net, &refiner, noise);

    EXPECT_EQ(max_abs_diff(interp.x, comp.x), 0.0) << "trial " << trial;
    EXPECT_EQ(comp.nfe.base_evals, interp.nfe.base_evals);
    EXPECT_EQ(comp.nfe.refiner_evals, interp.nfe.refiner_evals);
    if (cp.fused()) {
      EXPECT_EQ(comp.nfe.base_dispatches * 2, comp.nfe.base_evals);
      EXPECT_EQ(comp.nfe.refiner_dispatches * 2, comp.nfe.refiner_evals);
    } else {
      EXPECT_EQ(comp.nfe.base_dispatches, comp.nfe.base_evals);
      EXPECT_EQ(comp.nfe.refiner_dispatches, comp.nfe.refiner_evals);
    }
  }
}

TEST(CompiledRunTest, RepeatedRunsReuseBuffersAndAgree) {
  Rng rng(62);
  const DenseNet net = DenseNet::create(velocity_cfg(), rng);
  SamplePlan plan = parse_plan("H2P4");
  plan.guidance.zeta = 2.0;
  plan.guidance.labels = {1};
  CompiledPlan cp = compile(plan);
  Mat noise(4, 2);
  rng.fill_normal(noise);
  const CompiledRunResult a = cp.run(net, nullptr, noise);
  const CompiledRunResult b = cp.run(net, nullptr, noise);
  EXPECT_EQ(max_abs_diff(a.x, b.x), 0.0);
  EXPECT_EQ(a.nfe.base_evals, b.nfe.base_evals);

  Mat wider(9, 2);
  rng.fill_normal(wider);
  const CompiledRunResult c = cp.run(net, nullptr, wider);
  EXPECT_TRUE(all_finite(c.x));
  EXPECT_EQ(c.x.rows, 9);
}

TEST(CompiledRunTest, RunValidation) {
  Rng rng(63);
  const DenseNet net = DenseNet::create(velocity_cfg(), rng);
  const DenseNet refiner = DenseNet::create(refiner_cfg(), rng);
  Mat noise(2, 2);
  rng.fill_normal(noise);

  CompiledPlan with_r = compile(parse_plan("H1R1"));
  EXPECT_THROW(with_r.run(net, nullptr, noise), ValidationError);
  EXPECT_TRUE(all_finite(with_r.run(net, &refiner, noise).x));

  CompiledPlan plain = compile(parse_plan("H2"));
  EXPECT_THROW(plain.run(refiner, nullptr, noise), ValidationError);
  Mat bad(2, 3);
  EXPECT_THROW(plain.run(net, nullptr, bad), ValidationError);

  SamplePlan empty_labels = parse_plan("H2");
  empty_labels.guidance.labels.clear();
  EXPECT_THROW(compile(empty_labels), ValidationError);

  SamplePlan mism = parse_plan("H2");
  mism.guidance.labels = {0, 1, 2};
  mism.guidance.zeta = 1.5;
  CompiledPlan cp = compile(mism);
  Mat two(2, 2);
  EXPECT_THROW(cp.run(net, nullptr, two), ValidationError);
}

TEST(CompiledRunTest, NfeCountsForNamedPlans) {
  Rng rng(64);
  const DenseNet net = DenseNet::create(velocity_cfg(), rng);
  const DenseNet refiner = DenseNet::create(refiner_cfg(), rng);
  Mat noise(3, 2);
  rng.fill_normal(noise);

  for (int k = 2; k <= 6; ++k) {
    CompiledPlan hk = compile(parse_plan("H" + std::to_string(k)));
    EXPECT_EQ(hk.run(net, nullptr, noise).nfe.base_evals, 2 * k);

    CompiledPlan hp = compile(parse_plan("H1P" + std::to_string(k - 1)));
    EXPECT_EQ(hp.run(net, nullptr, noise).nfe.base_evals, k + 1);
  }

  CompiledPlan mixed = compile(parse_plan("H2P4R2"));
  const CompiledRunResult res = mixed.run(net, &refiner, noise);
  EXPECT_EQ(res.nfe.base_evals, 2 * 2 + 4);
  EXPECT_EQ(res.nfe.refiner_evals, 2);
}
