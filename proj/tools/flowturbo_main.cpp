/*
 * flowturbo command line.
 *
 * Subcommands: train, sample, verify {order, curvature, loss-identity,
 * sw-distance}, bench, data. Every run that writes files drops a
 * manifest.json next to them.
 *
 * Exit codes: 0 success, 2 usage or validation failure (bad flags, bad
 * config, malformed plans or checkpoints), 3 numerical failure (training
 * divergence, violated --assert bound).
 *
 * Option precedence: built-in defaults < --config JSON < explicit flags.
 * Seed precedence: 0 < FLOWTURBO_SEED env < config "seed" < --seed.
 */

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "flowturbo/analysis.hpp"
#include "flowturbo/checkpoint.hpp"
#include "flowturbo/dataset.hpp"
#include "flowturbo/errors.hpp"
#include "flowturbo/io.hpp"
#include "flowturbo/mat.hpp"
#include "flowturbo/net.hpp"
#include "flowturbo/plan.hpp"
#include "flowturbo/rng.hpp"
#include "flowturbo/sampling.hpp"
#include "flowturbo/schedule.hpp"
#include "flowturbo/training.hpp"
#include "flowturbo/version.hpp"

namespace fs = std::filesystem;
using namespace flowturbo;
using nlohmann::json;

namespace {

std::chrono::steady_clock::time_point g_start;

// A violated --assert bound. Maps to exit code 3, not 2: the run was well
// formed, the numbers were not.
struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

double wall_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - g_start).count();
}

std::uint64_t parse_seed_text(const std::string& text, const char* origin) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || text.empty())
    throw ValidationError(std::string(origin) + ": '" + text + "' is not a valid seed");
  return v;
}

std::uint64_t resolve_seed(bool flag_given, std::uint64_t flag_value,
                           const std::optional<std::uint64_t>& config_value) {
  if (flag_given) return flag_value;
  if (config_value) return *config_value;
  if (const char* env = std::getenv("FLOWTURBO_SEED")) return parse_seed_text(env, "FLOWTURBO_SEED");
  return 0;
}

std::vector<int> parse_int_list(const std::string& text, const char* what) {
  std::vector<int> out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == ',' || text[i] == ' ') {
      ++i;
      continue;
    }
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(text.substr(i), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0) throw ValidationError(std::string(what) + ": cannot parse '" + text + "'");
    out.push_back(v);
    i += used;
  }
  if (out.empty()) throw ValidationError(std::string(what) + ": empty list");
  return out;
}

NoiseSchedule schedule_from_name(const std::string& name) {
  if (name == "linear") return NoiseSchedule::linear();
  if (name == "cosine") return NoiseSchedule::cosine();
  throw ValidationError("unknown schedule '" + name + "', expected linear or cosine");
}

fs::path ensure_out_dir(const std::string& out) {
  try {
    fs::create_directories(out);
  } catch (const fs::filesystem_error& e) {
    throw IoError("cannot create output directory '" + out + "': " + e.what());
  }
  return fs::path(out);
}

void write_run_manifest(const fs::path& dir, const std::string& command, json config,
                        std::uint64_t seed, std::map<std::string, std::string> hashes) {
  RunManifest m;
  m.command = command;
  m.config = std::move(config);
  m.seed = seed;
  m.checkpoint_hashes = std::move(hashes);
  m.wall_time_seconds = wall_seconds();
  write_manifest(dir, m);
}

// Applies --config JSON values to options the user did not set explicitly.
class ConfigOverlay {
 public:
  explicit ConfigOverlay(CLI::App* sub) : sub_(sub) {}

  template <typename T>
  ConfigOverlay& bind(const std::string& key, const std::string& flag, T& target) {
    setters_[key] = [this, flag, &target](const json& v) {
      if (sub_->count(flag) > 0) return;
      try {
        target = v.get<T>();
      } catch (const json::exception& e) {
        throw ValidationError("config: bad value for '" + flag + "': " + e.what());
      }
    };
    return *this;
  }

  void apply(const std::string& path, std::optional<std::uint64_t>& seed_out) {
    if (path.empty()) return;
    json cfg;
    try {
      cfg = json::parse(read_file(path));
    } catch (const json::exception& e) {
      throw ValidationError("config '" + path + "': " + e.what());
    }
    if (!cfg.is_object()) throw ValidationError("config '" + path + "' must be a JSON object");
    for (const auto& [key, value] : cfg.items()) {
      if (key == "seed") {
        if (!value.is_number_unsigned())
          throw ValidationError("config: seed must be a non-negative integer");
        seed_out = value.get<std::uint64_t>();
        continue;
      }
      const auto it = setters_.find(key);
      if (it == setters_.end())
        throw ValidationError("config '" + path + "': unknown key '" + key + "'");
      it->second(value);
    }
  }

 private:
  CLI::App* sub_;
  std::map<std::string, std::function<void(const json&)>> setters_;
};

DenseNet load_net(const std::string& path, NetKind want, const char* role) {
  DenseNet net = load_checkpoint(path);
  if (net.cfg.kind != want)
    throw ValidationError(std::string(role) + " '" + path + "' has the wrong network kind");
  return net;
}

std::vector<int> build_labels(int batch, int num_classes, int label_flag) {
  std::vector<int> out(static_cast<std::size_t>(batch));
  if (label_flag == -1) {
    for (int b = 0; b < batch; ++b) out[static_cast<std::size_t>(b)] = b % num_classes;
  } else if (label_flag >= 0 && label_flag < num_classes) {
    for (int& l : out) l = label_flag;
  } else {
    throw ValidationError("label " + std::to_string(label_flag) + " outside 0.." +
                          std::to_string(num_classes - 1) + " (or -1 to cycle)");
  }
  return out;
}

std::string points_csv(const Mat& x, const std::vector<int>& labels) {
  std::string out;
  for (int c = 0; c < x.cols; ++c) {
    if (c) out += ',';
    out += "x" + std::to_string(c);
  }
  out += ",label\n";
  for (int r = 0; r < x.rows; ++r) {
    for (int c = 0; c < x.cols; ++c) {
      if (c) out += ',';
      out += format_double(x(r, c));
    }
    out += ',';
    out += std::to_string(labels[static_cast<std::size_t>(r)]);
    out += '\n';
  }
  return out;
}

void write_json_file(const fs::path& path, const json& j) {
  atomic_write_file(path, j.dump(2) + "\n");
}

json nfe_json(const NfeCounters& nfe) {
  json j;
  j["base_evals"] = nfe.base_evals;
  j["base_dispatches"] = nfe.base_dispatches;
  j["refiner_evals"] = nfe.refiner_evals;
  j["refiner_dispatches"] = nfe.refiner_dispatches;
  return j;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- train -----------------------------------------------------------------

struct TrainOpts {
  std::string out, config;
  std::string kind = "velocity";
  std::string dataset = "moons";
  std::string schedule = "linear";
  std::string base;
  TrainConfig tcfg;
  std::vector<int> hidden = {96, 96};
  int time_dim = 16;
  int cond_dim = 8;
  std::uint64_t seed = 0;
};

void run_train(CLI::App* sub, TrainOpts& o) {
  ConfigOverlay overlay(sub);
  std::optional<std::uint64_t> cfg_seed;
  overlay.bind("kind", "--kind", o.kind)
      .bind("dataset", "--dataset", o.dataset)
      .bind("schedule", "--schedule", o.schedule)
      .bind("base", "--base", o.base)
      .bind("steps", "--steps", o.tcfg.steps)
      .bind("batch_size", "--batch-size", o.tcfg.batch_size)
      .bind("lr", "--lr", o.tcfg.lr)
      .bind("grad_clip", "--grad-clip", o.tcfg.grad_clip)
      .bind("cond_dropout", "--cond-dropout", o.tcfg.cond_dropout)
      .bind("dt_lo", "--dt-lo", o.tcfg.dt_lo)
      .bind("dt_hi", "--dt-hi", o.tcfg.dt_hi)
      .bind("log_every", "--log-every", o.tcfg.log_every)
      .bind("hidden", "--hidden", o.hidden)
      .bind("time_dim", "--time-dim", o.time_dim)
      .bind("cond_dim", "--cond-dim", o.cond_dim);
  overlay.apply(o.config, cfg_seed);
  o.seed = resolve_seed(sub->count("--seed") > 0, o.seed, cfg_seed);

  if (o.kind != "velocity" && o.kind != "refiner")
    throw ValidationError("--kind must be velocity or refiner");
  if (o.kind == "refiner" && o.base.empty())
    throw ValidationError("training a refiner needs --base <velocity checkpoint>");

  const Dataset data = Dataset::from_name(o.dataset);
  const NoiseSchedule sched = schedule_from_name(o.schedule);
  const fs::path out_dir = ensure_out_dir(o.out);

  NetConfig ncfg;
  ncfg.kind = o.kind == "refiner" ? NetKind::Refiner : NetKind::Velocity;
  ncfg.data_dim = Dataset::dim();
  ncfg.time_dim = o.time_dim;
  ncfg.num_classes = data.num_classes();
  ncfg.cond_dim = o.cond_dim;
  ncfg.hidden = o.hidden;

  Rng rng(o.seed);
  DenseNet net = DenseNet::create(ncfg, rng);
  std::vector<LossRecord> log;
  TrainStats stats;
  std::map<std::string, std::string> hashes;

  if (o.kind == "velocity") {
    stats = train_velocity(net, sched, data, o.tcfg, rng, &log);
  } else {
    const DenseNet base = load_net(o.base, NetKind::Velocity, "--base");
    stats = train_refiner(net, base, sched, data, o.tcfg, rng, &log);
    hashes[o.base] = file_hash(o.base);
  }

  save_checkpoint(net, out_dir / "checkpoint.ftrb");
  hashes["checkpoint.ftrb"] = file_hash(out_dir / "checkpoint.ftrb");

  CsvBuilder csv({"step", "loss", "seconds"});
  for (const LossRecord& r : log) {
    csv.cell(static_cast<std::int64_t>(r.step));
    csv.cell(r.loss);
    csv.cell(r.seconds);
    csv.end_row();
  }
  atomic_write_file(out_dir / "loss.csv", csv.str());

  json cfg;
  cfg["kind"] = o.kind;
  cfg["dataset"] = o.dataset;
  cfg["schedule"] = o.schedule;
  if (!o.base.empty()) cfg["base"] = o.base;
  cfg["steps"] = o.tcfg.steps;
  cfg["batch_size"] = o.tcfg.batch_size;
  cfg["lr"] = o.tcfg.lr;
  cfg["grad_clip"] = o.tcfg.grad_clip;
  cfg["cond_dropout"] = o.tcfg.cond_dropout;
  cfg["dt_lo"] = o.tcfg.dt_lo;
  cfg["dt_hi"] = o.tcfg.dt_hi;
  cfg["log_every"] = o.tcfg.log_every;
  cfg["hidden"] = o.hidden;
  cfg["time_dim"] = o.time_dim;
  cfg["cond_dim"] = o.cond_dim;
  write_run_manifest(out_dir, "train", cfg, o.seed, std::move(hashes));

  const double final_loss = log.empty() ? 0.0 : log.back().loss;
  std::cout << "trained " << o.kind << " net (" << net.param_count() << " params) on "
            << o.dataset << " for " << o.tcfg.steps << " steps, final loss "
            << format_double(final_loss) << "\n";
  if (stats.labels_total > 0)
    std::cout << "label dropout: " << stats.labels_dropped << "/" << stats.labels_total << "\n";
  std::cout << "wrote " << (out_dir / "checkpoint.ftrb").string() << "\n";
}

// ---- sample ----------------------------------------------------------------

struct SampleOpts {
  std::string out, config;
  std::string checkpoint, refiner;
  std::string plan = "H8";
  int batch = 256;
  int label = -1;
  double zeta = 1.0;
  bool interpreted = false;
  std::uint64_t seed = 0;
};

void run_sample(CLI::App* sub, SampleOpts& o) {
  ConfigOverlay overlay(sub);
  std::optional<std::uint64_t> cfg_seed;
  overlay.bind("checkpoint", "--checkpoint", o.checkpoint)
      .bind("refiner", "--refiner", o.refiner)
      .bind("plan", "--plan", o.plan)
      .bind("batch", "--batch", o.batch)
      .bind("label", "--label", o.label)
      .bind("zeta", "--zeta", o.zeta)
      .bind("interpreted", "--interpreted", o.interpreted);
  overlay.apply(o.config, cfg_seed);
  o.seed = resolve_seed(sub->count("--seed") > 0, o.seed, cfg_seed);

  if (o.batch < 1) throw ValidationError("--batch must be positive");
  const DenseNet net = load_net(o.checkpoint, NetKind::Velocity, "--checkpoint");
  std::optional<DenseNet> refiner;
  if (!o.refiner.empty()) refiner = load_net(o.refiner, NetKind::Refiner, "--refiner");

  SamplePlan plan = parse_plan(o.plan);
  plan.guidance.zeta = o.zeta;
  plan.guidance.labels = build_labels(o.batch, net.cfg.num_classes, o.label);

  Rng rng(o.seed);
  Mat noise(o.batch, net.cfg.data_dim);
  rng.fill_normal(noise);

  Mat x;
  NfeCounters nfe;
  bool fused = false;
  if (o.interpreted) {
    SampleResult res = run_plan(plan, net, refiner ? &*refiner : nullptr, noise, plan.guidance);
    x = std::move(res.x);
    nfe = res.nfe;
  } else {
    CompiledPlan cp = compile(plan);
    fused = cp.fused();
    CompiledRunResult res = cp.run(net, refiner ? &*refiner : nullptr, noise);
    x = std::move(res.x);
    nfe = res.nfe;
  }

  const fs::path out_dir = ensure_out_dir(o.out);
  atomic_write_file(out_dir / "samples.csv", points_csv(x, plan.guidance.labels));

  json report = nfe_json(nfe);
  report["plan"] = plan.source;
  report["batch"] = o.batch;
  report["zeta"] = o.zeta;
  report["fused"] = fused;
  report["interpreted"] = o.interpreted;
  write_json_file(out_dir / "nfe.json", report);

  if (x.cols == 2) atomic_write_file(out_dir / "samples.ppm", render_ppm(x, 512, 512));

  std::map<std::string, std::string> hashes;
  hashes[o.checkpoint] = file_hash(o.checkpoint);
  if (!o.refiner.empty()) hashes[o.refiner] = file_hash(o.refiner);

  json cfg;
  cfg["checkpoint"] = o.checkpoint;
  if (!o.refiner.empty()) cfg["refiner"] = o.refiner;
  cfg["plan"] = o.plan;
  cfg["batch"] = o.batch;
  cfg["label"] = o.label;
  cfg["zeta"] = o.zeta;
  cfg["interpreted"] = o.interpreted;
  write_run_manifest(out_dir, "sample", cfg, o.seed, std::move(hashes));

  std::cout << "sampled " << o.batch << " points with plan " << plan.source << " ("
            << nfe.base_evals << " base evals, " << nfe.refiner_evals << " refiner evals)\n"
            << "wrote " << (out_dir / "samples.csv").string() << "\n";
}

// ---- verify order ------------------------------------------------------------

struct OrderOpts {
  std::string out, config;
  std::string solver = "all";
  std::string field = "decay";
  std::string steps = "10,20,40,80";
  double lambda = 3.0;
  double rate = -0.6;
  int batch = 8;
  std::uint64_t seed = 0;
  double assert_min = std::numeric_limits<double>::quiet_NaN();
  double assert_max = std::numeric_limits<double>::quiet_NaN();
};

AnalyticField field_from_opts(const OrderOpts& o) {
  if (o.field == "decay") return AnalyticField::linear_decay(o.lambda);
  if (o.field == "constant") return AnalyticField::constant({0.5, -1.5});
  if (o.field == "affine")
    return AnalyticField::affine_time_varying(o.rate, {1.0, 0.5}, {2.0, 3.5}, {0.2, 1.1});
  throw ValidationError("unknown field '" + o.field + "', expected decay, constant or affine");
}

void run_verify_order(CLI::App* sub, OrderOpts& o) {
  ConfigOverlay overlay(sub);
  std::optional<std::uint64_t> cfg_seed;
  overlay.bind("solver", "--solver", o.solver)
      .bind("field", "--field", o.field)
      .bind("steps", "--steps", o.steps)
      .bind("lambda", "--lambda", o.lambda)
      .bind("rate", "--rate", o.rate)
      .bind("batch", "--batch", o.batch)
      .bind("assert_min", "--assert-min", o.assert_min)
      .bind("assert_max", "--assert-max", o.assert_max);
  overlay.apply(o.config, cfg_seed);
  o.seed = resolve_seed(sub->count("--seed") > 0, o.seed, cfg_seed);

  const bool has_assert = !std::isnan(o.assert_min) || !std::isnan(o.assert_max);
  std::vector<SolverTemplate> solvers;
  if (o.solver == "all") {
    if (has_assert)
      throw ValidationError("--assert-min/--assert-max need a single --solver");
    solvers = {SolverTemplate::Euler, SolverTemplate::Heun, SolverTemplate::PseudoCorrector};
  } else {
    solvers = {solver_from_name(o.solver)};
  }

  const AnalyticField field = field_from_opts(o);
  const std::vector<int> steps = parse_int_list(o.steps, "--steps");
  if (o.batch < 1) throw ValidationError("--batch must be positive");
  Rng rng(o.seed);
  Mat x0(o.batch, field.dim() == 0 ? 2 : field.dim());
  rng.fill_normal(x0);

  json reports = json::array();
  bool violated = false;
  for (SolverTemplate s : solvers) {
    const OrderReport rep = empirical_order(field, s, steps, x0);
    reports.push_back(rep.to_json());
    if (rep.exact) {
      std::cout << "order[" << rep.solver << "] exact (all errors at rounding level)\n";
    } else {
      std::cout << "order[" << rep.solver << "] slope " << format_double(rep.slope) << " +- "
                << format_double(rep.half_width) << "\n";
      if (!std::isnan(o.assert_min) && rep.slope < o.assert_min) violated = true;
      if (!std::isnan(o.assert_max) && rep.slope > o.assert_max) violated = true;
    }
    if (!o.out.empty()) {
      const fs::path dir = ensure_out_dir(o.out);
      atomic_write_file(dir / ("order_" + rep.solver + ".csv"), rep.to_csv());
    }
  }

  if (!o.out.empty()) {
    const fs::path dir = ensure_out_dir(o.out);
    json top;
    top["field"] = o.field;
    top["reports"] = reports;
    write_json_file(dir / "order.json", top);
    json cfg;
    cfg["solver"] = o.solver;
    cfg["field"] = o.field;
    cfg["steps"] = o.steps;
    cfg["lambda"] = o.lambda;
    cfg["rate"] = o.rate;
    cfg["batch"] = o.batch;
    write_run_manifest(dir, "verify order", cfg, o.seed, {});
  }
  if (violated) {
    std::string bounds;
    if (!std::isnan(o.assert_min)) bounds += " min " + format_double(o.assert_min);
    if (!std::isnan(o.assert_max)) bounds += " max " + format_double(o.assert_max);
    throw CheckFailure("order slope violates" + bounds);
  }
}

// ---- verify curvature ----------------------------------------------------------

struct CurvatureOpts {
  std::string out, config;
  std::string checkpoint, refiner;
  std::string plan = "H20";
  int batch = 256;
  int noises = 8;
  int label = -1;
  double zeta = 1.0;
  bool check = false;
  std::uint64_t seed = 0;
};

void run_verify_curvature(CLI::App* sub, CurvatureOpts& o) {
  ConfigOverlay overlay(sub);
  std::optional<std::uint64_t> cfg_seed;
  overlay.bind("checkpoint", "--checkpoint", o.checkpoint)
      .bind("refiner", "--refiner", o.refiner)
      .bind("plan", "--plan", o.plan)
      .bind("batch", "--batch", o.batch)
      .bind("noises", "--noises", o.noises)
      .bind("label", "--label", o.label)
      .bind("zeta", "--zeta", o.zeta)
      .bind("assert", "--assert", o.check);
  overlay.apply(o.config, cfg_seed);
  o.seed = resolve_seed(sub->count("--seed") > 0, o.seed, cfg_seed);

  if (o.batch < 1 || o.noises < 1) throw ValidationError("--batch and --noises must be positive");
  const DenseNet net = load_net(o.checkpoint, NetKind::Velocity, "--checkpoint");
  std::optional<DenseNet> refiner;
  if (!o.refiner.empty()) refiner = load_net(o.refiner, NetKind::Refiner, "--refiner");

  SamplePlan plan = parse_plan(o.plan);
  GuidanceSpec spec;
  spec.zeta = o.zeta;
  spec.labels = build_labels(o.batch, net.cfg.num_classes, o.label);

  Rng rng(o.seed);
  Mat noise(o.batch, net.cfg.data_dim);
  std::vector<double> vsum, esum;
  std::vector<double> knots;
  double vmean = 0.0, emean = 0.0;
  for (int k = 0; k < o.noises; ++k) {
    rng.fill_normal(noise);
    const CurvatureSeries series =
        curvature_comparison(plan, net, refiner ? &*refiner : nullptr, noise, spec);
    if (k == 0) {
      knots = series.s;
      vsum.assign(series.s.size(), 0.0);
      esum.assign(series.s.size(), 0.0);
    }
    for (std::size_t i = 0; i < series.s.size(); ++i) {
      vsum[i] += series.velocity_curv[i];
      esum[i] += series.epsilon_curv[i];
    }
    vmean += series.velocity_mean;
    emean += series.epsilon_mean;
  }
  for (double& v : vsum) v /= o.noises;
  for (double& e : esum) e /= o.noises;
  vmean /= o.noises;
  emean /= o.noises;

  std::cout << "curvature over " << o.noises << " noise draws: velocity "
            << format_double(vmean) << ", epsilon " << format_double(emean) << "\n";

  if (!o.out.empty()) {
    const fs::path dir = ensure_out_dir(o.out);
    json j;
    j["plan"] = plan.source;
    j["batch"] = o.batch;
    j["noises"] = o.noises;
    j["velocity_mean"] = vmean;
    j["epsilon_mean"] = emean;
    j["s"] = knots;
    j["velocity_curvature"] = vsum;
    j["epsilon_curvature"] = esum;
    write_json_file(dir / "curvature.json", j);

    CsvBuilder csv({"s", "velocity_curvature", "epsilon_curvature"});
    for (std::size_t i = 0; i < knots.size(); ++i) {
      csv.cell(knots[i]);
      csv.cell(vsum[i]);
      csv.cell(esum[i]);
      csv.end_row();
    }
    atomic_write_file(dir / "curvature.csv", csv.str());

    std::map<std::string, std::string> hashes;
    hashes[o.checkpoint] = file_hash(o.checkpoint);
    if (!o.refiner.empty()) hashes[o.refiner] = file_hash(o.refiner);
    json cfg;
    cfg["checkpoint"] = o.checkpoint;
    if (!o.refiner.empty()) cfg["refiner"] = o.refiner;
    cfg["plan"] = o.plan;
    cfg["batch"] = o.batch;
    cfg["noises"] = o.noises;
    cfg["label"] = o.label;
    cfg["zeta"] = o.zeta;
    write_run_manifest(dir, "verify curvature", cfg, o.seed, std::move(hashes));
  }

  if (o.check && !(vmean < emean))
    throw CheckFailure("velocity curvature " + std::to_string(vmean) +
                       " is not below epsilon curvature " + std::to_string(emean));
}

// ---- verify loss-identity ---------------------------------------------------------

struct IdentityOpts {
  std::string out, config;
  std::string checkpoint;
  std::string schedule = "both";
  int tuples = 1000;
  double t_max = 0.95;
  std::uint64_t seed = 0;
  double assert_max = std::numeric_limits<double>::quiet_NaN();
};

void run_verify_identity(CLI::App* sub, IdentityOpts& o) {
  ConfigOverlay overlay(sub);
  std::optional<std::uint64_t> cfg_seed;
  overlay.bind("checkpoint", "--checkpoint", o.checkpoint)
      .bind("schedule", "--schedule", o.schedule)
      .bind("tuples", "--tuples", o.tuples)
      .bind("t_max", "--t-max", o.t_max)
      .bind("assert_max", "--assert-max", o.assert_max);
  overlay.apply(o.config, cfg_seed);
  o.seed = resolve_seed(sub->count("--seed") > 0, o.seed, cfg_seed);

  std::vector<std::string> names;
  if (o.schedule == "both")
    names = {"linear", "cosine"};
  else
    names = {o.schedule};

  DenseNet net = [&] {
    if (!o.checkpoint.empty()) return load_net(o.checkpoint, NetKind::Velocity, "--checkpoint");
    NetConfig cfg;
    Rng init(o.seed);
    return DenseNet::create(cfg, init);
  }();

  json reports = json::array();
  double worst = 0.0;
  for (const std::string& name : names) {
    const NoiseSchedule sched = schedule_from_name(name);
    Rng rng(o.seed);
    const IdentityReport rep = loss_weight_identity(net, sched, o.tuples, o.t_max, rng);
    json j = rep.to_json();
    j["schedule"] = name;
    reports.push_back(j);
    worst = std::max(worst, rep.residual);
    std::cout << "loss-identity[" << name << "] residual " << format_double(rep.residual)
              << " over " << o.tuples << " tuples\n";
  }

  if (!o.out.empty()) {
    const fs::path dir = ensure_out_dir(o.out);
    json top;
    top["reports"] = reports;
    write_json_file(dir / "identity.json", top);
    std::map<std::string, std::string> hashes;
    if (!o.checkpoint.empty()) hashes[o.checkpoint] = file_hash(o.checkpoint);
    json cfg;
    if (!o.checkpoint.empty()) cfg["checkpoint"] = o.checkpoint;
    cfg["schedule"] = o.schedule;
    cfg["tuples"] = o.tuples;
    cfg["t_max"] = o.t_max;
    write_run_manifest(dir, "verify loss-identity", cfg, o.seed, std::move(hashes));
  }

  if (!std::isnan(o.assert_max) && worst > o.assert_max)
    throw CheckFailure("loss-identity residual " + std::to_string(worst) + " exceeds " +
                       std::to_string(o.assert_max));
}

// ---- verify sw-distance --------------------------------------------------------

struct SwOpts {
  std::string out, config;
  std::string checkpoint, refiner;
  std::string plan;
  std::string dataset = "moons";
  int n = 4096;
  int m = 4096;
  int projections = 128;
  int label = -1;
  double zeta = 1.0;
  std::uint64_t seed = 0;
  double assert_max = std::numeric_limits<double>::quiet_NaN();
};

void run_verify_sw(CLI::App* sub, SwOpts& o) {
  ConfigOverlay overlay(sub);
  std::optional<std::uint64_t> cfg_seed;
  overlay.bind("checkpoint", "--checkpoint", o.checkpoint)
      .bind("refiner", "--refiner", o.refiner)
      .bind("plan", "--plan", o.plan)
      .bind("dataset", "--dataset", o.dataset)
      .bind("n", "--n", o.n)
      .bind("m", "--m", o.m)
      .bind("projections", "--projections", o.projections)
      .bind("label", "--label", o.label)
      .bind("zeta", "--zeta", o.zeta)
      .bind("assert_max", "--assert-max", o.assert_max);
  overlay.apply(o.config, cfg_seed);
  o.seed = resolve_seed(sub->count("--seed") > 0, o.seed, cfg_seed);

  if (o.n < 1 || o.m < 1) throw ValidationError("--n and --m must be positive");
  const DenseNet net = load_net(o.checkpoint, NetKind::Velocity, "--checkpoint");
  std::optional<DenseNet> refiner;
  if (!o.refiner.empty()) refiner = load_net(o.refiner, NetKind::Refiner, "--refiner");

  SamplePlan plan = parse_plan(o.plan);
  plan.guidance.zeta = o.zeta;
  plan.guidance.labels = build_labels(o.n, net.cfg.num_classes, o.label);

  const Dataset data = Dataset::from_name(o.dataset);
  if (net.cfg.data_dim != Dataset::dim())
    throw ValidationError("checkpoint dimensionality does not match the dataset");

  // RNG order: generation noise, then reference draw, then projections.
  Rng rng(o.seed);
  Mat noise(o.n, net.cfg.data_dim);
  rng.fill_normal(noise);
  CompiledPlan cp = compile(plan);
  const CompiledRunResult gen = cp.run(net, refiner ? &*refiner : nullptr, noise);

  Mat ref;
  std::vector<int> ref_labels;
  data.sample(o.m, rng, ref, ref_labels);

  const DistanceReport rep = sliced_wasserstein(gen.x, ref, o.projections, rng);
  std::cout << "sw-distance " << plan.source << " vs " << o.dataset << ": "
            << format_double(rep.value) << " (" << o.projections << " projections)\n";

  if (!o.out.empty()) {
    const fs::path dir = ensure_out_dir(o.out);
    json j = rep.to_json();
    j["plan"] = plan.source;
    j["dataset"] = o.dataset;
    j["n"] = o.n;
    j["m"] = o.m;
    j["nfe"] = nfe_json(gen.nfe);
    write_json_file(dir / "distance.json", j);
    std::map<std::string, std::string> hashes;
    hashes[o.checkpoint] = file_hash(o.checkpoint);
    if (!o.refiner.empty()) hashes[o.refiner] = file_hash(o.refiner);
    json cfg;
    cfg["checkpoint"] = o.checkpoint;
    if (!o.refiner.empty()) cfg["refiner"] = o.refiner;
    cfg["plan"] = o.plan;
    cfg["dataset"] = o.dataset;
    cfg["n"] = o.n;
    cfg["m"] = o.m;
    cfg["projections"] = o.projections;
    cfg["label"] = o.label;
    cfg["zeta"] = o.zeta;
    write_run_manifest(dir, "verify sw-distance", cfg, o.seed, std::move(hashes));
  }

  if (!std::isnan(o.assert_max) && rep.value > o.assert_max)
    throw CheckFailure("sw distance " + std::to_string(rep.value) + " exceeds " +
                       std::to_string(o.assert_max));
}

// ---- bench -----------------------------------------------------------------

struct BenchOpts {
  std::string out, config;
  std::string checkpoint, refiner;
  std::vector<std::string> plans = {"H8", "H2P4R2", "H1P5R3"};
  std::vector<int> batches = {64, 1024};
  int reps = 5;
  int label = -1;
  double zeta = 1.5;
  double min_ms = 4.0;
  std::uint64_t seed = 0;
};

void run_bench(CLI::App* sub, BenchOpts& o) {
  ConfigOverlay overlay(sub);
  std::optional<std::uint64_t> cfg_seed;
  overlay.bind("checkpoint", "--checkpoint", o.checkpoint)
      .bind("refiner", "--refiner", o.refiner)
      .bind("plans", "--plan", o.plans)
      .bind("batches", "--batch", o.batches)
      .bind("reps", "--reps", o.reps)
      .bind("label", "--label", o.label)
      .bind("zeta", "--zeta", o.zeta)
      .bind("min_ms", "--min-ms", o.min_ms);
  overlay.apply(o.config, cfg_seed);
  o.seed = resolve_seed(sub->count("--seed") > 0, o.seed, cfg_seed);

  if (o.reps < 1) throw ValidationError("--reps must be positive");
  if (o.reps == 1)
    std::cerr << "bench: warning: --reps 1 gives unstable medians, consider 5 or more\n";
  const DenseNet net = load_net(o.checkpoint, NetKind::Velocity, "--checkpoint");
  std::optional<DenseNet> refiner;
  if (!o.refiner.empty()) refiner = load_net(o.refiner, NetKind::Refiner, "--refiner");
  const DenseNet* rptr = refiner ? &*refiner : nullptr;

  CsvBuilder csv({"plan", "batch", "reps", "inner", "interpreted_ms", "compiled_ms", "ratio",
                  "base_evals", "interpreted_dispatches", "compiled_dispatches"});
  Rng rng(o.seed);
  std::cout << "plan        batch   interp_ms   compiled_ms   ratio\n";
  for (const std::string& plan_text : o.plans) {
    for (int batch : o.batches) {
      if (batch < 1) throw ValidationError("--batch must be positive");
      SamplePlan plan = parse_plan(plan_text);
      plan.guidance.zeta = o.zeta;
      plan.guidance.labels = build_labels(batch, net.cfg.num_classes, o.label);
      Mat noise(batch, net.cfg.data_dim);
      rng.fill_normal(noise);
      CompiledPlan cp = compile(plan);

      auto run_interp = [&] { return run_plan(plan, net, rptr, noise, plan.guidance); };
      auto run_comp = [&] { return cp.run(net, rptr, noise); };

      const NfeCounters nfe_i = run_interp().nfe;  // warm-up, and counters
      const NfeCounters nfe_c = run_comp().nfe;

      auto time_ms = [](auto&& f, int inner) {
        const auto t0 = std::chrono::steady_clock::now();
        for (int i = 0; i < inner; ++i) f();
        const auto t1 = std::chrono::steady_clock::now();
        return std::chrono::duration<double, std::milli>(t1 - t0).count() / inner;
      };

      const double probe = time_ms(run_interp, 1);
      const int inner =
          std::max(1, static_cast<int>(std::ceil(o.min_ms / std::max(probe, 1e-3))));

      std::vector<double> ti, tc;
      for (int r = 0; r < o.reps; ++r) {
        ti.push_back(time_ms(run_interp, inner));
        tc.push_back(time_ms(run_comp, inner));
      }
      const double mi = median(ti), mc = median(tc);
      const double ratio = mc / mi;

      csv.cell(plan_text);
      csv.cell(batch);
      csv.cell(o.reps);
      csv.cell(inner);
      csv.cell(mi);
      csv.cell(mc);
      csv.cell(ratio);
      csv.cell(static_cast<std::int64_t>(nfe_c.base_evals));
      csv.cell(static_cast<std::int64_t>(nfe_i.base_dispatches));
      csv.cell(static_cast<std::int64_t>(nfe_c.base_dispatches));
      csv.end_row();

      char line[128];
      std::snprintf(line, sizeof line, "%-10s %6d %11.3f %13.3f %7.3f\n", plan_text.c_str(),
                    batch, mi, mc, ratio);
      std::cout << line;
    }
  }

  const fs::path dir = ensure_out_dir(o.out);
  atomic_write_file(dir / "bench.csv", csv.str());
  std::map<std::string, std::string> hashes;
  hashes[o.checkpoint] = file_hash(o.checkpoint);
  if (!o.refiner.empty()) hashes[o.refiner] = file_hash(o.refiner);
  json cfg;
  cfg["checkpoint"] = o.checkpoint;
  if (!o.refiner.empty()) cfg["refiner"] = o.refiner;
  cfg["plans"] = o.plans;
  cfg["batches"] = o.batches;
  cfg["reps"] = o.reps;
  cfg["label"] = o.label;
  cfg["zeta"] = o.zeta;
  cfg["min_ms"] = o.min_ms;
  write_run_manifest(dir, "bench", cfg, o.seed, std::move(hashes));
  std::cout << "wrote " << (dir / "bench.csv").string() << "\n";
}

// ---- data ------------------------------------------------------------------

struct DataOpts {
  std::string out, config;
  std::string dataset = "moons";
  int n = 2000;
  std::uint64_t seed = 0;
};

void run_data(CLI::App* sub, DataOpts& o) {
  ConfigOverlay overlay(sub);
  std::optional<std::uint64_t> cfg_seed;
  overlay.bind("dataset", "--dataset", o.dataset).bind("n", "--n", o.n);
  overlay.apply(o.config, cfg_seed);
  o.seed = resolve_seed(sub->count("--seed") > 0, o.seed, cfg_seed);

  if (o.n < 1) throw ValidationError("--n must be positive");
  const Dataset data = Dataset::from_name(o.dataset);
  Rng rng(o.seed);
  Mat x;
  std::vector<int> y;
  data.sample(o.n, rng, x, y);

  const fs::path dir = ensure_out_dir(o.out);
  atomic_write_file(dir / "data.csv", points_csv(x, y));
  atomic_write_file(dir / "data.ppm", render_ppm(x, 512, 512));
  json cfg;
  cfg["dataset"] = o.dataset;
  cfg["n"] = o.n;
  write_run_manifest(dir, "data", cfg, o.seed, {});
  std::cout << "wrote " << o.n << " " << o.dataset << " points to "
            << (dir / "data.csv").string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  g_start = std::chrono::steady_clock::now();
  CLI::App app{"flowturbo: a flow-matching sampling toolkit"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  auto train_opts = std::make_shared<TrainOpts>();
  CLI::App* train = app.add_subcommand("train", "Train a velocity or refiner net");
  train->add_option("--out", train_opts->out, "Output directory")->required();
  train->add_option("--kind", train_opts->kind, "velocity or refiner");
  train->add_option("--dataset", train_opts->dataset, "moons, ring, checkerboard or spiral");
  train->add_option("--schedule", train_opts->schedule, "linear or cosine");
  train->add_option("--base", train_opts->base, "Velocity checkpoint (refiner training)");
  train->add_option("--steps", train_opts->tcfg.steps, "Optimizer steps");
  train->add_option("--batch-size", train_opts->tcfg.batch_size, "Batch size");
  train->add_option("--lr", train_opts->tcfg.lr, "Learning rate");
  train->add_option("--grad-clip", train_opts->tcfg.grad_clip, "Global-norm clip, <=0 disables");
  train->add_option("--cond-dropout", train_opts->tcfg.cond_dropout, "Label dropout rate");
  train->add_option("--dt-lo", train_opts->tcfg.dt_lo, "Refiner carry-step lower bound");
  train->add_option("--dt-hi", train_opts->tcfg.dt_hi, "Refiner carry-step upper bound");
  train->add_option("--log-every", train_opts->tcfg.log_every, "Loss log stride");
  train->add_option("--hidden", train_opts->hidden, "Hidden layer widths")->delimiter(',');
  train->add_option("--time-dim", train_opts->time_dim, "Sin/cos time feature pairs");
  train->add_option("--cond-dim", train_opts->cond_dim, "Label embedding width");
  train->add_option("--seed", train_opts->seed, "RNG seed");
  train->add_option("--config", train_opts->config, "JSON config file");
  train->callback([train, train_opts] { run_train(train, *train_opts); });

  auto sample_opts = std::make_shared<SampleOpts>();
  CLI::App* sample = app.add_subcommand("sample", "Generate samples with a block plan");
  sample->add_option("--out", sample_opts->out, "Output directory")->required();
  sample->add_option("--checkpoint", sample_opts->checkpoint, "Velocity checkpoint")->required();
  sample->add_option("--refiner", sample_opts->refiner, "Refiner checkpoint");
  sample->add_option("--plan", sample_opts->plan, "Plan text, e.g. H8 or H2P4R2");
  sample->add_option("--batch", sample_opts->batch, "Number of samples");
  sample->add_option("--label", sample_opts->label, "Class label, -1 cycles classes");
  sample->add_option("--zeta", sample_opts->zeta, "Guidance weight");
  sample->add_flag("--interpreted", sample_opts->interpreted, "Use the reference sampler");
  sample->add_option("--seed", sample_opts->seed, "RNG seed");
  sample->add_option("--config", sample_opts->config, "JSON config file");
  sample->callback([sample, sample_opts] { run_sample(sample, *sample_opts); });

  CLI::App* verify = app.add_subcommand("verify", "Numerical verification reports");
  verify->require_subcommand(1);

  auto order_opts = std::make_shared<OrderOpts>();
  CLI::App* order = verify->add_subcommand("order", "Empirical convergence order");
  order->add_option("--solver", order_opts->solver, "euler, heun, pseudo or all");
  order->add_option("--field", order_opts->field, "decay, constant or affine");
  order->add_option("--steps", order_opts->steps, "Comma list of step counts");
  order->add_option("--lambda", order_opts->lambda, "Decay rate for the decay field");
  order->add_option("--rate", order_opts->rate, "Contraction rate for the affine field");
  order->add_option("--batch", order_opts->batch, "Number of start states");
  order->add_option("--assert-min", order_opts->assert_min, "Fail if slope below");
  order->add_option("--assert-max", order_opts->assert_max, "Fail if slope above");
  order->add_option("--out", order_opts->out, "Output directory (optional)");
  order->add_option("--seed", order_opts->seed, "RNG seed");
  order->add_option("--config", order_opts->config, "JSON config file");
  order->callback([order, order_opts] { run_verify_order(order, *order_opts); });

  auto curv_opts = std::make_shared<CurvatureOpts>();
  CLI::App* curv = verify->add_subcommand("curvature", "Velocity vs noise curvature");
  curv->add_option("--checkpoint", curv_opts->checkpoint, "Velocity checkpoint")->required();
  curv->add_option("--refiner", curv_opts->refiner, "Refiner checkpoint");
  curv->add_option("--plan", curv_opts->plan, "Plan text");
  curv->add_option("--batch", curv_opts->batch, "Samples per noise draw");
  curv->add_option("--noises", curv_opts->noises, "Independent noise draws");
  curv->add_option("--label", curv_opts->label, "Class label, -1 cycles classes");
  curv->add_option("--zeta", curv_opts->zeta, "Guidance weight");
  curv->add_flag("--assert", curv_opts->check, "Fail unless velocity mean < epsilon mean");
  curv->add_option("--out", curv_opts->out, "Output directory (optional)");
  curv->add_option("--seed", curv_opts->seed, "RNG seed");
  curv->add_option("--config", curv_opts->config, "JSON config file");
  curv->callback([curv, curv_opts] { run_verify_curvature(curv, *curv_opts); });

  auto id_opts = std::make_shared<IdentityOpts>();
  CLI::App* ident = verify->add_subcommand("loss-identity", "Velocity/noise loss identity");
  ident->add_option("--checkpoint", id_opts->checkpoint, "Velocity checkpoint (random net if absent)");
  ident->add_option("--schedule", id_opts->schedule, "linear, cosine or both");
  ident->add_option("--tuples", id_opts->tuples, "Number of (x0, eps, t) tuples");
  ident->add_option("--t-max", id_opts->t_max, "Largest corruption time tested");
  ident->add_option("--assert-max", id_opts->assert_max, "Fail if residual above");
  ident->add_option("--out", id_opts->out, "Output directory (optional)");
  ident->add_option("--seed", id_opts->seed, "RNG seed");
  ident->add_option("--config", id_opts->config, "JSON config file");
  ident->callback([ident, id_opts] { run_verify_identity(ident, *id_opts); });

  auto sw_opts = std::make_shared<SwOpts>();
  CLI::App* sw = verify->add_subcommand("sw-distance", "Sliced W2 against a dataset");
  sw->add_option("--checkpoint", sw_opts->checkpoint, "Velocity checkpoint")->required();
  sw->add_option("--refiner", sw_opts->refiner, "Refiner checkpoint");
  sw->add_option("--plan", sw_opts->plan, "Plan text")->required();
  sw->add_option("--dataset", sw_opts->dataset, "Reference dataset");
  sw->add_option("--n", sw_opts->n, "Generated sample count");
  sw->add_option("--m", sw_opts->m, "Reference sample count");
  sw->add_option("--projections", sw_opts->projections, "Random projections");
  sw->add_option("--label", sw_opts->label, "Class label, -1 cycles classes");
  sw->add_option("--zeta", sw_opts->zeta, "Guidance weight");
  sw->add_option("--assert-max", sw_opts->assert_max, "Fail if distance above");
  sw->add_option("--out", sw_opts->out, "Output directory (optional)");
  sw->add_option("--seed", sw_opts->seed, "RNG seed");
  sw->add_option("--config", sw_opts->config, "JSON config file");
  sw->callback([sw, sw_opts] { run_verify_sw(sw, *sw_opts); });

  auto bench_opts = std::make_shared<BenchOpts>();
  CLI::App* bench = app.add_subcommand("bench", "Interpreted vs compiled plan timing");
  bench->add_option("--out", bench_opts->out, "Output directory")->required();
  bench->add_option("--checkpoint", bench_opts->checkpoint, "Velocity checkpoint")->required();
  bench->add_option("--refiner", bench_opts->refiner, "Refiner checkpoint");
  bench->add_option("--plan", bench_opts->plans, "Plan rows (repeatable)")->delimiter(',');
  bench->add_option("--batch", bench_opts->batches, "Batch sizes (repeatable)")->delimiter(',');
  bench->add_option("--reps", bench_opts->reps, "Timing repetitions per row");
  bench->add_option("--label", bench_opts->label, "Class label, -1 cycles classes");
  bench->add_option("--zeta", bench_opts->zeta, "Guidance weight");
  bench->add_option("--min-ms", bench_opts->min_ms, "Amortize each timing to at least this");
  bench->add_option("--seed", bench_opts->seed, "RNG seed");
  bench->add_option("--config", bench_opts->config, "JSON config file");
  bench->callback([bench, bench_opts] { run_bench(bench, *bench_opts); });

  auto data_opts = std::make_shared<DataOpts>();
  CLI::App* data = app.add_subcommand("data", "Draw dataset samples to CSV");
  data->add_option("--out", data_opts->out, "Output directory")->required();
  data->add_option("--dataset", data_opts->dataset, "moons, ring, checkerboard or spiral");
  data->add_option("--n", data_opts->n, "Sample count");
  data->add_option("--seed", data_opts->seed, "RNG seed");
  data->add_option("--config", data_opts->config, "JSON config file");
  data->callback([data, data_opts] { run_data(data, *data_opts); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const TrainingDivergence& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const CheckFailure& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return 3;
  } catch (const PlanParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
