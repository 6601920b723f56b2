#include "cli/commands.hpp"

#include <CLI11.hpp>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "cli/config.hpp"
#include "cli/report.hpp"
#include "surelock/analysis.hpp"
#include "surelock/errors.hpp"

namespace surelock::cli {

using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitInvariant = 3;

// Run invariants failed after the run completed.
struct InvariantFailure : Error {
  using Error::Error;
};

// Flag values layered on top of the config file.
struct Overrides {
  std::string config_path;
  std::optional<std::string> mode, weights, out;
  std::optional<double> eps, percentile, k, temperature, scale, init_std;
  std::optional<int> n_prompt, n_gen, steps, block_length;
  std::optional<uint64_t> seed, weights_seed;
  bool no_gate = false, unlock = false, emit_logits = false;
  std::optional<int> probe_period, min_locked_steps, cooldown;
  std::optional<double> eps_unlock, relock_factor;

  void add_to(CLI::App* app) {
    app->add_option("-c,--config", config_path, "JSON experiment config");
    app->add_option("--mode", mode, "baseline | surelock | selection | hybrid");
    app->add_option("--weights", weights, "Weights JSON file (default: seeded init)");
    app->add_option("--weights-seed", weights_seed, "Seed for initialized weights");
    app->add_option("--init-std", init_std, "Std of initialized weights");
    app->add_option("--eps", eps, "KL lock threshold");
    app->add_option("--percentile", percentile, "Confidence gate percentile m");
    app->add_flag("--no-gate", no_gate, "Disable the confidence gate");
    app->add_option("--k", k, "Computed fraction for selection/hybrid");
    app->add_option("--n-prompt", n_prompt, "Prompt length");
    app->add_option("--n-gen", n_gen, "Generated length");
    app->add_option("--steps", steps, "Diffusion steps");
    app->add_option("--block-length", block_length, "Block length (0: one block)");
    app->add_option("--temperature", temperature, "Sampling temperature");
    app->add_option("--seed", seed, "Run seed");
    app->add_option("--scale", scale, "Uniform weight multiplier");
    app->add_flag("--unlock", unlock, "Enable the unlock probe");
    app->add_option("--probe-period", probe_period, "Unlock probe period P");
    app->add_option("--eps-unlock", eps_unlock, "Unlock drift threshold");
    app->add_option("--min-locked-steps", min_locked_steps, "Minimum locked duration");
    app->add_option("--cooldown", cooldown, "Re-lock cooldown");
    app->add_option("--relock-factor", relock_factor, "Re-lock threshold factor");
    app->add_flag("--emit-logits", emit_logits, "Store per-step logits in the trace");
    app->add_option("-o,--out", out, "Output directory");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    RunConfig& r = cfg.run;
    LockPolicy& p = r.policy;
    if (mode) r.mode = parse_mode(*mode);
    if (weights) cfg.weights_path = *weights;
    if (weights_seed) cfg.weights_seed = *weights_seed;
    if (init_std) cfg.init_std = *init_std;
    if (eps) p.eps = *eps;
    if (percentile) p.percentile = *percentile;
    if (no_gate) p.gate_enabled = false;
    if (k) p.fraction = *k;
    if (n_prompt) r.n_prompt = *n_prompt;
    if (n_gen) r.n_gen = *n_gen;
    if (steps) r.steps = *steps;
    if (block_length) r.block_length = *block_length;
    if (temperature) r.temperature = *temperature;
    if (seed) r.seed = *seed;
    if (scale) r.scale = *scale;
    if (unlock) p.unlock.enabled = true;
    if (probe_period) p.unlock.probe_period = *probe_period;
    if (eps_unlock) p.unlock.eps_unlock = *eps_unlock;
    if (min_locked_steps) p.unlock.min_locked_steps = *min_locked_steps;
    if (cooldown) p.unlock.cooldown = *cooldown;
    if (relock_factor) p.unlock.relock_factor = *relock_factor;
    if (emit_logits) cfg.emit_logits = true;
    if (out) cfg.out_dir = *out;
    return cfg;
  }
};

struct Prepared {
  ExperimentConfig cfg;
  Weights weights;
  std::vector<TokenId> prompt;
};

Prepared prepare(const ExperimentConfig& cfg) {
  validate(cfg);
  Prepared p{cfg, build_weights(cfg), {}};
  p.cfg.model = p.weights.config;
  p.cfg.run.record_logits = p.cfg.run.record_logits || cfg.emit_logits;
  p.cfg.run.validate(p.weights.config);
  p.prompt = make_prompt(p.weights.config, cfg.run.n_prompt, cfg.run.seed);
  return p;
}

RunResult run_checked(const Prepared& p) {
  RunResult run = run_sampler(p.cfg.run, p.weights, p.prompt);
  const auto issues = check_trace_invariants(run, p.cfg.run.mode);
  if (!issues.empty()) {
    std::string msg = "run invariants violated:";
    for (const auto& s : issues) msg += "\n  " + s;
    throw InvariantFailure(msg);
  }
  return run;
}

int cmd_run(const Overrides& o, std::ostream& out) {
  ExperimentConfig cfg = o.resolve();
  const Prepared p = prepare(cfg);
  const RunResult run = run_checked(p);
  write_run_outputs(run, p.cfg, p.cfg.out_dir);
  out << "mode " << to_string(p.cfg.run.mode) << ", N " << run.n << ", steps " << run.trace.size() << "\n";
  out << "F_base " << run.flops.total_base << ", F_actual " << run.flops.total_actual << ", ratio "
      << format_double(run.flops.total_ratio) << ", r_bar " << format_double(run.flops.active_ratio) << "\n";
  out << "wrote " << p.cfg.out_dir << "\n";
  return kExitOk;
}

struct SweepArgs {
  std::vector<double> eps, percentile;
  std::vector<int> steps, n_gen;
  std::vector<uint64_t> seeds;
  int workers = 1;
  std::string csv;
};

struct SweepPoint {
  double eps, percentile;
  int steps, n_gen;
  uint64_t seed;
};

std::string sweep_row(const SweepPoint& pt, const ExperimentConfig& cfg, const RunResult& run) {
  size_t locks = 0, unlocks = 0, relocks = 0;
  for (const auto& e : run.events) {
    if (e.kind == LockEventKind::kLock) ++locks;
    if (e.kind == LockEventKind::kUnlock) ++unlocks;
    if (e.kind == LockEventKind::kRelock) ++relocks;
  }
  std::ostringstream row;
  row << pt.seed << ',' << format_double(pt.eps) << ',' << format_double(pt.percentile) << ',' << pt.steps << ','
      << pt.n_gen << ',' << to_string(cfg.run.mode) << ',' << run.flops.total_base << ',' << run.flops.total_actual
      << ',' << format_double(run.flops.total_ratio) << ',' << format_double(run.flops.active_ratio) << ',' << locks
      << ',' << unlocks << ',' << relocks << '\n';
  return row.str();
}

int cmd_sweep(const Overrides& o, const SweepArgs& a, std::ostream& out) {
  const ExperimentConfig base = o.resolve();
  if (a.eps.empty() && a.percentile.empty() && a.steps.empty() && a.n_gen.empty() && a.seeds.empty())
    throw InvalidConfig("sweep: empty grid (give at least one of --eps-list, --percentile-list, --steps-list, "
                        "--n-gen-list, --seeds)");
  if (a.workers < 1) throw InvalidConfig("sweep: --workers must be >= 1");
  auto or_base = [](auto list, auto value) { return list.empty() ? decltype(list){value} : list; };
  const auto eps = or_base(a.eps, base.run.policy.eps);
  const auto pct = or_base(a.percentile, base.run.policy.percentile);
  const auto steps = or_base(a.steps, base.run.steps);
  const auto ngen = or_base(a.n_gen, base.run.n_gen);
  const auto seeds = or_base(a.seeds, base.run.seed);

  std::vector<SweepPoint> grid;
  for (double e : eps)
    for (double m : pct)
      for (int s : steps)
        for (int g : ngen)
          for (uint64_t sd : seeds) grid.push_back({e, m, s, g, sd});

  // Validate every point up front so a bad grid fails before any work.
  std::vector<ExperimentConfig> cfgs;
  for (const auto& pt : grid) {
    ExperimentConfig c = base;
    c.run.policy.eps = pt.eps;
    c.run.policy.percentile = pt.percentile;
    c.run.steps = pt.steps;
    c.run.n_gen = pt.n_gen;
    c.run.seed = pt.seed;
    validate(c);
    cfgs.push_back(std::move(c));
  }
  const Weights w = build_weights(base);
  for (const auto& c : cfgs) c.run.validate(w.config);

  std::vector<std::string> rows(grid.size());
  std::atomic<size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  auto worker = [&] {
    for (size_t i = next++; i < grid.size(); i = next++) {
      try {
        const ExperimentConfig& c = cfgs[i];
        const Prepared p{c, w, make_prompt(w.config, c.run.n_prompt, c.run.seed)};
        rows[i] = sweep_row(grid[i], c, run_checked(p));
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  const size_t n_threads = std::min<size_t>(static_cast<size_t>(a.workers), grid.size());
  std::vector<std::thread> pool;
  for (size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);

  std::string csv = "seed,eps,percentile,steps,n_gen,mode,F_base_total,F_actual_total,flops_ratio,r_bar,locks,"
                    "unlocks,relocks\n";
  for (const auto& r : rows) csv += r;
  const std::string path = a.csv.empty() ? (std::filesystem::path(base.out_dir) / "sweep.csv").string() : a.csv;
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  write_text(path, csv);
  out << grid.size() << " points -> " << path << "\n";
  return kExitOk;
}

struct BoundTally {
  size_t holds = 0, violated = 0, inapplicable = 0, no_lock = 0;

  void add(const BoundReport& r) {
    switch (r.status) {
      case BoundReport::Status::kHolds: ++holds; break;
      case BoundReport::Status::kViolated: ++violated; break;
      case BoundReport::Status::kInapplicable: ++inapplicable; break;
      case BoundReport::Status::kNoLock: ++no_lock; break;
    }
  }
  size_t applicable() const { return holds + violated; }
};

int cmd_verify_bound(const Overrides& o, const std::string& trace_path, std::optional<double> eps_opt,
                     const std::string& report_path, std::ostream& out) {
  StepTrace trace;
  double eps = 0.0;
  if (!trace_path.empty()) {
    trace = read_trace_logits(trace_path);
    eps = eps_opt.value_or(o.resolve().run.policy.eps);
  } else {
    ExperimentConfig cfg = o.resolve();
    cfg.run.mode = Mode::kBaseline;
    cfg.run.record_logits = true;
    eps = eps_opt.value_or(cfg.run.policy.eps);
    const Prepared p = prepare(cfg);
    trace = run_checked(p).trace;
  }
  if (trace.size() < 3) throw InvalidConfig("verify-bound: trace needs at least 3 steps");
  BoundTally tally;
  json reports = json::array();
  for (const auto& traj : trajectories_from_trace(trace)) {
    const BoundReport r = offline_lock_check(traj, eps);
    tally.add(r);
    reports.push_back(bound_json(r, traj.position));
  }
  out << "eps " << format_double(eps) << ": " << tally.holds << "/" << tally.applicable() << " bound holds ("
      << tally.inapplicable << " inapplicable, " << tally.no_lock << " without lock)\n";
  if (!report_path.empty())
    write_text(report_path, json{{"eps", eps}, {"positions", std::move(reports)}}.dump(2) + '\n');
  return tally.violated == 0 ? kExitOk : kExitInvariant;
}

struct SimulateArgs {
  int count = 200;
  uint64_t seed = 0;
  int steps = 16;
  double magnitude = 1.0;
  double eps = std::numeric_limits<double>::infinity();
  std::vector<double> rho{0.3, 0.6, 0.9};
  std::vector<int> vocab{8, 64};
  std::string report;
};

int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  if (a.count < 1) throw InvalidConfig("simulate: --count must be positive");
  if (a.rho.empty() || a.vocab.empty()) throw InvalidConfig("simulate: empty rho or vocab list");
  BoundTally tally;
  json reports = json::array();
  for (int i = 0; i < a.count; ++i) {
    const auto ui = static_cast<size_t>(i);
    const double rho = a.rho[ui % a.rho.size()];
    const int vocab = a.vocab[(ui / a.rho.size()) % a.vocab.size()];
    const Trajectory traj = simulate_trajectory(a.seed + ui, vocab, a.steps, rho, a.magnitude);
    const BoundReport r = offline_lock_check(traj, a.eps);
    tally.add(r);
    json j = bound_json(r, ui);
    j["rho_target"] = rho;
    j["vocab"] = vocab;
    reports.push_back(std::move(j));
  }
  out << tally.holds << "/" << tally.applicable() << " bound holds (" << tally.inapplicable << " inapplicable, "
      << tally.no_lock << " without lock)\n";
  if (!a.report.empty()) write_text(a.report, reports.dump(2) + '\n');
  return tally.violated == 0 ? kExitOk : kExitInvariant;
}

struct ConstantsArgs {
  std::optional<double> radius;
  double kappa = 0.0;
  std::optional<int> n;
  int samples = 10000;
  uint64_t seed = 7;
  std::string report;
};

int cmd_constants(const Overrides& o, const ConstantsArgs& a, std::ostream& out) {
  const Prepared p = prepare(o.resolve());
  const int n = a.n.value_or(p.cfg.run.n_prompt + p.cfg.run.n_gen);
  double radius = 0.0;
  if (a.radius) {
    radius = *a.radius;
  } else {
    // Calibration forward over a fully masked continuation of the prompt.
    std::vector<TokenId> tokens = p.prompt;
    tokens.resize(static_cast<size_t>(p.cfg.run.n_prompt + p.cfg.run.n_gen), p.weights.config.mask_id());
    radius = calibrate_radius(p.weights, tokens);
  }
  const Constants c = constants_at_a_glance(p.weights, radius, a.kappa, n, a.samples, a.seed);
  json j = constants_json(c);
  j["softmax_jacobian_sup"] = softmax_jacobian_sup(10000, a.seed);
  j["radius_source"] = a.radius ? "flag" : "calibration";
  out << j.dump(2) << "\n";
  if (!a.report.empty()) write_text(a.report, j.dump(2) + '\n');
  return kExitOk;
}

struct FlopsCase {
  std::string name;
  ModelConfig model;
  RunConfig run;
};

std::vector<FlopsCase> builtin_flops_cases() {
  std::vector<FlopsCase> out;
  ModelConfig worked;
  worked.vocab = 8;
  worked.d_model = 8;
  worked.n_layers = 2;
  worked.n_heads = 2;
  worked.n_kv_heads = 2;
  worked.d_ff = 16;
  worked.max_seq = 8;
  RunConfig small;
  small.n_prompt = 2;
  small.n_gen = 2;
  small.steps = 2;
  out.push_back({"worked", worked, small});

  out.push_back({"toy", ModelConfig{}, RunConfig{}});

  ModelConfig grouped;
  grouped.n_kv_heads = 1;
  grouped.d_ff = 48;
  RunConfig mid;
  mid.n_prompt = 8;
  mid.n_gen = 24;
  mid.steps = 12;
  out.push_back({"grouped-kv", grouped, mid});
  return out;
}

int cmd_flops_check(const std::vector<std::string>& config_paths, double init_std, std::ostream& out) {
  std::vector<FlopsCase> cases = builtin_flops_cases();
  for (const auto& path : config_paths) {
    const ExperimentConfig c = load_config(path);
    validate(c);
    const Weights w = build_weights(c);
    cases.push_back({path, w.config, c.run});
  }
  bool all_equal = true;
  for (const auto& fc : cases) {
    const Weights w = init_weights(fc.model, 1, init_std);
    const uint64_t n = static_cast<uint64_t>(fc.run.n_prompt + fc.run.n_gen);
    out << fc.name << ": N " << n << ", F_base per step " << flops_base_step(fc.model, 1, n) << "\n";
    for (Mode m : {Mode::kBaseline, Mode::kSureLock, Mode::kSelection, Mode::kHybrid}) {
      RunConfig rc = fc.run;
      rc.mode = m;
      if ((m == Mode::kSelection || m == Mode::kHybrid) && !rc.policy.fraction) rc.policy.fraction = 0.8;
      rc.validate(fc.model);
      const RunResult run = run_sampler(rc, w, make_prompt(fc.model, rc.n_prompt, rc.seed));
      size_t equal = 0;
      for (const auto& r : run.trace)
        if (r.flops_counted == r.flops_actual && r.flops_actual == flops_step_actual(fc.model, 1, n, r.computed))
          ++equal;
      all_equal = all_equal && equal == run.trace.size();
      out << "  " << to_string(m) << ": counter == formula on " << equal << "/" << run.trace.size()
          << " steps, F_actual";
      for (const auto& r : run.trace) out << ' ' << r.flops_actual;
      out << "\n";
    }
  }
  return all_equal ? kExitOk : kExitInvariant;
}

}  // namespace

int run_command(int argc, char** argv) {
  std::ostream& out = std::cout;
  CLI::App app{"Diffusion LM sampler with KL-gated position locking"};
  app.require_subcommand(1);

  Overrides run_o;
  auto* run = app.add_subcommand("run", "Run the sampler and write trace, plot, summary and timing files");
  run_o.add_to(run);

  Overrides sweep_o;
  SweepArgs sweep_a;
  auto* sweep = app.add_subcommand("sweep", "Cross-product sweep, one CSV row per point");
  sweep_o.add_to(sweep);
  sweep->add_option("--eps-list", sweep_a.eps, "Lock thresholds")->delimiter(',');
  sweep->add_option("--percentile-list", sweep_a.percentile, "Gate percentiles")->delimiter(',');
  sweep->add_option("--steps-list", sweep_a.steps, "Step counts")->delimiter(',');
  sweep->add_option("--n-gen-list", sweep_a.n_gen, "Generation lengths")->delimiter(',');
  sweep->add_option("--seeds", sweep_a.seeds, "Run seeds")->delimiter(',');
  sweep->add_option("--workers", sweep_a.workers, "Parallel workers");
  sweep->add_option("--csv", sweep_a.csv, "CSV path (default <out>/sweep.csv)");

  Overrides verify_o;
  std::string trace_path, verify_report;
  std::optional<double> verify_eps;
  auto* verify = app.add_subcommand("verify-bound", "Check the locking error bound on recorded trajectories");
  verify_o.add_to(verify);
  verify->add_option("--trace", trace_path, "trace.jsonl written with --emit-logits (default: fresh baseline run)");
  verify->add_option("--bound-eps", verify_eps, "Offline lock threshold (default: policy eps)");
  verify->add_option("--report", verify_report, "Per-position JSON report");

  SimulateArgs sim_a;
  auto* sim = app.add_subcommand("simulate", "Bound battery on synthetic contracting trajectories");
  sim->add_option("--count", sim_a.count, "Number of trajectories");
  sim->add_option("--seed", sim_a.seed, "First seed");
  sim->add_option("--steps", sim_a.steps, "Trajectory length");
  sim->add_option("--magnitude", sim_a.magnitude, "Initial displacement");
  sim->add_option("--eps", sim_a.eps, "Offline lock threshold (default inf)");
  sim->add_option("--rho", sim_a.rho, "Contraction targets")->delimiter(',');
  sim->add_option("--vocab", sim_a.vocab, "Vocabulary sizes")->delimiter(',');
  sim->add_option("--report", sim_a.report, "Per-trajectory JSON report");

  Overrides const_o;
  ConstantsArgs const_a;
  auto* cons = app.add_subcommand("constants", "Lipschitz constant composition for the model");
  const_o.add_to(cons);
  cons->add_option("--radius", const_a.radius, "Input radius R_x (default: calibrated)");
  cons->add_option("--kappa", const_a.kappa, "Cross-position ratio kappa");
  cons->add_option("--n", const_a.n, "Sequence length (default n_prompt + n_gen)");
  cons->add_option("--samples", const_a.samples, "Pairs per empirical Lipschitz estimate");
  cons->add_option("--constants-seed", const_a.seed, "Seed for the empirical estimates");
  cons->add_option("--report", const_a.report, "Write the JSON report here as well");

  std::vector<std::string> flops_configs;
  double flops_std = 0.3;
  auto* flops = app.add_subcommand("flops-check", "Compare the GEMM counter with the closed-form FLOPs");
  flops->add_option("--config", flops_configs, "Extra experiment configs to check");
  flops->add_option("--init-std", flops_std, "Std of the initialized weights");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_o, out);
    if (*sweep) return cmd_sweep(sweep_o, sweep_a, out);
    if (*verify) return cmd_verify_bound(verify_o, trace_path, verify_eps, verify_report, out);
    if (*sim) return cmd_simulate(sim_a, out);
    if (*cons) return cmd_constants(const_o, const_a, out);
    if (*flops) return cmd_flops_check(flops_configs, flops_std, out);
  } catch (const InvalidConfig& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InvalidInput& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "invariant violation: " << e.what() << "\n";
    return kExitInvariant;
  }
  return kExitConfig;
}

}  // namespace surelock::cli
