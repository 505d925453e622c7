// cdim: batch runner and single-shot tools for constrained diffusion sampling.
//
//   cdim run            --config cfg.json [--out DIR] [--seeds 1,2,3] [--resume] [--jobs N] [--format csv|jsonl]
//   cdim sample         --config cfg.json --seed S --out x.bin
//   cdim solve          --config cfg.json --seed S --out x.bin [--y y.bin] [--trajectory t.csv]
//   cdim calibrate      --config cfg.json --out profile.csv
//   cdim oracle-compare --config cfg.json [--jobs N]
//   cdim benchmark      --config cfg.json [--out DIR] [--seeds ...] [--jobs N]
//
// Exit codes: 0 ok, 1 config error, 2 partial failures.

#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cdim/experiment.hpp"

using namespace cdim;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kPartialFailure = 2;

struct Options {
  std::string config;
  std::string out;
  std::vector<std::uint64_t> seeds;
  bool resume = false;
  int jobs = 1;
  std::string format;
  std::uint64_t seed = 0;
  std::string y_path;
  std::string trajectory;
};

ExperimentConfig load(const Options& o) {
  ExperimentConfig c = load_config(o.config);
  if (!o.seeds.empty()) c.seeds = o.seeds;
  if (!o.format.empty()) {
    if (o.format != "csv" && o.format != "jsonl") throw ConfigError("--format must be csv or jsonl");
    c.format = o.format;
  }
  return c;
}

int cmd_run(const Options& o) {
  ExperimentConfig c = load(o);
  if (!o.out.empty()) c.out_dir = o.out;
  const auto sum = run_experiment(c, o.jobs, o.resume);
  std::cerr << "wrote " << sum.rows.size() << " rows to " << sum.results_path;
  if (sum.skipped) std::cerr << " (" << sum.skipped << " resumed)";
  std::cerr << "\n";
  if (sum.failed == 0) return kOk;
  std::cerr << sum.failed << " of " << sum.rows.size() << " cells failed:\n";
  for (const auto& r : sum.rows)
    if (r.status != "ok") std::cerr << "  seed " << r.seed << " " << r.algorithm << " T'=" << r.t_prime << ": " << r.status << "\n";
  return kPartialFailure;
}

int cmd_sample(const Options& o) {
  const ExperimentConfig c = load(o);
  const Problem p = build_problem(c);
  save_signal(ddim_sample(*p.model, p.schedule, c.solver.delta, o.seed), o.out);
  return kOk;
}

int cmd_solve(const Options& o) {
  const ExperimentConfig c = load(o);
  const Problem p = build_problem(c);
  const Vec truth = p.ground_truth(o.seed);
  const Vec y = o.y_path.empty() ? observe(p.op, truth, c.noise, p.noise_seed(o.seed)) : load_signal(o.y_path);
  if (y.size() != p.op.d())
    throw ConfigError("--y: observation has " + std::to_string(y.size()) + " entries, operator expects " +
                      std::to_string(p.op.d()));
  SolverConfig s = c.solver;
  if (s.step_mode == StepSizeMode::calibrated_expectation && s.K > 0) s.grad_profile = profile_for(c, p, s);
  const SolveResult res = cdim_solve(*p.model, p.schedule, p.op, y, c.constraint, s, o.seed);
  save_signal(res.x0, o.out);
  if (!o.trajectory.empty()) write_trajectory(res, o.trajectory);

  ResultRow row;
  row.seed = o.seed;
  row.task = c.name;
  row.algorithm = c.constraint.objective == Objective::l2 ? "cdim_l2" : "cdim_kl";
  row.t_prime = static_cast<int>(res.trajectory.size());
  row.K = s.K;
  row.model_evals = res.model_evals;
  row.wall_time_s = res.wall_time;
  for (const auto& st : res.trajectory) row.early_stops += st.early_stopped ? 1 : 0;
  fill_metrics(row, c.constraint, p.op, y, res.x0, truth);
  std::cout << csv_header() << "\n" << to_csv(row) << "\n";
  return kOk;
}

int cmd_calibrate(const Options& o) {
  const ExperimentConfig c = load(o);
  const Problem p = build_problem(c);
  const auto prof = calibrate(*p.model, p.schedule, p.op, c.constraint, c.noise, c.solver,
                              sample_gmm(p.truth, c.calibration.samples, c.calibration.set_seed), c.calibration.seed);
  save_profile(prof, o.out);
  std::cerr << "profile for [" << prof.fingerprint.describe() << "] written to " << o.out << "\n";
  return kOk;
}

int cmd_oracle_compare(const Options& o) {
  const ExperimentConfig c = load(o);
  const auto rep = oracle_compare(c, o.jobs);
  std::printf("{\"samples\": %zu, \"energy_distance\": %.10g, \"null_q99\": %.10g, \"pass\": %s}\n", rep.samples,
              rep.energy, rep.threshold, rep.pass ? "true" : "false");
  return kOk;
}

int cmd_benchmark(const Options& o) {
  ExperimentConfig c = load(o);
  if (c.sweep_t_prime.empty()) throw ConfigError("benchmark: config needs a 'sweep' section");
  c.out_dir = o.out.empty() ? c.out_dir + "/benchmark" : o.out;
  c.trajectories = false;
  const auto sum = run_experiment(c, o.jobs, false);

  struct Agg {
    int K = 0;
    long evals_min = 0, evals_max = 0;
    double time = 0.0;
    int n = 0, early = 0;
  };
  std::map<int, Agg> by_tp;
  for (const auto& r : sum.rows) {
    if (r.algorithm == "ddim" || r.status != "ok") continue;
    auto& a = by_tp[r.t_prime];
    if (a.n == 0) a.evals_min = a.evals_max = r.model_evals;
    a.K = r.K;
    a.evals_min = std::min(a.evals_min, r.model_evals);
    a.evals_max = std::max(a.evals_max, r.model_evals);
    a.time += r.wall_time_s;
    a.early += r.early_stops > 0;
    ++a.n;
  }
  bool mismatch = false;
  std::printf("t_prime,K,expected_evals,model_evals_min,model_evals_max,mean_wall_time_s,runs,early_stopped_runs\n");
  for (const auto& [tp, a] : by_tp) {
    const long expected = static_cast<long>(tp) * (a.K + 1);
    std::printf("%d,%d,%ld,%ld,%ld,%.6g,%d,%d\n", tp, a.K, expected, a.evals_min, a.evals_max, a.time / a.n, a.n,
                a.early);
    if (a.early == 0 && (a.evals_min != expected || a.evals_max != expected)) mismatch = true;
  }
  if (mismatch) std::cerr << "model_evals differ from T'(K+1) on runs without early stopping\n";
  return sum.failed == 0 && !mismatch ? kOk : kPartialFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Constrained diffusion sampling for linear inverse problems"};
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* s) { s->add_option("--config", o.config, "JSON experiment config")->required()->check(CLI::ExistingFile); };
  auto add_batch = [&](CLI::App* s) {
    s->add_option("--out", o.out, "output directory");
    s->add_option("--seeds", o.seeds, "comma-separated seeds (overrides the config)")->delimiter(',');
    s->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
  };

  auto* run = app.add_subcommand("run", "run every (seed x task) cell and write result rows");
  add_config(run);
  add_batch(run);
  run->add_flag("--resume", o.resume, "skip cells that already have a result file");
  run->add_option("--format", o.format, "csv or jsonl");

  auto* sample = app.add_subcommand("sample", "unconditional DDIM sample");
  add_config(sample);
  sample->add_option("--seed", o.seed)->required();
  sample->add_option("--out", o.out, "signal file (.csv or raw f64)")->required();

  auto* solve = app.add_subcommand("solve", "single constrained solve");
  add_config(solve);
  solve->add_option("--seed", o.seed)->required();
  solve->add_option("--out", o.out, "signal file (.csv or raw f64)")->required();
  solve->add_option("--y", o.y_path, "observation file; synthesised from the config when absent")->check(CLI::ExistingFile);
  solve->add_option("--trajectory", o.trajectory, "per-step trajectory CSV");

  auto* cal = app.add_subcommand("calibrate", "estimate the gradient-magnitude profile");
  add_config(cal);
  cal->add_option("--out", o.out, "profile CSV")->required();

  auto* oc = app.add_subcommand("oracle-compare", "compare solver samples with the exact posterior");
  add_config(oc);
  oc->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);

  auto* bench = app.add_subcommand("benchmark", "evaluation-count and wall-time sweep");
  add_config(bench);
  add_batch(bench);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*run) return cmd_run(o);
    if (*sample) return cmd_sample(o);
    if (*solve) return cmd_solve(o);
    if (*cal) return cmd_calibrate(o);
    if (*oc) return cmd_oracle_compare(o);
    if (*bench) return cmd_benchmark(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ParameterError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kPartialFailure;
  }
  return kOk;
}
