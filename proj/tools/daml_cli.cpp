#include "daml/daml.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

using namespace daml;
using namespace daml::harness;
namespace fs = std::filesystem;

namespace {

// Flags that mirror ExperimentConfig keys. Unset flags keep the value from
// --config (or the nominal defaults of --model).
struct Overrides {
  std::string config_path;
  std::optional<std::string> model;
  std::optional<std::uint64_t> seed;
  std::optional<int> k, ny, spinup, substeps;
  std::optional<double> dt, sigma_y;
  std::optional<std::string> obs_mode;
  std::optional<std::string> scheme, q_variant, hyperprior, mode;
  std::optional<int> n_iter, lag, ne, radius, nc, sweeps, mstep_max_iter;
  std::optional<double> q0, a0_scale, l2, inflation;
  std::optional<int> fs_trials, fs_horizon, ls_steps, psd_steps;
  std::optional<std::string> output_dir;

  void attach(CLI::App* app, bool with_seed = true) {
    app->add_option("--config", config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
    app->add_option("--model", model, "l96 | l05iii");
    if (with_seed) app->add_option("--seed", seed, "master seed (derives every RNG stream)");
    app->add_option("--k", k, "window length K");
    app->add_option("--dt", dt, "observation interval");
    app->add_option("--substeps", substeps, "reference RK4 steps per interval");
    app->add_option("--spinup", spinup, "reference spin-up intervals");
    app->add_option("--ny", ny, "observed sites per time");
    app->add_option("--obs-mode", obs_mode, "full | random_subset");
    app->add_option("--sigma-y", sigma_y, "observation noise std");
    app->add_option("--scheme", scheme, "approximate | full | fixed_q");
    app->add_option("--q-variant", q_variant, "scalar | diagonal | full");
    app->add_option("--hyperprior", hyperprior, "jeffreys | none");
    app->add_option("--mode", mode, "homogeneous | inhomogeneous");
    app->add_option("--n-iter", n_iter, "EM iterations");
    app->add_option("--lag", lag, "smoother lag L");
    app->add_option("--ne", ne, "ensemble size");
    app->add_option("--radius", radius, "stencil radius");
    app->add_option("--nc", nc, "RK4 sub-steps of the surrogate per interval");
    app->add_option("--sweeps", sweeps, "inner (A, Q) sweeps of the full scheme");
    app->add_option("--mstep-max-iter", mstep_max_iter, "L-BFGS iterations per M-step");
    app->add_option("--q0", q0, "initial model-error variance");
    app->add_option("--a0-scale", a0_scale, "half-width of the uniform initial coefficients");
    app->add_option("--l2", l2, "ridge penalty on the coefficients");
    app->add_option("--inflation", inflation, "multiplicative anomaly inflation");
    app->add_option("--fs-trials", fs_trials, "forecast-skill trials");
    app->add_option("--fs-horizon", fs_horizon, "forecast-skill horizon in intervals (0 = ten Lyapunov times)");
    app->add_option("--ls-steps", ls_steps, "Lyapunov averaging steps");
    app->add_option("--psd-steps", psd_steps, "free-run length for the PSD");
    app->add_option("--out", output_dir, "output directory or file");
  }

  ExperimentConfig build() const {
    nlohmann::json j = nlohmann::json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      in >> j;
    }
    if (model) j["model"] = *model;
    if (seed) {
      j["seed"] = *seed;
      j.erase("seeds");
    }
    ExperimentConfig c = config_from_json(j);
    if (k) c.k = *k;
    if (dt) c.dt = *dt;
    if (substeps) c.substeps = *substeps;
    if (spinup) c.spinup = *spinup;
    if (obs_mode) c.obs_mode = parse_obs_mode(*obs_mode);
    if (ny) c.ny = *ny;
    if (sigma_y) c.sigma_y = *sigma_y;
    em::TrainerConfig& t = c.trainer;
    if (scheme) t.scheme = em::parse_scheme(*scheme);
    if (q_variant) t.q_variant = parse_q_variant(*q_variant);
    if (hyperprior) t.hyperprior = em::parse_hyperprior(*hyperprior);
    if (mode) t.mode = surrogate::parse_mode(*mode);
    if (n_iter) t.n_iter = *n_iter;
    if (lag) t.lag = *lag;
    if (ne) t.ne = *ne;
    if (radius) t.radius = *radius;
    if (nc) t.nc = *nc;
    if (sweeps) t.sweeps = *sweeps;
    if (mstep_max_iter) t.mstep_max_iter = *mstep_max_iter;
    if (q0) t.q0 = *q0;
    if (a0_scale) t.a0_scale = *a0_scale;
    if (l2) t.l2 = *l2;
    if (inflation) t.inflation = *inflation;
    if (fs_trials) c.metrics.fs_trials = *fs_trials;
    if (fs_horizon) c.metrics.fs_horizon = *fs_horizon;
    if (ls_steps) c.metrics.ls_steps = *ls_steps;
    if (psd_steps) c.metrics.psd_steps = *psd_steps;
    if (output_dir) c.output_dir = *output_dir;
    c.validate();
    return c;
  }
};

void print_summary(const RunSummary& s, const ExperimentConfig& cfg) { std::cout << s.to_json(cfg).dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"daml: surrogate-model learning with ensemble data assimilation and EM"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "per-iteration progress on stderr");

  // truth
  Overrides truth_o;
  auto* truth = app.add_subcommand("truth", "generate a spun-up reference trajectory");
  truth_o.attach(truth);

  // observe
  Overrides obs_o;
  std::string obs_truth;
  auto* observe = app.add_subcommand("observe", "synthesize noisy observations of a trajectory file");
  obs_o.attach(observe);
  observe->add_option("--truth", obs_truth, "trajectory CSV")->required()->check(CLI::ExistingFile);

  // train
  Overrides train_o;
  std::string train_obs, train_truth;
  auto* train = app.add_subcommand("train", "run EM on an observation file");
  train_o.attach(train);
  train->add_option("--obs", train_obs, "observation CSV")->required()->check(CLI::ExistingFile);
  train->add_option("--truth", train_truth, "trajectory CSV, only for the state-RMSE diagnostic")
      ->check(CLI::ExistingFile);

  // evaluate
  Overrides eval_o;
  std::string eval_ckpt;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "forecast skill, Lyapunov spectrum and PSD of a checkpoint");
  eval_o.attach(evaluate_cmd);
  evaluate_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint JSON")->required()->check(CLI::ExistingFile);

  // lyapunov
  Overrides ly_o;
  std::string ly_ckpt;
  auto* lyap = app.add_subcommand("lyapunov", "Lyapunov spectrum of a checkpoint, or of the reference model");
  ly_o.attach(lyap);
  lyap->add_option("--checkpoint", ly_ckpt, "checkpoint JSON (omit for the reference model)")
      ->check(CLI::ExistingFile);

  // psd
  Overrides psd_o;
  std::string psd_ckpt, psd_traj;
  auto* psd = app.add_subcommand("psd", "Welch PSD of a trajectory file or of a surrogate free run");
  psd_o.attach(psd);
  auto* psd_ck_opt = psd->add_option("--checkpoint", psd_ckpt, "checkpoint JSON")->check(CLI::ExistingFile);
  psd->add_option("--trajectory", psd_traj, "trajectory CSV")->check(CLI::ExistingFile)->excludes(psd_ck_opt);

  // run
  Overrides run_o;
  auto* run = app.add_subcommand("run", "truth, observations, training and evaluation in one go");
  run_o.attach(run);

  // reproduce
  std::string target, repro_out = "reproduce";
  GridOptions go;
  auto* repro = app.add_subcommand("reproduce", "run an experiment grid and write its CSV bundle");
  repro->add_option("target", target, "table1 | table2 | fig2 | fig3 | fig4 | fig5 | lag")
      ->required()
      ->check(CLI::IsMember({"table1", "table2", "fig2", "fig3", "fig4", "fig5", "lag"}));
  repro->add_option("--seed", go.seed, "first master seed")->required();
  repro->add_option("--n-seeds", go.n_seeds, "seeds per cell")->check(CLI::PositiveNumber);
  repro->add_option("--k", go.k_override, "override the window length of every cell");
  repro->add_option("--fs-trials", go.fs_trials, "override the forecast-skill trial count");
  repro->add_option("--n-iter", go.n_iter, "override the EM iteration count");
  repro->add_option("--models", go.models, "subset of l96 l05iii");
  repro->add_option("--out", repro_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*truth) {
      const ExperimentConfig c = truth_o.build();
      const TruthRun t = generate_truth(c);
      const fs::path out = truth_o.output_dir ? *truth_o.output_dir : "truth.csv";
      write_trajectory(out, t.observed);
      std::cerr << "wrote " << out << " (" << t.observed.size() << " states, std "
                << metrics::climatological_std(t.observed) << ")\n";
    } else if (*observe) {
      const ExperimentConfig c = obs_o.build();
      const Trajectory t = read_trajectory(obs_truth);
      ExperimentConfig oc = c;
      if (!obs_o.ny && oc.obs_mode == ObsMode::Full) oc.ny = static_cast<int>(t.nx());
      const auto obs = generate_observations(t, oc);
      const fs::path out = obs_o.output_dir ? *obs_o.output_dir : "obs.csv";
      write_observations(out, obs, t.nx());
      std::cerr << "wrote " << out << "\n";
    } else if (*train) {
      const ExperimentConfig c = train_o.build();
      const ObservationFile f = read_observations(train_obs);
      std::optional<Trajectory> truth_traj;
      if (!train_truth.empty()) truth_traj = read_trajectory(train_truth);
      const fs::path dir(c.output_dir);
      fs::create_directories(dir);
      write_json(dir / "config.json", to_json(c));
      auto on_iter = [&](const em::IterationRecord& r, const surrogate::SurrogateParams& a, const ModelErrorCov& q) {
        write_checkpoint(dir / "checkpoint.json", r.iter, a, q);
        if (verbose) std::cerr << "iter " << r.iter << " sigma_q=" << r.sigma_q << " loss=" << r.loss << "\n";
      };
      const em::TrainingReport rep = em::train(f.slots, c.dt, f.nx, c.trainer, std::nullopt,
                                               truth_traj ? &*truth_traj : nullptr, on_iter);
      write_history(dir / "history.csv", rep.history);
      write_checkpoint(dir / "checkpoint.json", static_cast<int>(rep.history.size()), rep.a_star, rep.q_star);
      nlohmann::json j{{"status", em::to_string(rep.status)},
                       {"iterations", rep.history.size()},
                       {"sigma_q", metrics::sigma_q(rep.q_star)}};
      if (!rep.message.empty()) j["message"] = rep.message;
      std::cout << j.dump(2) << "\n";
      return rep.status == em::TrainStatus::Diverged ? 2 : 0;
    } else if (*evaluate_cmd) {
      const ExperimentConfig c = eval_o.build();
      const Checkpoint ck = read_checkpoint(eval_ckpt);
      const TruthRun t = generate_truth(c);
      const Evaluation ev = evaluate(c, t.final_full, ck.a, ck.q);
      const fs::path dir(c.output_dir);
      write_fs(dir / "fs.csv", ev.fs);
      if (ev.ls_status == "ok") write_ls(dir / "ls.csv", ev.ls);
      if (ev.psd_status == "ok") write_psd(dir / "psd.csv", ev.psd);
      write_psd(dir / "psd_reference.csv", ev.psd_reference);
      RunSummary s;
      s.pi_half = ev.pi_half;
      s.lambda1 = ev.lambda1;
      s.sigma_q = metrics::sigma_q(ck.q);
      s.status = "evaluated";
      s.truth_std = metrics::climatological_std(t.observed);
      s.iterations = ck.iteration;
      nlohmann::json j = s.to_json(c);
      j["ls_status"] = ev.ls_status;
      j["psd_status"] = ev.psd_status;
      write_json(dir / "summary.json", j);
      std::cout << j.dump(2) << "\n";
    } else if (*lyap) {
      const ExperimentConfig c = ly_o.build();
      ExperimentConfig tc = c;
      tc.k = 2;
      const TruthRun t = generate_truth(tc);
      const metrics::LyapunovSpectrum ls =
          ly_ckpt.empty()
              ? reference_lyapunov(c, t.final_full, c.metrics.ls_steps, c.metrics.ls_transient)
              : surrogate_lyapunov(read_checkpoint(ly_ckpt).a, t.observed.states.back(), c.metrics.ls_steps,
                                   c.metrics.ls_transient);
      const fs::path out = ly_o.output_dir ? *ly_o.output_dir : "ls.csv";
      write_ls(out, ls);
      std::cout << std::setprecision(17) << "lambda1 " << ls.exponents.front() << "\nlyapunov_time "
                << 1.0 / ls.exponents.front() << "\n";
    } else if (*psd) {
      const ExperimentConfig c = psd_o.build();
      Trajectory traj;
      if (!psd_traj.empty()) {
        traj = read_trajectory(psd_traj);
      } else if (!psd_ckpt.empty()) {
        ExperimentConfig tc = c;
        tc.k = 2;
        const TruthRun t = generate_truth(tc);
        const Checkpoint ck = read_checkpoint(psd_ckpt);
        RngStream rng(c.seeds.eval);
        traj = surrogate_free_run(ck.a, c.metrics.psd_stochastic ? &ck.q : nullptr, t.observed.states.back(),
                                  c.metrics.psd_steps, rng);
      } else {
        throw ConfigError("psd: give --trajectory or --checkpoint");
      }
      const fs::path out = psd_o.output_dir ? *psd_o.output_dir : "psd.csv";
      write_psd(out, metrics::welch_psd(traj, c.metrics.psd_segment, c.metrics.psd_overlap));
      std::cerr << "wrote " << out << "\n";
    } else if (*run) {
      const ExperimentConfig c = run_o.build();
      const RunSummary s = run_experiment(c, {true, verbose});
      print_summary(s, c);
      return s.status == "diverged" ? 2 : 0;
    } else if (*repro) {
      run_grid(target, go, repro_out, verbose);
      std::cerr << "wrote " << (fs::path(repro_out) / "grid.csv") << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
