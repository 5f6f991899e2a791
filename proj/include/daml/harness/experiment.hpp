#pragma once

// Twin-experiment pipeline: truth run, synthetic observations, EM training,
// evaluation and the on-disk report bundle, plus the sensitivity grids.

#include "daml/dynamics.hpp"
#include "daml/em_trainer.hpp"
#include "daml/ensemble_da.hpp"
#include "daml/harness/config.hpp"
#include "daml/harness/io.hpp"
#include "daml/metrics.hpp"
#include "daml/surrogate.hpp"

#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>

namespace daml::harness {

// ---------------------------------------------------------------------------
// Reference model

/// One observation interval of the reference model on its full state
/// (slow and fast variables packed for L05III).
inline metrics::Stepper reference_stepper(const ExperimentConfig& cfg) {
  const double h = cfg.reference_dt();
  const int n = cfg.substeps;
  if (cfg.model == ModelKind::L96) {
    dynamics::L96 f{cfg.l96};
    return [f, h, n](const State& x) { return dynamics::advance(f, x, h, n); };
  }
  dynamics::L05III f{cfg.l05iii};
  return [f, h, n](const State& x) { return dynamics::advance(f, x, h, n); };
}

/// Observable (slow) part of a full reference state.
inline metrics::Stepper projector(const ExperimentConfig& cfg) {
  const Eigen::Index nx = cfg.nx();
  return [nx](const State& z) -> State { return z.head(nx); };
}

struct TruthRun {
  Trajectory observed;       // slow variables at the observation cadence
  std::vector<State> hidden; // fast variables (L05III only)
  State final_full;          // full reference state at k = K
};

inline State reference_initial_state(const ExperimentConfig& cfg, RngStream& rng) {
  if (cfg.model == ModelKind::L96) {
    State x = Vector::Constant(cfg.l96.nx, cfg.l96.forcing);
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] += rng.normal();
    return x;
  }
  State z(cfg.l05iii.nx + cfg.l05iii.nu);
  for (Eigen::Index i = 0; i < cfg.l05iii.nx; ++i) z[i] = cfg.l05iii.forcing + rng.normal();
  for (Eigen::Index i = cfg.l05iii.nx; i < z.size(); ++i) z[i] = 0.1 * rng.normal();
  return z;
}

/// Spun-up reference trajectory of K + 1 states at the observation cadence.
inline TruthRun generate_truth(const ExperimentConfig& cfg) {
  cfg.validate();
  RngStream rng(cfg.seeds.truth);
  const metrics::Stepper step = reference_stepper(cfg);
  State z = reference_initial_state(cfg, rng);
  try {
    for (int s = 0; s < cfg.spinup; ++s) z = step(z);
  } catch (const BlowUpError& e) {
    throw ConfigError(std::string("generate_truth: reference blew up during spin-up: ") + e.what());
  }
  TruthRun run;
  run.observed.dt = cfg.dt;
  run.observed.states.reserve(static_cast<std::size_t>(cfg.k) + 1);
  const Eigen::Index nx = cfg.nx();
  for (int k = 0; k <= cfg.k; ++k) {
    if (k > 0) {
      try {
        z = step(z);
      } catch (const BlowUpError& e) {
        throw ConfigError("generate_truth: reference blew up at step " + std::to_string(k) + ": " + e.what());
      }
    }
    run.observed.states.push_back(z.head(nx));
    if (cfg.model == ModelKind::L05III) run.hidden.push_back(z.tail(z.size() - nx));
  }
  run.final_full = z;
  return run;
}

/// y_k = H_k x_k + N(0, sigma_y^2 I). Noise is drawn at every site and then
/// subset, so Ny = Nx random subsets coincide with full observation.
inline std::vector<enda::ObservationSlot> generate_observations(const Trajectory& truth, const ExperimentConfig& cfg) {
  const Eigen::Index nx = truth.nx();
  if (cfg.ny > nx) throw ConfigError("generate_observations: Ny exceeds Nx");
  RngStream noise(cfg.seeds.obs_noise);
  RngStream network(cfg.seeds.obs_network);
  std::vector<enda::ObservationSlot> out;
  out.reserve(truth.size());
  std::vector<int> perm(static_cast<std::size_t>(nx));
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const Vector eps = noise.normal_vector(nx);
    enda::ObservationSlot s;
    s.k = static_cast<int>(k);
    s.sigma_y = cfg.sigma_y;
    if (cfg.obs_mode == ObsMode::Full) {
      s.sites.resize(static_cast<std::size_t>(nx));
      std::iota(s.sites.begin(), s.sites.end(), 0);
    } else {
      std::iota(perm.begin(), perm.end(), 0);
      for (int i = 0; i < cfg.ny; ++i) {
        const std::size_t j = static_cast<std::size_t>(i) + network.index(static_cast<std::size_t>(nx - i));
        std::swap(perm[static_cast<std::size_t>(i)], perm[j]);
      }
      s.sites.assign(perm.begin(), perm.begin() + cfg.ny);
      std::sort(s.sites.begin(), s.sites.end());
    }
    s.values.resize(static_cast<Eigen::Index>(s.sites.size()));
    for (std::size_t i = 0; i < s.sites.size(); ++i)
      s.values[static_cast<Eigen::Index>(i)] = truth[k][s.sites[i]] + cfg.sigma_y * eps[s.sites[i]];
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  metrics::ForecastSkillCurve fs;
  metrics::LyapunovSpectrum ls;
  metrics::PowerSpectrum psd;
  metrics::PowerSpectrum psd_reference;
  double pi_half = std::numeric_limits<double>::infinity();
  double lambda1 = std::numeric_limits<double>::quiet_NaN();
  std::string ls_status = "ok";
  std::string psd_status = "ok";
};

/// Initial conditions on the reference attractor after the training window.
inline std::vector<State> evaluation_initial_conditions(const ExperimentConfig& cfg, const State& final_full) {
  const metrics::Stepper step = reference_stepper(cfg);
  State z = final_full;
  for (int s = 0; s < cfg.metrics.fs_gap; ++s) z = step(z);
  std::vector<State> ics;
  ics.reserve(static_cast<std::size_t>(cfg.metrics.fs_trials));
  for (int t = 0; t < cfg.metrics.fs_trials; ++t) {
    ics.push_back(z);
    for (int s = 0; s < cfg.metrics.fs_spacing; ++s) z = step(z);
  }
  return ics;
}

inline metrics::LyapunovSpectrum surrogate_lyapunov(const surrogate::SurrogateParams& a, const State& x0, int n_steps,
                                                    int transient) {
  auto step = [&a](const State& x) -> std::pair<State, Matrix> {
    return {surrogate::resolvent(a, x), surrogate::jacobian_state(a, x)};
  };
  return metrics::lyapunov_spectrum(step, x0, n_steps, transient, a.interval());
}

/// Spectrum of the reference model: exact L96, or the decoupled slow sector
/// of L05III (an L96 system with the L05III forcing).
inline metrics::LyapunovSpectrum reference_lyapunov(const ExperimentConfig& cfg, const State& x0, int n_steps,
                                                    int transient) {
  dynamics::L96 f{cfg.model == ModelKind::L96 ? cfg.l96 : dynamics::L96Params{cfg.l05iii.nx, cfg.l05iii.forcing}};
  const double dt = cfg.dt;
  auto step = [&f, dt](const State& x) -> std::pair<State, Matrix> {
    auto jac = [&f](const State& y) { return f.jacobian(y); };
    return {dynamics::rk4_step(f, x, dt), dynamics::rk4_step_jacobian(f, jac, x, dt)};
  };
  return metrics::lyapunov_spectrum(step, x0.head(f.params.nx), n_steps, transient, dt);
}

inline Trajectory surrogate_free_run(const surrogate::SurrogateParams& a, const ModelErrorCov* q, State x, int n_steps,
                                     RngStream& rng) {
  Trajectory traj;
  traj.dt = a.interval();
  traj.states.reserve(static_cast<std::size_t>(n_steps));
  const Matrix l = q ? q->sqrt_factor() : Matrix();
  for (int k = 0; k < n_steps; ++k) {
    x = surrogate::resolvent(a, x);
    if (q) x += l * rng.normal_vector(x.size());
    if (!is_bounded(x)) throw BlowUpError("surrogate free run blew up at step " + std::to_string(k));
    traj.states.push_back(x);
  }
  return traj;
}

inline Evaluation evaluate(const ExperimentConfig& cfg, const State& final_full, const surrogate::SurrogateParams& a,
                           const ModelErrorCov& q) {
  Evaluation ev;
  const std::vector<State> ics = evaluation_initial_conditions(cfg, final_full);
  metrics::SkillOptions so;
  so.horizon = cfg.fs_horizon();
  so.normalization = cfg.normalization();
  so.step_time = cfg.dt;
  so.lyapunov_time = cfg.lyapunov_time();
  ev.fs = metrics::forecast_skill(reference_stepper(cfg), projector(cfg),
                                  [&a](const State& x) { return surrogate::resolvent(a, x); }, ics, so);
  ev.pi_half = metrics::pi_half(ev.fs);

  const State x0 = projector(cfg)(ics.front());
  try {
    ev.ls = surrogate_lyapunov(a, x0, cfg.metrics.ls_steps, cfg.metrics.ls_transient);
    ev.lambda1 = ev.ls.exponents.front();
  } catch (const BlowUpError&) {
    ev.ls_status = "blown_up";
  }

  RngStream rng(cfg.seeds.eval);
  try {
    const Trajectory run = surrogate_free_run(a, cfg.metrics.psd_stochastic ? &q : nullptr, x0, cfg.metrics.psd_steps, rng);
    ev.psd = metrics::welch_psd(run, cfg.metrics.psd_segment, cfg.metrics.psd_overlap);
  } catch (const BlowUpError&) {
    ev.psd_status = "blown_up";
  }
  const metrics::Stepper step = reference_stepper(cfg);
  Trajectory ref;
  ref.dt = cfg.dt;
  State z = ics.front();
  for (int k = 0; k < cfg.metrics.psd_steps; ++k) {
    z = step(z);
    ref.states.push_back(z.head(cfg.nx()));
  }
  ev.psd_reference = metrics::welch_psd(ref, cfg.metrics.psd_segment, cfg.metrics.psd_overlap);
  return ev;
}

// ---------------------------------------------------------------------------
// Full run

struct RunSummary {
  double pi_half = std::numeric_limits<double>::infinity();
  double sigma_q = std::numeric_limits<double>::quiet_NaN();
  double lambda1 = std::numeric_limits<double>::quiet_NaN();
  std::string status;
  double truth_std = 0.0;
  int iterations = 0;
  std::vector<double> sigma_q_history;
  metrics::ForecastSkillCurve fs;

  nlohmann::json to_json(const ExperimentConfig& cfg) const {
    nlohmann::json j;
    j["format"] = "daml-summary";
    j["format_version"] = kFormatVersion;
    j["pi_half"] = std::isfinite(pi_half) ? nlohmann::json(pi_half) : nlohmann::json(nullptr);
    j["pi_half_reached"] = std::isfinite(pi_half);
    j["sigma_q"] = sigma_q;
    j["lambda1"] = lambda1;
    j["status"] = status;
    j["iterations"] = iterations;
    j["truth_std"] = truth_std;
    j["normalization"] = cfg.normalization();
    j["normalization_check"] = std::abs(truth_std - cfg.normalization()) <= 0.02 * cfg.normalization();
    j["lyapunov_time"] = cfg.lyapunov_time();
    return j;
  }
};

struct RunOptions {
  bool write_files = true;
  bool verbose = false;
};

/// truth -> observations -> EM training -> metrics, writing the report
/// bundle into cfg.output_dir. A training abort is recorded in the summary
/// and the artifacts produced so far are kept.
inline RunSummary run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path dir(cfg.output_dir);
  if (opts.write_files) {
    fs::create_directories(dir);
    write_json(dir / "config.json", harness::to_json(cfg));
  }
  RunSummary sum;
  const TruthRun truth = generate_truth(cfg);
  sum.truth_std = metrics::climatological_std(truth.observed);
  const auto obs = generate_observations(truth.observed, cfg);

  auto on_iter = [&](const em::IterationRecord& r, const surrogate::SurrogateParams& a, const ModelErrorCov& q) {
    if (opts.write_files) write_checkpoint(dir / "checkpoint.json", r.iter, a, q);
    if (opts.verbose)
      std::cerr << "iter " << r.iter << " sigma_q=" << r.sigma_q << " loss=" << r.loss << " |g|=" << r.grad_norm
                << " rmse=" << r.state_rmse << "\n";
  };
  const em::TrainingReport rep = em::train(obs, cfg.dt, cfg.nx(), cfg.trainer, std::nullopt, &truth.observed, on_iter);
  sum.status = em::to_string(rep.status);
  sum.iterations = static_cast<int>(rep.history.size());
  for (const auto& r : rep.history) sum.sigma_q_history.push_back(r.sigma_q);
  sum.sigma_q = metrics::sigma_q(rep.q_star);
  if (opts.write_files) {
    write_history(dir / "history.csv", rep.history);
    write_checkpoint(dir / "checkpoint.json", sum.iterations, rep.a_star, rep.q_star);
  }
  if (rep.status == em::TrainStatus::Diverged && rep.history.empty()) {
    if (opts.write_files) {
      nlohmann::json j = sum.to_json(cfg);
      j["message"] = rep.message;
      write_json(dir / "summary.json", j);
    }
    return sum;
  }

  const Evaluation ev = evaluate(cfg, truth.final_full, rep.a_star, rep.q_star);
  sum.pi_half = ev.pi_half;
  sum.lambda1 = ev.lambda1;
  sum.fs = ev.fs;
  if (opts.write_files) {
    write_fs(dir / "fs.csv", ev.fs);
    if (ev.ls_status == "ok") write_ls(dir / "ls.csv", ev.ls);
    if (ev.psd_status == "ok") write_psd(dir / "psd.csv", ev.psd);
    write_psd(dir / "psd_reference.csv", ev.psd_reference);
    nlohmann::json j = sum.to_json(cfg);
    j["fs_blown_up_trials"] = ev.fs.n_blown_up;
    j["ls_status"] = ev.ls_status;
    j["psd_status"] = ev.psd_status;
    if (!rep.message.empty()) j["message"] = rep.message;
    write_json(dir / "summary.json", j);
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Sensitivity grids

struct GridCell {
  std::string label;  // e.g. "l96/k=200"
  std::string parameter;
  double value = 0.0;
  ExperimentConfig config;
};

struct GridOptions {
  std::uint64_t seed = 0;
  int n_seeds = 3;
  int k_override = 0;        // 0 = the grid's own K
  int fs_trials = 0;         // 0 = default
  int n_iter = 0;            // 0 = default
  std::vector<std::string> models = {"l96", "l05iii"};
};

inline std::vector<GridCell> reproduce_grid(const std::string& target, const GridOptions& go) {
  std::vector<GridCell> cells;
  auto base = [&](ModelKind m, std::uint64_t seed) {
    ExperimentConfig c = ExperimentConfig::nominal(m, seed);
    if (go.k_override > 0) c.k = go.k_override;
    if (go.fs_trials > 0) c.metrics.fs_trials = go.fs_trials;
    if (go.n_iter > 0) c.trainer.n_iter = go.n_iter;
    return c;
  };
  std::vector<ModelKind> models;
  for (const auto& m : go.models) models.push_back(parse_model(m));
  for (int s = 0; s < go.n_seeds; ++s) {
    const std::uint64_t seed = go.seed + static_cast<std::uint64_t>(s);
    for (ModelKind m : models) {
      const std::string name = to_string(m);
      if (target == "table1" || target == "fig2") {
        cells.push_back({name + "/nominal", "nominal", 0.0, base(m, seed)});
      } else if (target == "table2") {
        if (m != ModelKind::L96) continue;
        for (em::Scheme sc : {em::Scheme::Approximate, em::Scheme::Full}) {
          ExperimentConfig c = base(m, seed);
          c.trainer.scheme = sc;
          cells.push_back({name + "/scheme=" + em::to_string(sc), "scheme", sc == em::Scheme::Full ? 1.0 : 0.0, c});
        }
      } else if (target == "fig3") {
        for (int k : {50, 100, 200, 400, 800, 1600, 3200, 6400}) {
          ExperimentConfig c = base(m, seed);
          c.k = k;
          cells.push_back({name + "/k=" + std::to_string(k), "k", static_cast<double>(k), c});
        }
      } else if (target == "fig4") {
        for (double sy : {2.0, 1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125}) {
          ExperimentConfig c = base(m, seed);
          c.sigma_y = sy;
          cells.push_back({name + "/sigma_y=" + detail::num(sy), "sigma_y", sy, c});
        }
      } else if (target == "fig5") {
        const std::vector<int> nys = m == ModelKind::L96 ? std::vector<int>{40, 36, 32, 28, 24, 20, 16}
                                                         : std::vector<int>{36, 32, 28, 24, 20, 16, 12};
        for (int ny : nys) {
          ExperimentConfig c = base(m, seed);
          c.obs_mode = ObsMode::RandomSubset;
          c.ny = ny;
          cells.push_back({name + "/ny=" + std::to_string(ny), "ny", static_cast<double>(ny), c});
        }
      } else if (target == "lag") {
        for (int l : {0, 2, 4, 6, 8, 10, 12}) {
          ExperimentConfig c = base(m, seed);
          c.trainer.lag = l;
          cells.push_back({name + "/lag=" + std::to_string(l), "lag", static_cast<double>(l), c});
        }
      } else {
        throw ConfigError("unknown reproduce target '" + target + "'");
      }
    }
  }
  return cells;
}

/// Runs every cell (sequentially; each cell writes into its own directory)
/// and writes grid.csv plus seed-averaged FS curves per cell label.
inline void run_grid(const std::string& target, const GridOptions& go, const std::filesystem::path& out_dir,
                     bool verbose = false) {
  std::vector<GridCell> cells = reproduce_grid(target, go);
  std::filesystem::create_directories(out_dir);
  auto grid = detail::open_out(out_dir / "grid.csv");
  grid << "# daml grid v" << kFormatVersion << " target=" << target << "\n";
  grid << "label,parameter,value,seed,pi_half,sigma_q,lambda1,status\n";
  std::map<std::string, std::pair<metrics::ForecastSkillCurve, int>> mean_fs;
  for (GridCell& cell : cells) {
    std::string sub = cell.label;
    std::replace(sub.begin(), sub.end(), '/', '_');
    cell.config.output_dir = (out_dir / (sub + "_seed" + std::to_string(cell.config.master_seed))).string();
    if (verbose) std::cerr << "[" << target << "] " << cell.label << " seed " << cell.config.master_seed << "\n";
    const RunSummary s = run_experiment(cell.config, {true, verbose});
    grid << cell.label << "," << cell.parameter << "," << cell.value << "," << cell.config.master_seed << ","
         << s.pi_half << "," << s.sigma_q << "," << s.lambda1 << "," << s.status << "\n";
    grid.flush();
    if (s.fs.nrmse.empty()) continue;
    auto& [acc, n] = mean_fs[cell.label];
    if (n == 0) {
      acc = s.fs;
    } else {
      for (std::size_t i = 0; i < acc.nrmse.size(); ++i) acc.nrmse[i] += s.fs.nrmse[i];
      acc.n_trials += s.fs.n_trials;
    }
    ++n;
  }
  for (auto& [label, entry] : mean_fs) {
    auto& [acc, n] = entry;
    for (double& v : acc.nrmse) v /= n;
    std::string sub = label;
    std::replace(sub.begin(), sub.end(), '/', '_');
    write_fs(out_dir / ("fs_mean_" + sub + ".csv"), acc);
  }
}

}  // namespace daml::harness
