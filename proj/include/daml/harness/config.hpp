#pragma once

// Experiment configuration: a single JSON document with nested sections.
// Every field has a default; the echoed config of a run parses back to the
// same configuration.

#include "daml/core.hpp"
#include "daml/dynamics.hpp"
#include "daml/em_trainer.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <string>

namespace daml::harness {

enum class ModelKind { L96, L05III };
enum class ObsMode { Full, RandomSubset };

inline std::string to_string(ModelKind m) { return m == ModelKind::L96 ? "l96" : "l05iii"; }
inline ModelKind parse_model(const std::string& s) {
  if (s == "l96") return ModelKind::L96;
  if (s == "l05iii") return ModelKind::L05III;
  throw ConfigError("unknown model '" + s + "'");
}
inline std::string to_string(ObsMode m) { return m == ObsMode::Full ? "full" : "random_subset"; }
inline ObsMode parse_obs_mode(const std::string& s) {
  if (s == "full") return ObsMode::Full;
  if (s == "random_subset") return ObsMode::RandomSubset;
  throw ConfigError("unknown observation mode '" + s + "'");
}

struct Seeds {
  std::uint64_t truth = 0;
  std::uint64_t obs_noise = 0;
  std::uint64_t obs_network = 0;
  std::uint64_t init = 0;
  std::uint64_t eval = 0;

  /// All streams derived from one master seed.
  static Seeds from_master(std::uint64_t master) {
    return {RngStream::derive(master, static_cast<std::uint64_t>(StreamId::Truth), 0),
            RngStream::derive(master, static_cast<std::uint64_t>(StreamId::ObsNoise), 0),
            RngStream::derive(master, static_cast<std::uint64_t>(StreamId::ObsNetwork), 0),
            RngStream::derive(master, static_cast<std::uint64_t>(StreamId::Init), 0),
            RngStream::derive(master, static_cast<std::uint64_t>(StreamId::Eval), 0)};
  }
};

struct MetricSettings {
  int fs_trials = 500;
  int fs_horizon = 0;       // steps; 0 = ten Lyapunov times
  int fs_spacing = 20;      // reference steps between initial conditions
  int fs_gap = 200;         // steps between the training window and the first IC
  int ls_steps = 10000;
  int ls_transient = 1000;
  int psd_steps = 16384;
  int psd_segment = 256;
  int psd_overlap = 128;
  bool psd_stochastic = true;  // add N(0, Q*) each interval in the surrogate run
  double lyapunov_time = 0.0;  // 0 = model default
  double normalization = 0.0;  // 0 = model default
};

struct ExperimentConfig {
  ModelKind model = ModelKind::L96;
  dynamics::L96Params l96;
  dynamics::L05IIIParams l05iii;
  int k = 5000;
  double dt = 0.05;
  int substeps = 1;  // reference RK4 steps per interval
  int spinup = 5000;
  int ny = 40;
  ObsMode obs_mode = ObsMode::Full;
  double sigma_y = 1.0;
  em::TrainerConfig trainer;
  MetricSettings metrics;
  std::uint64_t master_seed = 0;
  Seeds seeds = Seeds::from_master(0);
  std::string output_dir = "out";

  int nx() const { return model == ModelKind::L96 ? l96.nx : l05iii.nx; }
  double reference_dt() const { return dt / substeps; }

  double lyapunov_time() const {
    if (metrics.lyapunov_time > 0.0) return metrics.lyapunov_time;
    return model == ModelKind::L96 ? 0.60 : 0.72;
  }
  double normalization() const {
    if (metrics.normalization > 0.0) return metrics.normalization;
    return model == ModelKind::L96 ? 3.62 : 3.54;
  }
  int fs_horizon() const {
    return metrics.fs_horizon > 0 ? metrics.fs_horizon : static_cast<int>(std::ceil(10.0 * lyapunov_time() / dt));
  }

  void validate() const {
    if (model == ModelKind::L96) l96.validate(); else l05iii.validate();
    if (k < 2) throw ConfigError("ExperimentConfig: K must be >= 2");
    if (!(dt > 0.0)) throw ConfigError("ExperimentConfig: dt must be positive");
    if (substeps < 1) throw ConfigError("ExperimentConfig: substeps must be >= 1");
    if (spinup < 0) throw ConfigError("ExperimentConfig: spinup must be >= 0");
    if (ny < 1 || ny > nx()) throw ConfigError("ExperimentConfig: need 1 <= Ny <= Nx");
    if (obs_mode == ObsMode::Full && ny != nx()) throw ConfigError("ExperimentConfig: full observation mode needs Ny = Nx");
    if (!(sigma_y >= 0.0)) throw ConfigError("ExperimentConfig: sigma_y must be >= 0");
    if (metrics.fs_trials < 1 || metrics.fs_spacing < 1 || metrics.fs_gap < 0)
      throw ConfigError("ExperimentConfig: bad forecast-skill settings");
    if (metrics.ls_steps < 1 || metrics.ls_transient < 0) throw ConfigError("ExperimentConfig: bad Lyapunov settings");
    if (metrics.psd_steps < metrics.psd_segment) throw ConfigError("ExperimentConfig: psd_steps shorter than a segment");
    trainer.validate();
  }

  /// Nominal settings of the two reference setups.
  static ExperimentConfig nominal(ModelKind m, std::uint64_t master) {
    ExperimentConfig c;
    c.model = m;
    c.master_seed = master;
    c.seeds = Seeds::from_master(master);
    c.trainer.seed = c.seeds.init;
    c.trainer.q_variant = QVariant::Full;
    if (m == ModelKind::L05III) {
      c.substeps = 10;
      c.ny = c.l05iii.nx;
      c.trainer.ne = c.l05iii.nx + 1;
    } else {
      c.ny = c.l96.nx;
      c.trainer.ne = c.l96.nx + 1;
    }
    return c;
  }
};

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const em::TrainerConfig& t) {
  return {{"scheme", em::to_string(t.scheme)},
          {"n_iter", t.n_iter},
          {"q_variant", to_string(t.q_variant)},
          {"hyperprior", em::to_string(t.hyperprior)},
          {"q0", t.q0},
          {"a0_scale", t.a0_scale},
          {"lag", t.lag},
          {"ne", t.ne},
          {"sweeps", t.sweeps},
          {"l2", t.l2},
          {"radius", t.radius},
          {"mode", surrogate::to_string(t.mode)},
          {"nc", t.nc},
          {"init_spread", t.init_spread},
          {"inflation", t.inflation},
          {"mstep_max_iter", t.mstep_max_iter},
          {"mstep_g_tol", t.mstep_g_tol},
          {"mstep_f_rel_tol", t.mstep_f_rel_tol},
          {"early_stop", t.early_stop},
          {"sigma_q_rel_tol", t.sigma_q_rel_tol},
          {"a_rel_tol", t.a_rel_tol}};
}

inline void from_json(const nlohmann::json& j, em::TrainerConfig& t) {
  if (j.contains("scheme")) t.scheme = em::parse_scheme(j["scheme"].get<std::string>());
  t.n_iter = j.value("n_iter", t.n_iter);
  if (j.contains("q_variant")) t.q_variant = parse_q_variant(j["q_variant"].get<std::string>());
  if (j.contains("hyperprior")) t.hyperprior = em::parse_hyperprior(j["hyperprior"].get<std::string>());
  t.q0 = j.value("q0", t.q0);
  t.a0_scale = j.value("a0_scale", t.a0_scale);
  t.lag = j.value("lag", t.lag);
  t.ne = j.value("ne", t.ne);
  t.sweeps = j.value("sweeps", t.sweeps);
  t.l2 = j.value("l2", t.l2);
  t.radius = j.value("radius", t.radius);
  if (j.contains("mode")) t.mode = surrogate::parse_mode(j["mode"].get<std::string>());
  t.nc = j.value("nc", t.nc);
  t.init_spread = j.value("init_spread", t.init_spread);
  t.inflation = j.value("inflation", t.inflation);
  t.mstep_max_iter = j.value("mstep_max_iter", t.mstep_max_iter);
  t.mstep_g_tol = j.value("mstep_g_tol", t.mstep_g_tol);
  t.mstep_f_rel_tol = j.value("mstep_f_rel_tol", t.mstep_f_rel_tol);
  t.early_stop = j.value("early_stop", t.early_stop);
  t.sigma_q_rel_tol = j.value("sigma_q_rel_tol", t.sigma_q_rel_tol);
  t.a_rel_tol = j.value("a_rel_tol", t.a_rel_tol);
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["format"] = "daml-experiment";
  j["format_version"] = 1;
  j["model"] = to_string(c.model);
  j["l96"] = {{"nx", c.l96.nx}, {"forcing", c.l96.forcing}};
  j["l05iii"] = {{"nx", c.l05iii.nx}, {"nu", c.l05iii.nu}, {"c", c.l05iii.c},
                 {"b", c.l05iii.b},   {"h", c.l05iii.h},   {"forcing", c.l05iii.forcing}};
  j["k"] = c.k;
  j["dt"] = c.dt;
  j["substeps"] = c.substeps;
  j["spinup"] = c.spinup;
  j["observations"] = {{"ny", c.ny}, {"mode", to_string(c.obs_mode)}, {"sigma_y", c.sigma_y}};
  j["trainer"] = to_json(c.trainer);
  const MetricSettings& m = c.metrics;
  j["metrics"] = {{"fs_trials", m.fs_trials},       {"fs_horizon", m.fs_horizon},   {"fs_spacing", m.fs_spacing},
                  {"fs_gap", m.fs_gap},             {"ls_steps", m.ls_steps},       {"ls_transient", m.ls_transient},
                  {"psd_steps", m.psd_steps},       {"psd_segment", m.psd_segment}, {"psd_overlap", m.psd_overlap},
                  {"psd_stochastic", m.psd_stochastic}, {"lyapunov_time", m.lyapunov_time},
                  {"normalization", m.normalization}};
  j["seed"] = c.master_seed;
  j["seeds"] = {{"truth", c.seeds.truth},
                {"obs_noise", c.seeds.obs_noise},
                {"obs_network", c.seeds.obs_network},
                {"init", c.seeds.init},
                {"eval", c.seeds.eval}};
  j["output_dir"] = c.output_dir;
  return j;
}

/// Missing keys keep their defaults. Explicit per-stream seeds override the
/// ones derived from "seed"; the trainer seed follows the init stream.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  if (j.contains("format_version") && j["format_version"].get<int>() != 1)
    throw ConfigError("experiment config: unsupported format_version");
  if (j.contains("model")) c.model = parse_model(j["model"].get<std::string>());
  if (c.model == ModelKind::L05III) c.substeps = 10;
  if (j.contains("l96")) {
    c.l96.nx = j["l96"].value("nx", c.l96.nx);
    c.l96.forcing = j["l96"].value("forcing", c.l96.forcing);
  }
  if (j.contains("l05iii")) {
    const auto& s = j["l05iii"];
    c.l05iii.nx = s.value("nx", c.l05iii.nx);
    c.l05iii.nu = s.value("nu", 10 * c.l05iii.nx);
    c.l05iii.c = s.value("c", c.l05iii.c);
    c.l05iii.b = s.value("b", c.l05iii.b);
    c.l05iii.h = s.value("h", c.l05iii.h);
    c.l05iii.forcing = s.value("forcing", c.l05iii.forcing);
  }
  c.k = j.value("k", c.k);
  c.dt = j.value("dt", c.dt);
  c.substeps = j.value("substeps", c.substeps);
  c.spinup = j.value("spinup", c.spinup);
  c.ny = c.nx();
  c.trainer.ne = c.nx() + 1;
  c.trainer.q_variant = QVariant::Full;
  if (j.contains("observations")) {
    const auto& o = j["observations"];
    c.ny = o.value("ny", c.ny);
    if (o.contains("mode")) c.obs_mode = parse_obs_mode(o["mode"].get<std::string>());
    c.sigma_y = o.value("sigma_y", c.sigma_y);
  }
  if (j.contains("trainer")) from_json(j["trainer"], c.trainer);
  if (j.contains("metrics")) {
    const auto& m = j["metrics"];
    MetricSettings& s = c.metrics;
    s.fs_trials = m.value("fs_trials", s.fs_trials);
    s.fs_horizon = m.value("fs_horizon", s.fs_horizon);
    s.fs_spacing = m.value("fs_spacing", s.fs_spacing);
    s.fs_gap = m.value("fs_gap", s.fs_gap);
    s.ls_steps = m.value("ls_steps", s.ls_steps);
    s.ls_transient = m.value("ls_transient", s.ls_transient);
    s.psd_steps = m.value("psd_steps", s.psd_steps);
    s.psd_segment = m.value("psd_segment", s.psd_segment);
    s.psd_overlap = m.value("psd_overlap", s.psd_overlap);
    s.psd_stochastic = m.value("psd_stochastic", s.psd_stochastic);
    s.lyapunov_time = m.value("lyapunov_time", s.lyapunov_time);
    s.normalization = m.value("normalization", s.normalization);
  }
  c.master_seed = j.value("seed", std::uint64_t{0});
  c.seeds = Seeds::from_master(c.master_seed);
  if (j.contains("seeds")) {
    const auto& s = j["seeds"];
    c.seeds.truth = s.value("truth", c.seeds.truth);
    c.seeds.obs_noise = s.value("obs_noise", c.seeds.obs_noise);
    c.seeds.obs_network = s.value("obs_network", c.seeds.obs_network);
    c.seeds.init = s.value("init", c.seeds.init);
    c.seeds.eval = s.value("eval", c.seeds.eval);
  }
  c.trainer.seed = c.seeds.init;
  c.output_dir = j.value("output_dir", c.output_dir);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

}  // namespace daml::harness
