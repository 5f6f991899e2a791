#pragma once

// Monte Carlo EM over (A, Q): EnKS E-step, L-BFGS fit of the surrogate
// coefficients and closed-form model-error updates, in three flavours
// (full ensemble, mean-trajectory approximation, and fixed Q).

#include "daml/core.hpp"
#include "daml/ensemble_da.hpp"
#include "daml/lbfgs.hpp"
#include "daml/metrics.hpp"
#include "daml/model_error.hpp"
#include "daml/surrogate.hpp"

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace daml::em {

enum class Scheme { Full, Approximate, FixedQ };
enum class Hyperprior { None, Jeffreys };

inline std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::Full: return "full";
    case Scheme::Approximate: return "approximate";
    case Scheme::FixedQ: return "fixed_q";
  }
  return "?";
}

inline Scheme parse_scheme(const std::string& s) {
  if (s == "full") return Scheme::Full;
  if (s == "approximate") return Scheme::Approximate;
  if (s == "fixed_q") return Scheme::FixedQ;
  throw ConfigError("unknown scheme '" + s + "'");
}

inline std::string to_string(Hyperprior h) { return h == Hyperprior::Jeffreys ? "jeffreys" : "none"; }

inline Hyperprior parse_hyperprior(const std::string& s) {
  if (s == "jeffreys") return Hyperprior::Jeffreys;
  if (s == "none") return Hyperprior::None;
  throw ConfigError("unknown hyperprior '" + s + "'");
}

struct TrainerConfig {
  Scheme scheme = Scheme::Approximate;
  int n_iter = 25;
  QVariant q_variant = QVariant::Scalar;
  Hyperprior hyperprior = Hyperprior::Jeffreys;
  double q0 = 1.0;
  double a0_scale = 1e-3;
  int lag = 4;
  int ne = 41;
  int sweeps = 1;  // inner (A, Q) sweeps of the full scheme
  double l2 = 0.0;
  std::uint64_t seed = 0;

  // Surrogate structure.
  int radius = 2;
  surrogate::Mode mode = surrogate::Mode::Homogeneous;
  int nc = 1;

  // E-step details.
  double init_spread = 1.0;
  double inflation = 1.0;

  // M-step solver.
  int mstep_max_iter = 100;
  double mstep_g_tol = 1e-8;
  double mstep_f_rel_tol = 1e-12;

  // Early stopping (both must hold).
  bool early_stop = true;
  double sigma_q_rel_tol = 1e-4;
  double a_rel_tol = 1e-6;

  void validate() const {
    if (n_iter < 1) throw ConfigError("TrainerConfig: n_iter must be >= 1");
    if (!(q0 > 0.0)) throw ConfigError("TrainerConfig: q0 must be positive");
    if (!(a0_scale >= 0.0)) throw ConfigError("TrainerConfig: a0_scale must be >= 0");
    if (lag < 0) throw ConfigError("TrainerConfig: lag must be >= 0");
    if (ne < 2) throw ConfigError("TrainerConfig: ne must be >= 2");
    if (sweeps < 1) throw ConfigError("TrainerConfig: sweeps must be >= 1");
    if (l2 < 0.0) throw ConfigError("TrainerConfig: l2 must be >= 0");
    if (nc < 1) throw ConfigError("TrainerConfig: nc must be >= 1");
    if (!(init_spread > 0.0)) throw ConfigError("TrainerConfig: init_spread must be positive");
    if (!(inflation >= 1.0)) throw ConfigError("TrainerConfig: inflation must be >= 1");
    if (mstep_max_iter < 1) throw ConfigError("TrainerConfig: mstep_max_iter must be >= 1");
  }

  lbfgs::MinimizeOptions mstep_options() const {
    lbfgs::MinimizeOptions o;
    o.max_iterations = mstep_max_iter;
    o.g_tol = mstep_g_tol;
    o.f_rel_tol = mstep_f_rel_tol;
    return o;
  }
};

using metrics::sigma_q;

// ---------------------------------------------------------------------------
// Q update

/// Shrink factors of the Jeffreys hyperpriors.
inline double scalar_jeffreys_factor(int k, Eigen::Index nx) {
  return static_cast<double>(k) / (static_cast<double>(k) * static_cast<double>(nx) + 2.0);
}
inline double matrix_jeffreys_factor(int k, Eigen::Index nx) {
  return static_cast<double>(k) / (static_cast<double>(k) + static_cast<double>(nx) + 1.0);
}

struct QUpdate {
  ModelErrorCov q;
  bool degenerate = false;
};

/// Closed-form maximizer over Q. S is the per-step mean residual covariance
/// (sum of member-averaged outer products divided by the K steps).
inline QUpdate q_update(const Matrix& s, int k, QVariant variant, Hyperprior prior) {
  if (s.rows() != s.cols() || s.rows() == 0) throw DimensionError("q_update: S must be square");
  if (k < 1) throw ConfigError("q_update: K must be >= 1");
  if (!s.allFinite()) throw NumericalError("q_update: non-finite residual statistic");
  const Eigen::Index nx = s.rows();
  const double jitter = ModelErrorCov::kJitter;
  const bool jeffreys = prior == Hyperprior::Jeffreys;
  QUpdate out{ModelErrorCov::scalar(1.0, nx), false};
  switch (variant) {
    case QVariant::Scalar: {
      const double tr = s.trace();
      const double q = jeffreys ? static_cast<double>(k) * tr / (static_cast<double>(k) * nx + 2.0) : tr / nx;
      out.degenerate = !(q > 0.0);
      out.q = ModelErrorCov::scalar(std::max(q, 0.0) + jitter, nx);
      break;
    }
    case QVariant::Diagonal: {
      Vector d = s.diagonal();
      if (jeffreys) d *= static_cast<double>(k) / (static_cast<double>(k) + 2.0);
      out.degenerate = !(d.minCoeff() > 0.0);
      out.q = ModelErrorCov::diagonal(d.cwiseMax(0.0).array() + jitter);
      break;
    }
    case QVariant::Full: {
      Matrix m = 0.5 * (s + s.transpose());
      if (jeffreys) m *= matrix_jeffreys_factor(k, nx);
      out.degenerate = !(m.diagonal().minCoeff() > 0.0);
      m.diagonal().array() += jitter;
      out.q = ModelErrorCov::full(m);
      break;
    }
  }
  return out;
}

/// Q-dependent part of the expected complete log-likelihood (to minimize):
/// K/2 log|Q| + 1/2 sum tr(Q^{-1} r r^T) = K/2 (log|Q| + tr(Q^{-1} S)).
inline double q_objective(const ModelErrorCov& q, const Matrix& s, int k) {
  return 0.5 * static_cast<double>(k) * (q.log_det() + q.solve(s).trace());
}

// ---------------------------------------------------------------------------
// Initialization

struct InitialState {
  surrogate::SurrogateParams a;
  ModelErrorCov q;
};

inline InitialState init_params(const TrainerConfig& cfg, const surrogate::StencilBasis& basis, double dt_int) {
  cfg.validate();
  surrogate::SurrogateParams a = surrogate::SurrogateParams::zeros(basis, cfg.mode, dt_int, cfg.nc);
  RngStream rng(cfg.seed, StreamId::Init, 0);
  for (Eigen::Index r = 0; r < a.coefficients.rows(); ++r)
    for (Eigen::Index c = 0; c < a.coefficients.cols(); ++c)
      a.coefficients(r, c) = cfg.a0_scale > 0.0 ? rng.uniform(-cfg.a0_scale, cfg.a0_scale) : 0.0;
  ModelErrorCov q = ModelErrorCov::scalar(cfg.q0, basis.nx());
  if (cfg.q_variant == QVariant::Diagonal) q = ModelErrorCov::diagonal(Vector::Constant(basis.nx(), cfg.q0));
  if (cfg.q_variant == QVariant::Full) q = ModelErrorCov::full(cfg.q0 * Matrix::Identity(basis.nx(), basis.nx()));
  return {std::move(a), std::move(q)};
}

// ---------------------------------------------------------------------------
// M-step

/// Transitions along a single (mean) trajectory.
inline std::vector<surrogate::Transition> mean_transitions(const Trajectory& traj) {
  std::vector<surrogate::Transition> t;
  t.reserve(traj.size() > 0 ? traj.size() - 1 : 0);
  for (std::size_t k = 1; k < traj.size(); ++k) t.push_back({&traj.states[k - 1], &traj.states[k], 1.0});
  return t;
}

/// Member trajectories unpacked from an ensemble history (one State per
/// member per time), so that transitions can point into stable storage.
struct MemberStore {
  std::vector<std::vector<State>> members;  // [k][i]
};

inline MemberStore unpack_members(const std::vector<Matrix>& ensemble) {
  MemberStore store;
  store.members.resize(ensemble.size());
  for (std::size_t k = 0; k < ensemble.size(); ++k) {
    store.members[k].reserve(static_cast<std::size_t>(ensemble[k].cols()));
    for (Eigen::Index i = 0; i < ensemble[k].cols(); ++i) store.members[k].emplace_back(ensemble[k].col(i));
  }
  return store;
}

inline std::vector<surrogate::Transition> ensemble_transitions(const MemberStore& store) {
  std::vector<surrogate::Transition> t;
  for (std::size_t k = 1; k < store.members.size(); ++k) {
    if (store.members[k].size() != store.members[k - 1].size())
      throw DimensionError("ensemble_transitions: member count changes over time");
    for (std::size_t i = 0; i < store.members[k].size(); ++i)
      t.push_back({&store.members[k - 1][i], &store.members[k][i], 1.0});
  }
  return t;
}

/// S = (1/K) sum_k (1/Ne) sum_i r_{k,i} r_{k,i}^T with r = x_k - F_A(x_{k-1}).
inline enda::ResidualStatistic ensemble_residuals(const surrogate::SurrogateParams& a, const MemberStore& store) {
  enda::ResidualStatistic st;
  st.sum = Matrix::Zero(a.nx(), a.nx());
  for (std::size_t k = 1; k < store.members.size(); ++k) {
    const auto ne = static_cast<double>(store.members[k].size());
    Matrix r(a.nx(), static_cast<Eigen::Index>(store.members[k].size()));
    for (std::size_t i = 0; i < store.members[k].size(); ++i)
      r.col(static_cast<Eigen::Index>(i)) = store.members[k][i] - surrogate::resolvent(a, store.members[k - 1][i]);
    st.sum.noalias() += (r * r.transpose()) / ne;
    ++st.count;
  }
  return st;
}

struct MStepResult {
  surrogate::SurrogateParams a;
  double loss_init = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  lbfgs::Status status = lbfgs::Status::Converged;
  bool warning = false;
};

/// L-BFGS fit of A on the given transitions. The returned A never has a
/// higher loss than a_init.
inline MStepResult maximization_step(const std::vector<surrogate::Transition>& data,
                                     const surrogate::SurrogateParams& a_init, const ModelErrorCov& q,
                                     double normalizer, double l2, const lbfgs::MinimizeOptions& opts) {
  if (data.empty()) throw ConfigError("maximization_step: no data");
  const std::span<const surrogate::Transition> span(data);
  auto objective = [&](const Vector& theta) -> std::pair<double, Vector> {
    const surrogate::LossResult lr =
        surrogate::loss_and_gradient(a_init.with_flat(theta), span, q, l2, normalizer);
    return {lr.value, lr.gradient};
  };
  const lbfgs::MinimizeResult r = lbfgs::minimize(objective, a_init.flat(), opts);
  MStepResult out;
  out.a = a_init.with_flat(r.x_star);
  out.loss = r.f_star;
  out.grad_norm = r.g_norm;
  out.status = r.status;
  out.warning = r.status == lbfgs::Status::LineSearchFail;
  out.loss_init = objective(a_init.flat()).first;
  return out;
}

// ---------------------------------------------------------------------------
// EM loop

enum class TrainStatus { Completed, EarlyStopped, Diverged };

inline std::string to_string(TrainStatus s) {
  switch (s) {
    case TrainStatus::Completed: return "completed";
    case TrainStatus::EarlyStopped: return "early_stopped";
    case TrainStatus::Diverged: return "diverged";
  }
  return "?";
}

struct IterationRecord {
  int iter = 0;
  double sigma_q = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double state_rmse = std::numeric_limits<double>::quiet_NaN();
  lbfgs::Status mstep_status = lbfgs::Status::Converged;
  bool q_degenerate = false;
};

struct TrainingReport {
  surrogate::SurrogateParams a_star;
  ModelErrorCov q_star = ModelErrorCov::scalar(1.0, 1);
  std::vector<IterationRecord> history;
  TrainStatus status = TrainStatus::Completed;
  int failed_iteration = -1;
  std::string message;
  bool mstep_warning = false;
  Trajectory last_mean;  // smoothed mean of the final E-step
};

using IterationCallback =
    std::function<void(const IterationRecord&, const surrogate::SurrogateParams&, const ModelErrorCov&)>;

namespace detail {

inline double climatological_mean(const std::vector<enda::ObservationSlot>& obs) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& o : obs) {
    sum += o.values.sum();
    n += o.sites.size();
  }
  return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

inline double trajectory_rmse(const Trajectory& a, const Trajectory& b) {
  const std::size_t n = std::min(a.size(), b.size());
  double s = 0.0;
  Eigen::Index cnt = 0;
  for (std::size_t k = 0; k < n; ++k) {
    s += (a[k] - b[k]).squaredNorm();
    cnt += a[k].size();
  }
  return cnt > 0 ? std::sqrt(s / static_cast<double>(cnt)) : 0.0;
}

}  // namespace detail

/// Runs the EM iterations on y_{0:K}. `truth`, when given, only feeds the
/// diagnostic state RMSE. The callback sees every completed iteration.
inline TrainingReport train(const std::vector<enda::ObservationSlot>& obs, double dt, Eigen::Index nx,
                            const TrainerConfig& cfg, std::optional<surrogate::SurrogateParams> a0 = std::nullopt,
                            const Trajectory* truth = nullptr, const IterationCallback& callback = {}) {
  cfg.validate();
  if (obs.size() < 3) throw ConfigError("train: observations must span K >= 2 steps");
  const surrogate::StencilBasis basis(cfg.radius, static_cast<int>(nx));
  InitialState init = init_params(cfg, basis, dt / cfg.nc);
  if (a0) {
    if (!(a0->basis == basis) || a0->mode != cfg.mode) throw ConfigError("train: A0 does not match the configured basis");
    init.a = *a0;
  }
  RngStream ens_rng(cfg.seed, StreamId::Init, 1);
  const enda::Ensemble e0 = enda::initial_ensemble(obs.front(), nx, cfg.ne, detail::climatological_mean(obs),
                                                   cfg.init_spread, ens_rng);

  enda::SmootherOptions sopts;
  sopts.lag = cfg.lag;
  sopts.inflation = cfg.inflation;
  sopts.retain_ensemble = cfg.scheme == Scheme::Full;
  sopts.accumulate_residuals = cfg.scheme == Scheme::Approximate;

  TrainingReport rep;
  rep.a_star = init.a;
  rep.q_star = init.q;
  surrogate::SurrogateParams a = init.a;
  ModelErrorCov q = init.q;
  const lbfgs::MinimizeOptions mopts = cfg.mstep_options();

  for (int j = 0; j < cfg.n_iter; ++j) {
    enda::SmootherOutput es;
    try {
      es = enda::enks_run(a, q, obs, e0, sopts);
    } catch (const std::runtime_error& e) {  // BlowUpError, NumericalError
      rep.status = TrainStatus::Diverged;
      rep.failed_iteration = j;
      rep.message = std::string("E-step diverged at iteration ") + std::to_string(j) + ": " + e.what();
      return rep;
    }

    IterationRecord rec;
    rec.iter = j + 1;
    if (truth) rec.state_rmse = detail::trajectory_rmse(es.mean_trajectory, *truth);
    surrogate::SurrogateParams a_next = a;
    ModelErrorCov q_next = q;
    try {
      if (cfg.scheme == Scheme::Full) {
        const MemberStore store = unpack_members(*es.ensemble_trajectory);
        const auto data = ensemble_transitions(store);
        for (int s = 0; s < cfg.sweeps; ++s) {
          const MStepResult m = maximization_step(data, a_next, q_next, static_cast<double>(cfg.ne), cfg.l2, mopts);
          a_next = m.a;
          rec.loss = m.loss;
          rec.grad_norm = m.grad_norm;
          rec.mstep_status = m.status;
          rep.mstep_warning = rep.mstep_warning || m.warning;
          const enda::ResidualStatistic st = ensemble_residuals(a_next, store);
          const QUpdate qu = q_update(st.mean(), st.count, cfg.q_variant, cfg.hyperprior);
          q_next = qu.q;
          rec.q_degenerate = qu.degenerate;
        }
      } else {
        if (cfg.scheme == Scheme::Approximate) {
          const QUpdate qu = q_update(es.residuals.mean(), es.residuals.count, cfg.q_variant, cfg.hyperprior);
          q_next = qu.q;
          rec.q_degenerate = qu.degenerate;
        }
        const auto data = mean_transitions(es.mean_trajectory);
        const MStepResult m = maximization_step(data, a, q_next, 1.0, cfg.l2, mopts);
        a_next = m.a;
        rec.loss = m.loss;
        rec.grad_norm = m.grad_norm;
        rec.mstep_status = m.status;
        rep.mstep_warning = rep.mstep_warning || m.warning;
      }
    } catch (const std::runtime_error& e) {
      rep.status = TrainStatus::Diverged;
      rep.failed_iteration = j;
      rep.message = std::string("M-step failed at iteration ") + std::to_string(j) + ": " + e.what();
      return rep;
    }

    rec.sigma_q = sigma_q(q_next);
    const double sq_prev = sigma_q(q);
    const double a_norm_prev = a.coefficients.norm();
    const double a_change = (a_next.coefficients - a.coefficients).norm() / std::max(a_norm_prev, 1e-300);
    const double sq_change = std::abs(rec.sigma_q - sq_prev) / sq_prev;

    a = std::move(a_next);
    q = std::move(q_next);
    rep.a_star = a;
    rep.q_star = q;
    rep.last_mean = std::move(es.mean_trajectory);
    rep.history.push_back(rec);
    if (callback) callback(rec, a, q);

    if (cfg.early_stop && j > 0 && sq_change < cfg.sigma_q_rel_tol && a_change < cfg.a_rel_tol) {
      rep.status = TrainStatus::EarlyStopped;
      return rep;
    }
  }
  return rep;
}

}  // namespace daml::em
