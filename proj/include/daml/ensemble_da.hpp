#pragma once

// E-step engine: deterministic ETKF analysis, SQRT-CORE additive model error,
// and a fixed-lag ensemble Kalman smoother that accumulates the model-error
// residual statistic as smoothed states leave the lag window.

#include "daml/core.hpp"
#include "daml/model_error.hpp"
#include "daml/surrogate.hpp"

#include <Eigen/Eigenvalues>

#include <deque>
#include <optional>
#include <string>
#include <vector>

namespace daml::enda {

/// Members stored column-wise (nx x ne).
struct Ensemble {
  Matrix members;

  Eigen::Index nx() const { return members.rows(); }
  Eigen::Index ne() const { return members.cols(); }
  Vector mean() const { return members.rowwise().mean(); }
  Matrix anomalies() const { return members.colwise() - mean(); }

  static Ensemble from(const Vector& mean, const Matrix& anomalies) {
    return {anomalies.colwise() + mean};
  }
};

/// Observations at time index k: y = x[sites] + noise, R = sigma_y^2 I.
struct ObservationSlot {
  int k = 0;
  std::vector<int> sites;
  Vector values;
  double sigma_y = 1.0;

  Eigen::Index ny() const { return static_cast<Eigen::Index>(sites.size()); }

  void validate(Eigen::Index nx) const {
    if (static_cast<Eigen::Index>(sites.size()) != values.size())
      throw DimensionError("ObservationSlot: sites / values length mismatch");
    if (!(sigma_y > 0.0)) throw ConfigError("ObservationSlot: sigma_y must be positive");
    for (std::size_t i = 0; i < sites.size(); ++i) {
      if (sites[i] < 0 || sites[i] >= nx) throw DimensionError("ObservationSlot: site index out of range");
      if (i > 0 && sites[i] <= sites[i - 1]) throw ConfigError("ObservationSlot: sites must be sorted and unique");
    }
    if (!values.allFinite()) throw NumericalError("ObservationSlot: non-finite observation");
  }
};

// ---------------------------------------------------------------------------
// ETKF

struct Analysis {
  Ensemble ensemble;
  Matrix transform;  // symmetric square root, ne x ne
  Vector weight;     // mean update in ensemble space
  double innovation_rms = 0.0;
};

/// Right operator reproducing the analysis on any ensemble: E_a = E * omega.
inline Matrix ensemble_operator(const Matrix& transform, const Vector& weight) {
  const Eigen::Index ne = transform.rows();
  const Matrix ones = Matrix::Constant(ne, ne, 1.0 / static_cast<double>(ne));
  const Matrix centering = Matrix::Identity(ne, ne) - ones;
  return ones + centering * (weight * Vector::Ones(ne).transpose() + transform);
}

/// Deterministic ensemble transform analysis (symmetric square root).
inline Analysis etkf_analysis(const Ensemble& forecast, const ObservationSlot& obs, double inflation = 1.0) {
  const Eigen::Index nx = forecast.nx(), ne = forecast.ne();
  if (ne < 2) throw ConfigError("etkf_analysis: ensemble needs at least two members");
  obs.validate(nx);
  const Vector mean = forecast.mean();
  Matrix x = forecast.members.colwise() - mean;
  if (inflation != 1.0) x *= inflation;

  Analysis out;
  if (obs.ny() == 0) {
    out.ensemble = Ensemble::from(mean, x);
    out.transform = Matrix::Identity(ne, ne);
    out.weight = Vector::Zero(ne);
    return out;
  }
  Matrix y(obs.ny(), ne);
  Vector d(obs.ny());
  for (Eigen::Index i = 0; i < obs.ny(); ++i) {
    y.row(i) = x.row(obs.sites[static_cast<std::size_t>(i)]);
    d[i] = obs.values[i] - mean[obs.sites[static_cast<std::size_t>(i)]];
  }
  const double inv_r = 1.0 / (obs.sigma_y * obs.sigma_y);
  const double nm1 = static_cast<double>(ne - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> eig((y.transpose() * y) * inv_r);
  Vector lambda = eig.eigenvalues().cwiseMax(0.0);
  const double cond = (nm1 + lambda.maxCoeff()) / nm1;
  if (!std::isfinite(cond) || cond > 1e14)
    throw NumericalError("etkf_analysis: ensemble-space matrix is numerically singular (condition " +
                         std::to_string(cond) + ")");
  const Matrix& v = eig.eigenvectors();
  const Vector inv = (lambda.array() + nm1).inverse();
  const Matrix pa = v * inv.asDiagonal() * v.transpose();
  out.weight = pa * (y.transpose() * d) * inv_r;
  out.transform = v * (nm1 * inv.array()).sqrt().matrix().asDiagonal() * v.transpose();
  out.transform = 0.5 * (out.transform + out.transform.transpose());
  out.innovation_rms = rms(d);
  out.ensemble = Ensemble::from(mean + x * out.weight, x * out.transform);
  return out;
}

// ---------------------------------------------------------------------------
// SQRT-CORE

/// Ensemble-space transform T (and its inverse) with X T T^T X^T / (ne - 1) =
/// X X^T / (ne - 1) + Pi Q Pi, Pi the projector onto the anomaly span.
struct CoreTransform {
  Matrix transform;
  Matrix inverse;
  Eigen::Index rank = 0;
};

inline CoreTransform sqrt_core_transform(const Matrix& anomalies, const ModelErrorCov& q) {
  const Eigen::Index nx = anomalies.rows(), ne = anomalies.cols();
  require_dim(q.nx(), nx, "sqrt_core (Q)");
  if (ne < 2) throw ConfigError("sqrt_core: ensemble needs at least two members");
  // SVD of the anomalies directly; the Gram matrix would square their condition number.
  const Eigen::JacobiSVD<Matrix> svd(anomalies, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  const double smax = sv.size() > 0 ? sv.maxCoeff() : 0.0;
  if (!(smax > 0.0)) throw NumericalError("sqrt_core: ensemble has collapsed; increase Ne or add jitter");
  Eigen::Index rank = 0;
  while (rank < sv.size() && sv[rank] > 1e-6 * smax) ++rank;
  if (rank < std::min(nx, ne - 1))
    throw NumericalError("sqrt_core: anomaly matrix is rank-deficient (rank " + std::to_string(rank) +
                         "); increase Ne or add jitter");
  const Matrix vr = svd.matrixV().leftCols(rank);
  const Matrix u = svd.matrixU().leftCols(rank);  // left singular vectors
  const Vector sinv = sv.head(rank).cwiseInverse();
  Matrix qu;
  if (q.variant() == QVariant::Full)
    qu = q.dense() * u;
  else
    qu = q.diagonal_values().asDiagonal() * u;
  Matrix core = sinv.asDiagonal() * (u.transpose() * qu) * sinv.asDiagonal();
  core = Matrix::Identity(rank, rank) + static_cast<double>(ne - 1) * 0.5 * (core + core.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> ce(core);
  const Vector lam = ce.eigenvalues().cwiseMax(0.0);
  const Matrix& w = ce.eigenvectors();
  const Vector root = lam.cwiseSqrt();
  const Vector inv_root = root.unaryExpr([](double r) { return r > 0.0 ? 1.0 / r : 0.0; });
  const Matrix wr = vr * w;
  CoreTransform out;
  out.rank = rank;
  out.transform = Matrix::Identity(ne, ne) + wr * (root.array() - 1.0).matrix().asDiagonal() * wr.transpose();
  out.inverse = Matrix::Identity(ne, ne) + wr * (inv_root.array() - 1.0).matrix().asDiagonal() * wr.transpose();
  return out;
}

/// Adds Q to the ensemble covariance (within the anomaly span) without
/// changing the mean.
inline Ensemble sqrt_core(const Ensemble& forecast, const ModelErrorCov& q) {
  const Vector mean = forecast.mean();
  const Matrix x = forecast.members.colwise() - mean;
  const CoreTransform t = sqrt_core_transform(x, q);
  return Ensemble::from(mean, x * t.transform);
}

// ---------------------------------------------------------------------------
// Initialization

/// Mean = observed values where available, climatological mean elsewhere;
/// centred i.i.d. normal anomalies of the given spread.
inline Ensemble initial_ensemble(const ObservationSlot& first, Eigen::Index nx, Eigen::Index ne,
                                 double climatological_mean, double spread, RngStream& rng) {
  first.validate(nx);
  Vector mean = Vector::Constant(nx, climatological_mean);
  for (std::size_t i = 0; i < first.sites.size(); ++i) mean[first.sites[i]] = first.values[static_cast<Eigen::Index>(i)];
  Matrix x(nx, ne);
  for (Eigen::Index c = 0; c < ne; ++c)
    for (Eigen::Index r = 0; r < nx; ++r) x(r, c) = spread * rng.normal();
  x = x.colwise() - x.rowwise().mean();
  return Ensemble::from(mean, x);
}

// ---------------------------------------------------------------------------
// Fixed-lag smoother

/// Running sum of member-averaged residual outer products
/// (x_k - F(x_{k-1}))(x_k - F(x_{k-1}))^T over finalized steps.
struct ResidualStatistic {
  Matrix sum;
  int count = 0;

  Matrix mean() const { return count > 0 ? Matrix(sum / count) : sum; }
};

struct StepDiagnostics {
  int k;
  double innovation_rms;
  double forecast_spread;
};

struct SmootherOutput {
  Trajectory mean_trajectory;
  std::optional<std::vector<Matrix>> ensemble_trajectory;
  ResidualStatistic residuals;
  std::vector<StepDiagnostics> diagnostics;
};

struct SmootherOptions {
  int lag = 4;
  bool retain_ensemble = false;
  bool accumulate_residuals = true;
  double inflation = 1.0;
};

namespace detail {

struct LagSlot {
  int k;
  Vector mean;
  Matrix anomalies;  // marginal spread, replayed with the analysis transforms
  Matrix cross;      // factor carrying the covariance with the current state
};

template <class Model>
Matrix propagate(const Model& model, const Matrix& members, int k) {
  Matrix out(members.rows(), members.cols());
  parallel_chunks(static_cast<std::size_t>(members.cols()), 1, [&](std::size_t b, std::size_t e, std::size_t) {
    for (std::size_t i = b; i < e; ++i) {
      const auto c = static_cast<Eigen::Index>(i);
      try {
        out.col(c) = model(State(members.col(c)));
      } catch (const BlowUpError&) {
        throw BlowUpError("enks_run: member " + std::to_string(i) + " blew up at step " + std::to_string(k));
      }
    }
  });
  return out;
}

}  // namespace detail

/// Fixed-lag EnKS with SQRT-CORE model error, driven by any propagator
/// x -> F(x). Each analysis transform is replayed on the L previous states;
/// a state is finalized once it leaves the lag window (or at the end).
/// The lagged mean update uses a cross-covariance factor that also receives
/// the inverse SQRT-CORE transform, which keeps lagged means exact in the
/// linear-Gaussian full-rank case.
template <class Model>
SmootherOutput enks_run(const Model& model, const ModelErrorCov& q, const std::vector<ObservationSlot>& obs,
                        const Ensemble& init, const SmootherOptions& opts) {
  if (obs.size() < 2) throw ConfigError("enks_run: need observations for K >= 1 steps");
  if (opts.lag < 0) throw ConfigError("enks_run: lag must be >= 0");
  const Eigen::Index nx = init.nx(), ne = init.ne();
  require_dim(q.nx(), nx, "enks_run (Q)");
  for (std::size_t k = 0; k < obs.size(); ++k) {
    if (obs[k].k != static_cast<int>(k)) throw ConfigError("enks_run: observation slots must be ordered k = 0..K");
    obs[k].validate(nx);
  }
  const int kmax = static_cast<int>(obs.size()) - 1;

  SmootherOutput out;
  out.mean_trajectory.dt = 0.0;
  out.mean_trajectory.states.resize(obs.size());
  if (opts.retain_ensemble) out.ensemble_trajectory.emplace(obs.size());
  out.residuals.sum = Matrix::Zero(nx, nx);
  out.diagnostics.reserve(obs.size());

  std::deque<detail::LagSlot> window;
  std::optional<Matrix> last_final;  // members of the previously finalized state

  auto finalize = [&](detail::LagSlot& slot) {
    Matrix members = slot.anomalies.colwise() + slot.mean;
    out.mean_trajectory.states[static_cast<std::size_t>(slot.k)] = slot.mean;
    if (opts.accumulate_residuals && last_final) {
      const Matrix pred = detail::propagate(model, *last_final, slot.k);
      const Matrix r = members - pred;
      out.residuals.sum.noalias() += (r * r.transpose()) / static_cast<double>(ne);
      ++out.residuals.count;
    }
    if (opts.retain_ensemble) (*out.ensemble_trajectory)[static_cast<std::size_t>(slot.k)] = members;
    last_final = std::move(members);
  };

  auto assimilate = [&](const Vector& mean, const Matrix& x, int k, double spread) {
    // States older than k - L leave the window before this analysis.
    while (static_cast<int>(window.size()) > opts.lag) {
      finalize(window.front());
      window.pop_front();
    }
    const Analysis a = etkf_analysis(Ensemble::from(mean, x), obs[static_cast<std::size_t>(k)], opts.inflation);
    for (auto& slot : window) {
      slot.mean += slot.cross * a.weight;
      slot.anomalies = slot.anomalies * a.transform;
      slot.cross = slot.cross * a.transform;
    }
    const Vector amean = a.ensemble.mean();
    Matrix ax = a.ensemble.members.colwise() - amean;
    window.push_back({k, amean, ax, ax});
    out.diagnostics.push_back({k, a.innovation_rms, spread});
  };

  {
    const Vector m0 = init.mean();
    const Matrix x0 = init.members.colwise() - m0;
    assimilate(m0, x0, 0, rms(x0.rowwise().norm()) / std::sqrt(static_cast<double>(ne - 1)));
  }
  for (int k = 1; k <= kmax; ++k) {
    const detail::LagSlot& cur = window.back();
    const Matrix fc = detail::propagate(model, Matrix(cur.anomalies.colwise() + cur.mean), k);
    const Vector fmean = fc.rowwise().mean();
    const Matrix fx = fc.colwise() - fmean;
    const CoreTransform core = sqrt_core_transform(fx, q);
    for (auto& slot : window) slot.cross = slot.cross * core.inverse;
    const Matrix x = fx * core.transform;
    const double spread = std::sqrt(x.squaredNorm() / static_cast<double>((ne - 1) * nx));
    assimilate(fmean, x, k, spread);
  }
  while (!window.empty()) {
    finalize(window.front());
    window.pop_front();
  }
  return out;
}

/// Surrogate-driven smoother: the propagator is the resolvent F_A.
inline SmootherOutput enks_run(const surrogate::SurrogateParams& a, const ModelErrorCov& q,
                               const std::vector<ObservationSlot>& obs, const Ensemble& init,
                               const SmootherOptions& opts) {
  require_dim(init.nx(), a.nx(), "enks_run (init)");
  auto model = [&a](const State& x) { return surrogate::resolvent(a, x); };
  SmootherOutput out = enks_run(model, q, obs, init, opts);
  out.mean_trajectory.dt = a.interval();
  return out;
}

}  // namespace daml::enda
