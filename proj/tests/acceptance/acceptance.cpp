// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--out DIR] [--seeds N] [criterion ...]
//
// With no criterion numbers every criterion 1..12 runs. Long training runs
// write their report bundles under DIR (default acceptance_runs). The exit
// code is nonzero when any selected criterion fails.

#include "daml/daml.hpp"

#include "../oracles.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace daml;

namespace {

// ---------------------------------------------------------------------------
// Tolerances

namespace tol {
// 1: reference models
constexpr double kL96Std = 3.62, kL96StdTol = 0.05;
constexpr double kL96Lambda = 1.67, kL96LambdaTol = 0.05;
constexpr double kL05Std = 3.54, kL05StdTol = 0.10;
constexpr double kL05LyapTime = 0.72, kL05LyapTimeTol = 0.05;
constexpr double kReferenceBudget = 120.0;  // seconds, each
// 2: identifiability
constexpr double kResolventAgreement = 1e-12;
constexpr double kFitMaxError = 1e-4;
constexpr double kIdentifiabilityBudget = 60.0;
// 3: gradients
constexpr double kGradientRel = 1e-6;
constexpr double kDotProductRel = 1e-10;
// 4: linear-Gaussian oracle
constexpr double kKalman = 1e-8;
// 5: SQRT-CORE
constexpr double kCoreCov = 1e-10;
constexpr double kCoreMean = 1e-12;
// 6: Q update
constexpr double kPosteriorSlack = 1e-9;
constexpr double kFactorApplied = 1e-14;
// 7: L96 nominal
constexpr double kL96PiHalfMin = 3.5;
constexpr double kL96SigmaLo = 0.05, kL96SigmaHi = 0.15;
constexpr double kL96Lambda1Lo = 1.4, kL96Lambda1Hi = 1.9;
constexpr double kL96Budget = 2.0 * 3600.0;
// 8: L05III nominal
constexpr double kL05PiHalfMin = 3.0;
constexpr double kL05SigmaLo = 0.05, kL05SigmaHi = 0.12;
constexpr double kL05Lambda1Lo = 0.85, kL05Lambda1Hi = 1.2;
constexpr double kL05Budget = 3.0 * 3600.0;
// 9: full vs approximate
constexpr double kSchemeLambdaGap = 0.1;
// 10-11: downscaled runs
constexpr int kLagK = 2000;
// 12: properties
constexpr double kRk4Order = 4.0, kRk4OrderTol = 0.2;
constexpr int kSigmaQConvergedBy = 10;
constexpr double kSigmaQConvergedRel = 0.01;
constexpr double kArgminInvariance = 1e-7;
constexpr double kParseval = 0.05;
}  // namespace tol

// ---------------------------------------------------------------------------
// Helpers

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& note) {
    pass = pass && ok;
    notes.push_back(note + (ok ? "" : " [fail]"));
  }
};

Matrix random_matrix(Eigen::Index r, Eigen::Index c, RngStream& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

Matrix random_spd(Eigen::Index n, RngStream& rng, double scale = 0.3) {
  const Matrix b = random_matrix(n, n, rng);
  return scale * (b * b.transpose() / static_cast<double>(n) + 0.2 * Matrix::Identity(n, n));
}

Matrix sample_cov(const Matrix& e) {
  const Matrix x = e.colwise() - e.rowwise().mean();
  return x * x.transpose() / static_cast<double>(e.cols() - 1);
}

double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

double mean_of(const std::vector<double>& v) {
  return v.empty() ? std::numeric_limits<double>::quiet_NaN()
                   : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Training runs, shared between criteria

struct RunKey {
  harness::ModelKind model;
  em::Scheme scheme;
  int k;
  int lag;
  std::uint64_t seed;

  auto tie() const { return std::tie(model, scheme, k, lag, seed); }
  bool operator<(const RunKey& o) const { return tie() < o.tie(); }

  std::string label() const {
    return std::string(model == harness::ModelKind::L96 ? "l96" : "l05iii") + "_" + em::to_string(scheme) + "_k" +
           std::to_string(k) + "_lag" + std::to_string(lag) + "_seed" + std::to_string(seed);
  }
};

struct RunResult {
  harness::RunSummary summary;
  double seconds = 0.0;
};

class Runs {
 public:
  Runs(std::string out, int n_seeds) : out_(std::move(out)), n_seeds_(n_seeds) {}

  int n_seeds() const { return n_seeds_; }

  const RunResult& get(const RunKey& key) {
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    harness::ExperimentConfig cfg = harness::ExperimentConfig::nominal(key.model, key.seed);
    cfg.k = key.k;
    cfg.trainer.scheme = key.scheme;
    cfg.trainer.lag = key.lag;
    cfg.output_dir = out_ + "/" + key.label();
    std::cerr << "  training " << key.label() << " ..." << std::flush;
    const auto t0 = Clock::now();
    RunResult r;
    r.summary = harness::run_experiment(cfg, {true, false});
    r.seconds = seconds_since(t0);
    std::cerr << " pi_half=" << r.summary.pi_half << " sigma_q=" << r.summary.sigma_q
              << " lambda1=" << r.summary.lambda1 << " (" << fmt(r.seconds, 3) << " s)\n";
    return cache_.emplace(key, std::move(r)).first->second;
  }

  struct Aggregate {
    double pi_half, sigma_q, lambda1, seconds;
    std::vector<const RunResult*> runs;
  };

  Aggregate over_seeds(harness::ModelKind m, em::Scheme s, int k, int lag) {
    Aggregate a{};
    std::vector<double> p, q, l;
    for (int i = 1; i <= n_seeds_; ++i) {
      const RunResult& r = get({m, s, k, lag, static_cast<std::uint64_t>(i)});
      a.runs.push_back(&r);
      p.push_back(r.summary.pi_half);
      q.push_back(r.summary.sigma_q);
      l.push_back(r.summary.lambda1);
      a.seconds += r.seconds;
    }
    a.pi_half = mean_of(p);
    a.sigma_q = mean_of(q);
    a.lambda1 = mean_of(l);
    return a;
  }

 private:
  std::string out_;
  int n_seeds_;
  std::map<RunKey, RunResult> cache_;
};

constexpr auto kL96 = harness::ModelKind::L96;
constexpr auto kL05 = harness::ModelKind::L05III;
constexpr auto kApprox = em::Scheme::Approximate;
constexpr auto kFull = em::Scheme::Full;

// ---------------------------------------------------------------------------
// 1. Reference-model fidelity

Outcome reference_fidelity(Runs&) {
  Outcome o;
  {
    const auto t0 = Clock::now();
    const auto cfg = harness::ExperimentConfig::nominal(kL96, 1);
    const harness::TruthRun truth = harness::generate_truth(cfg);
    const double sd = metrics::climatological_std(truth.observed);
    const double l1 =
        harness::reference_lyapunov(cfg, truth.final_full, cfg.metrics.ls_steps, cfg.metrics.ls_transient)
            .exponents.front();
    const double secs = seconds_since(t0);
    o.require(std::abs(sd - tol::kL96Std) <= tol::kL96StdTol, "L96 std=" + fmt(sd));
    o.require(std::abs(l1 - tol::kL96Lambda) <= tol::kL96LambdaTol, "L96 lambda1=" + fmt(l1));
    o.require(secs < tol::kReferenceBudget, "L96 " + fmt(secs, 3) + "s");
  }
  {
    const auto t0 = Clock::now();
    const auto cfg = harness::ExperimentConfig::nominal(kL05, 1);
    const harness::TruthRun truth = harness::generate_truth(cfg);
    const double sd = metrics::climatological_std(truth.observed);
    const double l1 =
        harness::reference_lyapunov(cfg, truth.final_full, cfg.metrics.ls_steps, cfg.metrics.ls_transient)
            .exponents.front();
    const double secs = seconds_since(t0);
    o.require(std::abs(sd - tol::kL05Std) <= tol::kL05StdTol, "L05III slow std=" + fmt(sd));
    o.require(std::abs(1.0 / l1 - tol::kL05LyapTime) <= tol::kL05LyapTimeTol,
              "L05III decoupled Lyapunov time=" + fmt(1.0 / l1));
    o.require(secs < tol::kReferenceBudget, "L05III " + fmt(secs, 3) + "s");
  }
  return o;
}

// ---------------------------------------------------------------------------
// 2. Identifiability witness

Outcome identifiability(Runs&) {
  Outcome o;
  const auto t0 = Clock::now();
  {
    const surrogate::StencilBasis basis(2, 40);
    const dynamics::L96 f{{40, 8.0}};
    RngStream rng(21);
    double worst = 0.0;
    for (auto mode : {surrogate::Mode::Homogeneous, surrogate::Mode::Inhomogeneous}) {
      const auto a = surrogate::l96_coefficients(basis, 8.0, mode, 0.05);
      for (int trial = 0; trial < 10; ++trial) {
        const State x = State::Constant(40, 2.0) + 3.6 * rng.normal_vector(40);
        worst = std::max(worst, max_abs(surrogate::resolvent(a, x) - dynamics::rk4_step(f, x, 0.05)));
      }
    }
    o.require(worst < tol::kResolventAgreement, "resolvent gap=" + fmt(worst, 3));
  }
  {
    const double dt = 0.05;
    const dynamics::L96 f{{8, 8.0}};
    RngStream rng(22);
    State x = State::Constant(8, 8.0) + rng.normal_vector(8);
    x = dynamics::advance(f, x, dt, 500);
    const Trajectory t = dynamics::integrate(f, x, dt, 200);
    const surrogate::StencilBasis basis(2, 8);
    const auto truth = surrogate::l96_coefficients(basis, 8.0, surrogate::Mode::Homogeneous, dt);
    const auto a0 = surrogate::SurrogateParams::zeros(basis, surrogate::Mode::Homogeneous, dt);
    lbfgs::MinimizeOptions opts;
    opts.max_iterations = 2000;
    opts.g_tol = 1e-12;
    const em::MStepResult m = em::maximization_step(em::mean_transitions(t), a0, ModelErrorCov::scalar(1.0, 8),
                                                    1.0, 0.0, opts);
    const double err = max_abs(m.a.coefficients - truth.coefficients);
    o.require(err < tol::kFitMaxError, "fit max error=" + fmt(err, 3));
  }
  const double secs = seconds_since(t0);
  o.require(secs < tol::kIdentifiabilityBudget, fmt(secs, 3) + "s");
  return o;
}

// ---------------------------------------------------------------------------
// 3. Gradient correctness

Outcome gradients(Runs&) {
  Outcome o;
  const int nx = 8, k = 5;
  double worst_grad = 0.0, worst_dot = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    RngStream rng(300 + static_cast<std::uint64_t>(inst));
    const int nc = 1 + inst % 2;
    const auto mode = (inst / 2) % 2 == 0 ? surrogate::Mode::Homogeneous : surrogate::Mode::Inhomogeneous;
    auto a = surrogate::SurrogateParams::zeros(surrogate::StencilBasis(1, nx), mode, 0.05, nc);
    for (Eigen::Index i = 0; i < a.coefficients.size(); ++i) a.coefficients.data()[i] = 0.2 * rng.normal();
    std::vector<State> states;
    for (int s = 0; s <= k; ++s) states.push_back(rng.normal_vector(nx));
    std::vector<surrogate::Transition> pairs;
    for (int s = 1; s <= k; ++s) pairs.push_back({&states[s - 1], &states[s], rng.uniform(0.5, 1.5)});
    const ModelErrorCov q = ModelErrorCov::full(random_spd(nx, rng));
    const double l2 = rng.uniform(0.0, 0.1);
    auto value = [&](const Vector& th) { return surrogate::loss_and_gradient(a.with_flat(th), pairs, q, l2, 3.0).value; };
    const Vector g = surrogate::loss_and_gradient(a, pairs, q, l2, 3.0).gradient;
    const Vector th = a.flat();
    Vector fd(th.size());
    for (Eigen::Index i = 0; i < th.size(); ++i) {
      const double eps = 1e-6 * std::max(1.0, std::abs(th[i]));
      Vector tp = th, tm = th;
      tp[i] += eps;
      tm[i] -= eps;
      fd[i] = (value(tp) - value(tm)) / (2.0 * eps);
    }
    worst_grad = std::max(worst_grad, (g - fd).norm() / std::max(fd.norm(), 1e-12));

    // <ybar, dF> = <xbar, dx> + <abar, dA>
    const State x = rng.normal_vector(nx), dx = rng.normal_vector(nx), ybar = rng.normal_vector(nx);
    surrogate::RowMatrix da(a.coefficients.rows(), a.coefficients.cols());
    for (Eigen::Index i = 0; i < da.size(); ++i) da.data()[i] = rng.normal();
    const double lhs = ybar.dot(surrogate::resolvent_tangent(a, x, dx, da));
    const auto [abar, xbar] = surrogate::resolvent_adjoint(a, x, ybar);
    const double rhs = xbar.dot(dx) + abar.dot(Eigen::Map<const Vector>(da.data(), da.size()));
    worst_dot = std::max(worst_dot, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
  }
  o.require(worst_grad < tol::kGradientRel, "worst FD rel error=" + fmt(worst_grad, 3));
  o.require(worst_dot < tol::kDotProductRel, "worst dot-product gap=" + fmt(worst_dot, 3));
  return o;
}

// ---------------------------------------------------------------------------
// 4. Linear-Gaussian oracle

Outcome kalman_oracle(Runs&) {
  Outcome o;
  const Eigen::Index nx = 4, ne = 5;
  const int k = 20, lag = 4;
  RngStream rng(400);
  const Matrix raw = random_matrix(nx, nx, rng);
  const Matrix m = 0.9 * raw / Eigen::JacobiSVD<Matrix>(raw).singularValues()[0];
  const Matrix q = random_spd(nx, rng, 0.2);
  const Matrix lq = q.llt().matrixL();
  std::vector<enda::ObservationSlot> obs;
  State x = rng.normal_vector(nx);
  const std::vector<int> sites{0, 2, 3};
  for (int t = 0; t <= k; ++t) {
    if (t > 0) x = m * x + lq * rng.normal_vector(nx);
    enda::ObservationSlot s{t, sites, Vector(3), 0.8};
    for (int i = 0; i < 3; ++i) s.values[i] = x[sites[static_cast<std::size_t>(i)]] + 0.8 * rng.normal();
    obs.push_back(s);
  }
  const enda::Ensemble init{random_matrix(nx, ne, rng)};
  const oracle::LinearGaussianModel lg{m, q, init.mean(), sample_cov(init.members)};
  auto model = [&m](const State& z) -> State { return m * z; };

  // Filter means against the sequential Kalman filter.
  enda::SmootherOptions fo;
  fo.lag = 0;
  const auto filt = enda::enks_run(model, ModelErrorCov::full(q), obs, init, fo);
  const std::vector<Vector> kf = oracle::kalman_filter_means(lg, obs);
  double gap_filter = 0.0;
  for (int t = 0; t <= k; ++t)
    gap_filter = std::max(gap_filter, max_abs(filt.mean_trajectory[static_cast<std::size_t>(t)] - kf[static_cast<std::size_t>(t)]));
  o.require(gap_filter < tol::kKalman, "ETKF vs Kalman filter=" + fmt(gap_filter, 3));

  // Lag-L smoother means against batch Gaussian conditioning.
  enda::SmootherOptions so;
  so.lag = lag;
  const auto smooth = enda::enks_run(model, ModelErrorCov::full(q), obs, init, so);
  double gap_smoother = 0.0;
  for (int t = 0; t <= k; ++t) {
    const Vector want = oracle::fixed_lag_mean(lg, obs, t, std::min(k, t + lag));
    gap_smoother = std::max(gap_smoother, max_abs(smooth.mean_trajectory[static_cast<std::size_t>(t)] - want));
  }
  o.require(gap_smoother < tol::kKalman, "EnKS(L=4) vs fixed-lag smoother=" + fmt(gap_smoother, 3));

  // The two oracle routes must agree with each other.
  double gap_routes = 0.0;
  for (int t = 0; t <= k; ++t)
    gap_routes = std::max(gap_routes, max_abs(oracle::fixed_lag_mean(lg, obs, t, t) - kf[static_cast<std::size_t>(t)]));
  o.require(gap_routes < tol::kKalman, "batch vs sequential oracle=" + fmt(gap_routes, 3));
  return o;
}

// ---------------------------------------------------------------------------
// 5. SQRT-CORE identity

Outcome sqrt_core_identity(Runs&) {
  Outcome o;
  double worst_cov = 0.0, worst_mean = 0.0;
  for (std::uint64_t seed = 500; seed < 510; ++seed) {
    RngStream rng(seed);
    const enda::Ensemble f{random_matrix(10, 11, rng)};
    const Matrix q = random_spd(10, rng);
    const enda::Ensemble g = enda::sqrt_core(f, ModelErrorCov::full(q));
    worst_cov = std::max(worst_cov, max_abs(sample_cov(g.members) - sample_cov(f.members) - q));
    worst_mean = std::max(worst_mean, max_abs(g.mean() - f.mean()));
  }
  o.require(worst_cov < tol::kCoreCov, "cov gap=" + fmt(worst_cov, 3));
  o.require(worst_mean < tol::kCoreMean, "mean shift=" + fmt(worst_mean, 3));
  return o;
}

// ---------------------------------------------------------------------------
// 6. Q update

// Negative log posterior over a full Q, written from the density directly.
double full_q_neg_log_post(const Matrix& q, const Matrix& s, int k, em::Hyperprior prior) {
  const Eigen::LLT<Matrix> llt(q);
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  double out = 0.5 * k * (logdet + llt.solve(s).trace());
  if (prior == em::Hyperprior::Jeffreys) out += 0.5 * (static_cast<double>(q.rows()) + 1.0) * logdet;
  return out;
}

Outcome q_update_optimality(Runs&) {
  Outcome o;
  const int k = 50;
  const Eigen::Index nx = 6;
  RngStream rng(600);
  const Matrix s = random_spd(nx, rng, 1.0);
  bool beats = true;
  double margin = std::numeric_limits<double>::infinity();
  for (auto prior : {em::Hyperprior::None, em::Hyperprior::Jeffreys}) {
    const Matrix q = em::q_update(s, k, QVariant::Full, prior).q.dense();
    const double best = full_q_neg_log_post(q, s, k, prior);
    for (int trial = 0; trial < 20; ++trial) {
      const Matrix g = Matrix::Identity(nx, nx) + 0.1 * random_matrix(nx, nx, rng);
      const Matrix p = g * q * g.transpose();
      const double v = full_q_neg_log_post(p, s, k, prior);
      margin = std::min(margin, v - best);
      beats = beats && v > best - tol::kPosteriorSlack;
    }
  }
  o.require(beats, "min margin over 40 perturbations=" + fmt(margin, 3));

  bool exact = true;
  for (int kk : {1, 7, 200, 5000})
    for (Eigen::Index n : {1, 8, 36, 40}) {
      const auto kd = static_cast<double>(kk), nd = static_cast<double>(n);
      exact = exact && em::scalar_jeffreys_factor(kk, n) == kd / (kd * nd + 2.0);
      exact = exact && em::matrix_jeffreys_factor(kk, n) == kd / (kd + nd + 1.0);
    }
  o.require(exact, "factor formulas exact");

  // The updates apply those factors to the residual statistic.
  const double jitter = ModelErrorCov::kJitter;
  const double qs = em::q_update(s, k, QVariant::Scalar, em::Hyperprior::Jeffreys).q.dense()(0, 0) - jitter;
  const double qs_want = em::scalar_jeffreys_factor(k, nx) * s.trace();
  const Matrix qf = em::q_update(s, k, QVariant::Full, em::Hyperprior::Jeffreys).q.dense() -
                    jitter * Matrix::Identity(nx, nx);
  const Matrix qf_want = em::matrix_jeffreys_factor(k, nx) * s;
  const double applied = std::max(std::abs(qs - qs_want) / qs_want, max_abs(qf - qf_want) / max_abs(qf_want));
  o.require(applied < tol::kFactorApplied, "applied factor rel gap=" + fmt(applied, 3));
  return o;
}

// ---------------------------------------------------------------------------
// 7-11. Training runs

void require_completed(Outcome& o, const Runs::Aggregate& a) {
  bool ok = true;
  for (const RunResult* r : a.runs) ok = ok && r->summary.status != "diverged";
  o.require(ok, "no diverged runs");
}

Outcome l96_nominal(Runs& runs) {
  Outcome o;
  const auto a = runs.over_seeds(kL96, kApprox, 5000, 4);
  require_completed(o, a);
  o.require(a.pi_half >= tol::kL96PiHalfMin, "pi_half=" + fmt(a.pi_half));
  o.require(a.sigma_q >= tol::kL96SigmaLo && a.sigma_q <= tol::kL96SigmaHi, "sigma_q=" + fmt(a.sigma_q));
  o.require(a.lambda1 >= tol::kL96Lambda1Lo && a.lambda1 <= tol::kL96Lambda1Hi, "lambda1=" + fmt(a.lambda1));
  o.require(a.seconds <= tol::kL96Budget, fmt(a.seconds / 60.0, 3) + " min");
  return o;
}

Outcome l05iii_nominal(Runs& runs) {
  Outcome o;
  const auto a = runs.over_seeds(kL05, kApprox, 5000, 4);
  require_completed(o, a);
  o.require(a.pi_half >= tol::kL05PiHalfMin, "pi_half=" + fmt(a.pi_half));
  o.require(a.sigma_q >= tol::kL05SigmaLo && a.sigma_q <= tol::kL05SigmaHi, "sigma_q=" + fmt(a.sigma_q));
  o.require(a.lambda1 >= tol::kL05Lambda1Lo && a.lambda1 <= tol::kL05Lambda1Hi, "lambda1=" + fmt(a.lambda1));
  o.require(a.seconds <= tol::kL05Budget, fmt(a.seconds / 60.0, 3) + " min");
  return o;
}

Outcome scheme_ordering(Runs& runs) {
  Outcome o;
  const auto approx = runs.over_seeds(kL96, kApprox, 5000, 4);
  const auto full = runs.over_seeds(kL96, kFull, 5000, 4);
  require_completed(o, full);
  o.require(full.sigma_q >= approx.sigma_q,
            "sigma_q full=" + fmt(full.sigma_q) + " approx=" + fmt(approx.sigma_q));
  o.require(std::abs(full.lambda1 - approx.lambda1) <= tol::kSchemeLambdaGap,
            "lambda1 full=" + fmt(full.lambda1) + " approx=" + fmt(approx.lambda1));
  return o;
}

Outcome lag_sensitivity(Runs& runs) {
  Outcome o;
  const auto smooth = runs.over_seeds(kL96, kApprox, tol::kLagK, 4);
  const auto filter = runs.over_seeds(kL96, kApprox, tol::kLagK, 0);
  o.require(smooth.pi_half > filter.pi_half,
            "pi_half L=4: " + fmt(smooth.pi_half) + " L=0: " + fmt(filter.pi_half));
  return o;
}

Outcome window_trend(Runs& runs) {
  Outcome o;
  std::string line = "pi_half";
  double prev = -std::numeric_limits<double>::infinity();
  bool monotone = true;
  for (int k : {200, 800, 3200}) {
    const double p = runs.over_seeds(kL96, kApprox, k, 4).pi_half;
    monotone = monotone && p >= prev;
    prev = p;
    line += " K=" + std::to_string(k) + ":" + fmt(p);
  }
  o.require(monotone, line);
  return o;
}

// ---------------------------------------------------------------------------
// 12. Property suite

Outcome properties(Runs& runs) {
  Outcome o;
  {
    // RK4 order from successive step halvings on L96.
    const dynamics::L96 f{{40, 8.0}};
    RngStream rng(1200);
    const State x0 = State::Constant(40, 8.0) + rng.normal_vector(40);
    const double t = 0.4;
    const State ref = dynamics::advance(f, x0, t / 2560, 2560);
    double worst = 0.0, prev = 0.0;
    for (int level = 0; level < 3; ++level) {
      const int n = 20 << level;
      const double err = (dynamics::advance(f, x0, t / n, n) - ref).norm();
      if (level > 0) worst = std::max(worst, std::abs(std::log2(prev / err) - tol::kRk4Order));
      prev = err;
    }
    o.require(worst <= tol::kRk4OrderTol, "RK4 order deviation=" + fmt(worst, 3));
  }
  {
    // EnKS determinism: identical inputs give bit-identical outputs.
    const dynamics::L96 f{{40, 8.0}};
    RngStream rng(1201);
    State x = dynamics::advance(f, State::Constant(40, 8.0) + rng.normal_vector(40), 0.05, 500);
    std::vector<enda::ObservationSlot> obs;
    std::vector<int> sites(40);
    std::iota(sites.begin(), sites.end(), 0);
    for (int k = 0; k <= 60; ++k) {
      if (k > 0) x = dynamics::rk4_step(f, x, 0.05);
      obs.push_back({k, sites, x + rng.normal_vector(40), 1.0});
    }
    const auto a = surrogate::l96_coefficients(surrogate::StencilBasis(2, 40), 8.0, surrogate::Mode::Homogeneous, 0.05);
    const ModelErrorCov q = ModelErrorCov::scalar(0.01, 40);
    RngStream init_rng(1202);
    const auto init = enda::initial_ensemble(obs.front(), 40, 41, 0.0, 1.0, init_rng);
    enda::SmootherOptions so;
    const auto r1 = enda::enks_run(a, q, obs, init, so);
    const auto r2 = enda::enks_run(a, q, obs, init, so);
    double diff = max_abs(r1.residuals.sum - r2.residuals.sum);
    for (std::size_t t = 0; t < r1.mean_trajectory.size(); ++t)
      diff = std::max(diff, max_abs(r1.mean_trajectory[t] - r2.mean_trajectory[t]));
    o.require(diff == 0.0, "EnKS repeat gap=" + fmt(diff, 3));
  }
  {
    // Scaling a scalar Q does not move the M-step minimizer.
    const dynamics::L96 f{{8, 8.0}};
    RngStream rng(1203);
    State x = dynamics::advance(f, State::Constant(8, 8.0) + rng.normal_vector(8), 0.05, 500);
    Trajectory noisy = dynamics::integrate(f, x, 0.05, 80);
    for (auto& s : noisy.states) s += 0.2 * rng.normal_vector(8);
    const auto a0 = surrogate::SurrogateParams::zeros(surrogate::StencilBasis(2, 8), surrogate::Mode::Homogeneous, 0.05);
    lbfgs::MinimizeOptions opts;
    opts.max_iterations = 40;
    const auto data = em::mean_transitions(noisy);
    const auto m1 = em::maximization_step(data, a0, ModelErrorCov::scalar(0.1, 8), 1.0, 0.0, opts);
    const auto m2 = em::maximization_step(data, a0, ModelErrorCov::scalar(4.0, 8), 1.0, 0.0, opts);
    const double gap = (m1.a.coefficients - m2.a.coefficients).norm() / std::max(1.0, m1.a.coefficients.norm());
    o.require(gap < tol::kArgminInvariance, "scalar-Q argmin gap=" + fmt(gap, 3));
  }
  {
    // sigma_q settles within the first iterations of the nominal L96 runs.
    double worst = 0.0;
    for (int seed = 1; seed <= runs.n_seeds(); ++seed) {
      const auto& h = runs.get({kL96, kApprox, 5000, 4, static_cast<std::uint64_t>(seed)}).summary.sigma_q_history;
      if (static_cast<int>(h.size()) < tol::kSigmaQConvergedBy) {
        worst = std::numeric_limits<double>::infinity();
        continue;
      }
      const double at = h[static_cast<std::size_t>(tol::kSigmaQConvergedBy - 1)];
      worst = std::max(worst, std::abs(at - h.back()) / h.back());
    }
    o.require(worst <= tol::kSigmaQConvergedRel, "sigma_q iter-10 vs final rel gap=" + fmt(worst, 3));
  }
  {
    // Parseval: integrated Welch PSD of white noise recovers its variance.
    RngStream rng(1204);
    std::vector<double> s(1 << 16);
    for (double& v : s) v = 1.5 * rng.normal();
    const double power = metrics::spectrum_power(metrics::welch_psd(s, 0.05));
    const double rel = std::abs(power - 2.25) / 2.25;
    o.require(rel <= tol::kParseval, "Parseval rel gap=" + fmt(rel, 3));
  }
  return o;
}

// ---------------------------------------------------------------------------

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome(Runs&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::string out = "acceptance_runs";
  int n_seeds = 3;
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--out" && i + 1 < argc) {
      out = argv[++i];
    } else if (arg == "--seeds" && i + 1 < argc) {
      n_seeds = std::stoi(argv[++i]);
    } else if (arg == "-h" || arg == "--help") {
      std::cout << "usage: acceptance [--out DIR] [--seeds N] [criterion ...]\n";
      return 0;
    } else {
      selected.insert(std::stoi(arg));
    }
  }

  const std::vector<Criterion> criteria = {
      {1, "reference-model fidelity", reference_fidelity},
      {2, "identifiability witness", identifiability},
      {3, "gradient correctness", gradients},
      {4, "linear-Gaussian oracle", kalman_oracle},
      {5, "SQRT-CORE identity", sqrt_core_identity},
      {6, "Q-update optimality and hyperprior factors", q_update_optimality},
      {7, "L96 nominal training", l96_nominal},
      {8, "L05III nominal training", l05iii_nominal},
      {9, "full vs approximate scheme", scheme_ordering},
      {10, "lag sensitivity", lag_sensitivity},
      {11, "window-length trend", window_trend},
      {12, "property suite", properties},
  };

  Runs runs(out, n_seeds);
  int failures = 0;
  for (const Criterion& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    std::cerr << "criterion " << c.id << ": " << c.name << "\n";
    const auto t0 = Clock::now();
    Outcome r;
    try {
      r = c.run(runs);
    } catch (const std::exception& e) {
      r.require(false, std::string("exception: ") + e.what());
    }
    std::string notes;
    for (const auto& n : r.notes) notes += (notes.empty() ? "" : "; ") + n;
    std::cout << (r.pass ? "PASS" : "FAIL") << " " << c.id << " " << c.name << " (" << fmt(seconds_since(t0), 3)
              << " s): " << notes << std::endl;
    if (!r.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
