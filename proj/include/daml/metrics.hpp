#pragma once

// Evaluation of a trained surrogate against the reference model: forecast
// skill (NRMSE vs lead time) and pi_half, QR Lyapunov spectra, Welch power
// spectral densities.

#include "daml/core.hpp"
#include "daml/model_error.hpp"

#include <unsupported/Eigen/FFT>

#include <complex>
#include <functional>
#include <limits>
#include <vector>

namespace daml::metrics {

using Stepper = std::function<State(const State&)>;

// ---------------------------------------------------------------------------
// Forecast skill

struct ForecastSkillCurve {
  std::vector<double> lead_times;  // Lyapunov-time units
  std::vector<double> nrmse;
  int n_trials = 0;
  int n_blown_up = 0;
  std::vector<std::vector<double>> per_trial;  // kept only on request
};

inline constexpr double kNrmseCap = 10.0;
inline constexpr std::size_t kTrialChunk = 8;

struct SkillOptions {
  int horizon = 200;          // steps of the surrogate resolvent
  double normalization = 1.0; // climatological std of the reference
  double step_time = 0.05;    // model time per step
  double lyapunov_time = 1.0; // lead-time unit
  bool keep_trials = false;
};

/// Average NRMSE(tau) over trials. `reference` advances the full reference
/// state by one interval, `project` extracts the observable (slow) part, and
/// `surrogate` advances that part. A surrogate blow-up caps the remaining
/// leads of its trial at kNrmseCap.
inline ForecastSkillCurve forecast_skill(const Stepper& reference, const Stepper& project, const Stepper& surrogate,
                                         const std::vector<State>& initial_conditions, const SkillOptions& opts) {
  if (initial_conditions.empty()) throw ConfigError("forecast_skill: no initial conditions");
  if (opts.horizon < 1) throw ConfigError("forecast_skill: horizon must be >= 1");
  if (!(opts.normalization > 0.0) || !(opts.lyapunov_time > 0.0) || !(opts.step_time > 0.0))
    throw ConfigError("forecast_skill: normalization, step_time and lyapunov_time must be positive");
  const std::size_t n = initial_conditions.size();
  const auto h = static_cast<std::size_t>(opts.horizon);
  std::vector<std::vector<double>> curves(n, std::vector<double>(h + 1, 0.0));
  std::vector<char> blown(n, 0);

  parallel_chunks(n, kTrialChunk, [&](std::size_t b, std::size_t e, std::size_t) {
    for (std::size_t t = b; t < e; ++t) {
      State ref = initial_conditions[t];
      State sur = project(ref);
      auto& c = curves[t];
      c[0] = rms(sur - project(ref)) / opts.normalization;
      for (std::size_t k = 1; k <= h; ++k) {
        ref = reference(ref);
        if (!blown[t]) {
          try {
            sur = surrogate(sur);
          } catch (const BlowUpError&) {
            blown[t] = 1;
          }
        }
        c[k] = blown[t] ? kNrmseCap : std::min(kNrmseCap, rms(sur - project(ref)) / opts.normalization);
      }
    }
  });

  ForecastSkillCurve out;
  out.n_trials = static_cast<int>(n);
  out.lead_times.resize(h + 1);
  out.nrmse.assign(h + 1, 0.0);
  for (std::size_t k = 0; k <= h; ++k) out.lead_times[k] = static_cast<double>(k) * opts.step_time / opts.lyapunov_time;
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t k = 0; k <= h; ++k) out.nrmse[k] += curves[t][k];
    out.n_blown_up += blown[t];
  }
  for (double& v : out.nrmse) v /= static_cast<double>(n);
  if (opts.keep_trials) out.per_trial = std::move(curves);
  return out;
}

/// First upward crossing of 0.5, linearly interpolated; +inf if never reached.
inline double pi_half(const std::vector<double>& lead_times, const std::vector<double>& nrmse) {
  if (lead_times.empty() || lead_times.size() != nrmse.size())
    throw ConfigError("pi_half: curve must be nonempty with matching lengths");
  if (nrmse[0] >= 0.5) return lead_times[0];
  for (std::size_t i = 1; i < nrmse.size(); ++i) {
    if (nrmse[i] >= 0.5) {
      const double f = (0.5 - nrmse[i - 1]) / (nrmse[i] - nrmse[i - 1]);
      return lead_times[i - 1] + f * (lead_times[i] - lead_times[i - 1]);
    }
  }
  return std::numeric_limits<double>::infinity();
}

inline double pi_half(const ForecastSkillCurve& c) { return pi_half(c.lead_times, c.nrmse); }

// ---------------------------------------------------------------------------
// Lyapunov spectrum

struct LyapunovSpectrum {
  std::vector<double> exponents;  // descending, inverse model time
  int n_steps = 0;
  int transient = 0;
};

/// (next state, Jacobian of the step at the current state)
using JacobianStep = std::function<std::pair<State, Matrix>(const State&)>;

/// QR method: the orthonormal frame is pushed through each step Jacobian and
/// re-orthonormalized; log|diag R| is averaged after the transient.
inline LyapunovSpectrum lyapunov_spectrum(const JacobianStep& step, const State& x0, int n_steps, int transient,
                                          double dt, int n_exponents = -1) {
  if (n_steps < 1 || transient < 0) throw ConfigError("lyapunov_spectrum: bad step counts");
  if (!(dt > 0.0)) throw ConfigError("lyapunov_spectrum: dt must be positive");
  const Eigen::Index nx = x0.size();
  const Eigen::Index m = n_exponents < 0 ? nx : std::min<Eigen::Index>(n_exponents, nx);
  Matrix frame = Matrix::Identity(nx, m);
  Vector sums = Vector::Zero(m);
  State x = x0;
  for (int k = 0; k < transient + n_steps; ++k) {
    auto [next, jac] = step(x);
    if (!jac.allFinite()) throw BlowUpError("lyapunov_spectrum: non-finite Jacobian at step " + std::to_string(k));
    Eigen::HouseholderQR<Matrix> qr(jac * frame);
    const Matrix r = qr.matrixQR().topRows(m).triangularView<Eigen::Upper>();
    Matrix q = qr.householderQ() * Matrix::Identity(nx, m);
    for (Eigen::Index i = 0; i < m; ++i) {
      if (r(i, i) < 0.0) q.col(i) = -q.col(i);
      if (k >= transient) sums[i] += std::log(std::abs(r(i, i)));
    }
    frame = std::move(q);
    x = std::move(next);
  }
  LyapunovSpectrum out;
  out.n_steps = n_steps;
  out.transient = transient;
  out.exponents.resize(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) out.exponents[static_cast<std::size_t>(i)] = sums[i] / (n_steps * dt);
  std::sort(out.exponents.begin(), out.exponents.end(), std::greater<>());
  return out;
}

// ---------------------------------------------------------------------------
// Power spectral density

struct PowerSpectrum {
  std::vector<double> frequencies;  // cycles per model time unit
  std::vector<double> density;
  int segment_length = 0;
  int overlap = 0;
  int n_segments = 0;
};

inline std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / n);
  return w;
}

/// One-sided Welch estimate (periodic Hann window, per-segment mean removal),
/// scaled so that sum(density) * df equals the series variance.
inline PowerSpectrum welch_psd(const std::vector<double>& series, double sample_dt, int segment_length = 256,
                               int overlap = 128) {
  if (segment_length < 2 || overlap < 0 || overlap >= segment_length)
    throw ConfigError("welch_psd: need segment_length >= 2 and 0 <= overlap < segment_length");
  if (static_cast<int>(series.size()) < segment_length) throw ConfigError("welch_psd: series shorter than one segment");
  if (!(sample_dt > 0.0)) throw ConfigError("welch_psd: sample_dt must be positive");
  const int n = segment_length, stride = segment_length - overlap;
  const std::vector<double> w = hann_window(n);
  double wss = 0.0;
  for (double v : w) wss += v * v;
  const double fs = 1.0 / sample_dt;
  const int nf = n / 2 + 1;

  PowerSpectrum out;
  out.segment_length = n;
  out.overlap = overlap;
  out.density.assign(static_cast<std::size_t>(nf), 0.0);
  out.frequencies.resize(static_cast<std::size_t>(nf));
  for (int f = 0; f < nf; ++f) out.frequencies[static_cast<std::size_t>(f)] = f * fs / n;

  Eigen::FFT<double> fft;
  std::vector<double> seg(static_cast<std::size_t>(n));
  std::vector<std::complex<double>> spec;
  for (std::size_t start = 0; start + static_cast<std::size_t>(n) <= series.size(); start += static_cast<std::size_t>(stride)) {
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += series[start + static_cast<std::size_t>(i)];
    mean /= n;
    for (int i = 0; i < n; ++i)
      seg[static_cast<std::size_t>(i)] = (series[start + static_cast<std::size_t>(i)] - mean) * w[static_cast<std::size_t>(i)];
    fft.fwd(spec, seg);
    for (int f = 0; f < nf; ++f) {
      double p = std::norm(spec[static_cast<std::size_t>(f)]) / (fs * wss);
      if (f != 0 && !(n % 2 == 0 && f == n / 2)) p *= 2.0;
      out.density[static_cast<std::size_t>(f)] += p;
    }
    ++out.n_segments;
  }
  for (double& d : out.density) d /= out.n_segments;
  return out;
}

/// Site-averaged Welch spectrum of a trajectory.
inline PowerSpectrum welch_psd(const Trajectory& traj, int segment_length = 256, int overlap = 128) {
  if (traj.size() == 0) throw ConfigError("welch_psd: empty trajectory");
  const Eigen::Index nx = traj.nx();
  PowerSpectrum acc;
  std::vector<double> series(traj.size());
  for (Eigen::Index s = 0; s < nx; ++s) {
    for (std::size_t k = 0; k < traj.size(); ++k) series[k] = traj[k][s];
    PowerSpectrum p = welch_psd(series, traj.dt, segment_length, overlap);
    if (s == 0) {
      acc = std::move(p);
    } else {
      for (std::size_t f = 0; f < acc.density.size(); ++f) acc.density[f] += p.density[f];
    }
  }
  for (double& d : acc.density) d /= static_cast<double>(nx);
  return acc;
}

/// Integral of the density (rectangle rule on the frequency grid).
inline double spectrum_power(const PowerSpectrum& p) {
  if (p.frequencies.size() < 2) return 0.0;
  const double df = p.frequencies[1] - p.frequencies[0];
  double s = 0.0;
  for (double d : p.density) s += d;
  return s * df;
}

// ---------------------------------------------------------------------------

inline double sigma_q(const ModelErrorCov& q) { return std::sqrt(q.trace() / static_cast<double>(q.nx())); }

/// Per-variable standard deviation pooled over all sites and times.
inline double climatological_std(const Trajectory& traj) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& x : traj.states) {
    sum += x.sum();
    sq += x.squaredNorm();
    n += static_cast<std::size_t>(x.size());
  }
  const double mean = sum / static_cast<double>(n);
  return std::sqrt(std::max(0.0, sq / static_cast<double>(n) - mean * mean));
}

}  // namespace daml::metrics
