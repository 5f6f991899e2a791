#pragma once

// Limited-memory BFGS with a strong-Wolfe line search (bracketing + zoom with
// safeguarded cubic interpolation). Used for every M-step over A.

#include "daml/core.hpp"

#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <utility>

namespace daml::lbfgs {

struct MinimizeOptions {
  int memory = 10;
  int max_iterations = 500;
  double g_tol = 1e-8;   // on |g| / max(|g0|, tiny)
  double f_rel_tol = 0;  // optional: stop when the relative decrease falls below this
  double c1 = 1e-4;
  double c2 = 0.9;
  int max_line_search = 40;
  bool record_steps = false;

  void validate() const {
    if (!(0.0 < c1 && c1 < c2 && c2 < 1.0)) throw std::invalid_argument("MinimizeOptions: need 0 < c1 < c2 < 1");
    if (memory < 1) throw std::invalid_argument("MinimizeOptions: memory must be >= 1");
    if (max_iterations < 0 || max_line_search < 1) throw std::invalid_argument("MinimizeOptions: bad limits");
  }
};

enum class Status { Converged, MaxIter, LineSearchFail };

inline const char* to_string(Status s) {
  switch (s) {
    case Status::Converged: return "converged";
    case Status::MaxIter: return "max_iter";
    case Status::LineSearchFail: return "line_search_fail";
  }
  return "?";
}

/// One accepted step, kept for Wolfe certification.
struct StepRecord {
  double alpha;
  double f_before;
  double f_after;
  double slope_before;  // g(x)^T d
  double slope_after;   // g(x + alpha d)^T d
};

struct MinimizeResult {
  Vector x_star;
  double f_star = 0.0;
  double g_norm = 0.0;
  Status status = Status::MaxIter;
  int iterations = 0;
  int evaluations = 0;
  int restarts = 0;
  std::vector<StepRecord> steps;
};

/// Objective returning (value, gradient).
using Objective = std::function<std::pair<double, Vector>(const Vector&)>;

namespace detail {

/// Minimizer of the cubic through (a, fa, ga), (b, fb, gb), clipped to the
/// interior of [a, b]; falls back to bisection when the cubic is degenerate.
inline double cubic_step(double a, double fa, double ga, double b, double fb, double gb) {
  const double lo = std::min(a, b), hi = std::max(a, b);
  const double d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
  const double disc = d1 * d1 - ga * gb;
  double t = 0.5 * (a + b);
  if (disc >= 0.0 && std::isfinite(disc)) {
    const double d2 = std::copysign(std::sqrt(disc), b - a);
    const double denom = gb - ga + 2.0 * d2;
    if (denom != 0.0) {
      const double c = b - (b - a) * (gb + d2 - d1) / denom;
      if (std::isfinite(c)) t = c;
    }
  }
  const double margin = 0.1 * (hi - lo);
  return std::clamp(t, lo + margin, hi - margin);
}

struct Trial {
  double alpha;
  double f;
  Vector g;
  double slope;
};

}  // namespace detail

/// Two-loop recursion, strong-Wolfe steps. Never throws once x0 has been
/// evaluated; a failed line search after a memory reset surfaces in status.
inline MinimizeResult minimize(const Objective& objective, const Vector& x0, const MinimizeOptions& opts = {}) {
  opts.validate();
  MinimizeResult res;
  auto [f, g] = objective(x0);
  res.evaluations = 1;
  if (!std::isfinite(f) || !g.allFinite()) throw NumericalError("lbfgs::minimize: objective not finite at x0");

  Vector x = x0;
  const double g0_norm = g.norm();
  const double g_scale = std::max(g0_norm, std::numeric_limits<double>::min());
  res.x_star = x;
  res.f_star = f;
  res.g_norm = g0_norm;
  if (g0_norm == 0.0 || g0_norm <= opts.g_tol * g_scale) {
    res.status = Status::Converged;
    return res;
  }

  std::deque<std::pair<Vector, Vector>> memory;  // (s, y)
  std::deque<double> rho;
  bool just_reset = true;

  auto safe_eval = [&](const Vector& xt) -> std::pair<double, Vector> {
    ++res.evaluations;
    try {
      auto out = objective(xt);
      if (!std::isfinite(out.first) || !out.second.allFinite())
        return {std::numeric_limits<double>::infinity(), Vector()};
      return out;
    } catch (const BlowUpError&) {
      return {std::numeric_limits<double>::infinity(), Vector()};
    }
  };

  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    // Search direction.
    Vector d = -g;
    if (!memory.empty()) {
      std::vector<double> alpha(memory.size());
      for (std::size_t i = memory.size(); i-- > 0;) {
        alpha[i] = rho[i] * memory[i].first.dot(d);
        d -= alpha[i] * memory[i].second;
      }
      const auto& [s_last, y_last] = memory.back();
      d *= s_last.dot(y_last) / y_last.squaredNorm();
      for (std::size_t i = 0; i < memory.size(); ++i) {
        const double beta = rho[i] * memory[i].second.dot(d);
        d += (alpha[i] - beta) * memory[i].first;
      }
    }
    double slope0 = g.dot(d);
    if (!(slope0 < 0.0)) {
      memory.clear();
      rho.clear();
      d = -g;
      slope0 = -g.squaredNorm();
      just_reset = true;
    }

    // Strong-Wolfe line search.
    const double alpha_init = just_reset ? std::min(1.0, 1.0 / d.norm()) : 1.0;
    const double f0 = f;
    std::optional<detail::Trial> accepted;
    // Near the optimum f differences drown in rounding; then accept on the
    // slope alone (approximate Wolfe) as long as f has not measurably risen.
    const double f_noise = 8.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(f0), 1e-300);
    auto approx_ok = [&](const detail::Trial& t) {
      return t.f <= f0 + f_noise && t.slope <= (2.0 * opts.c1 - 1.0) * slope0;
    };
    auto decrease_ok = [&](const detail::Trial& t) {
      return std::isfinite(t.f) && (t.f <= f0 + opts.c1 * t.alpha * slope0 || approx_ok(t));
    };
    {
      detail::Trial prev{0.0, f0, g, slope0};
      double alpha = alpha_init;
      int evals = 0;
      auto trial_at = [&](double a) -> detail::Trial {
        auto [ft, gt] = safe_eval(x + a * d);
        ++evals;
        const double sl = std::isfinite(ft) ? gt.dot(d) : std::numeric_limits<double>::quiet_NaN();
        return {a, ft, std::move(gt), sl};
      };
      auto zoom = [&](detail::Trial lo, detail::Trial hi) -> std::optional<detail::Trial> {
        while (evals < opts.max_line_search) {
          double a;
          if (std::isfinite(hi.f) && std::isfinite(hi.slope))
            a = detail::cubic_step(lo.alpha, lo.f, lo.slope, hi.alpha, hi.f, hi.slope);
          else
            a = 0.5 * (lo.alpha + hi.alpha);
          if (std::abs(hi.alpha - lo.alpha) < 1e-16 * std::max(1.0, std::abs(lo.alpha))) return std::nullopt;
          detail::Trial t = trial_at(a);
          if (!decrease_ok(t) || (t.f >= lo.f && !approx_ok(t))) {
            hi = std::move(t);
          } else {
            if (std::abs(t.slope) <= -opts.c2 * slope0) return t;
            if (t.slope * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
            lo = std::move(t);
          }
        }
        return std::nullopt;
      };
      for (bool first = true; evals < opts.max_line_search; first = false) {
        detail::Trial t = trial_at(alpha);
        if (!std::isfinite(t.f)) {
          // Shrink toward the last good point.
          alpha = prev.alpha + 0.25 * (alpha - prev.alpha);
          continue;
        }
        if (!decrease_ok(t) || (!first && t.f >= prev.f && !approx_ok(t))) {
          accepted = zoom(prev, std::move(t));
          break;
        }
        if (std::abs(t.slope) <= -opts.c2 * slope0) {
          accepted = std::move(t);
          break;
        }
        if (t.slope >= 0.0) {
          accepted = zoom(std::move(t), prev);
          break;
        }
        prev = std::move(t);
        alpha *= 2.0;
      }
    }

    if (!accepted) {
      if (just_reset) {
        res.status = Status::LineSearchFail;
        res.iterations = iter;
        return res;
      }
      memory.clear();
      rho.clear();
      just_reset = true;
      ++res.restarts;
      continue;
    }

    const detail::Trial& t = *accepted;
    if (opts.record_steps) res.steps.push_back({t.alpha, f0, t.f, slope0, t.slope});
    Vector s = t.alpha * d;
    Vector y = t.g - g;
    x += s;
    f = t.f;
    g = t.g;
    res.iterations = iter + 1;
    if (f <= res.f_star) {
      res.x_star = x;
      res.f_star = f;
      res.g_norm = g.norm();
    }
    just_reset = false;

    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      memory.emplace_back(std::move(s), std::move(y));
      rho.push_back(1.0 / sy);
      if (static_cast<int>(memory.size()) > opts.memory) {
        memory.pop_front();
        rho.pop_front();
      }
    }

    const double gn = g.norm();
    if (gn == 0.0 || gn <= opts.g_tol * g_scale) {
      res.status = Status::Converged;
      return res;
    }
    if (opts.f_rel_tol > 0.0 && (f0 - f) <= opts.f_rel_tol * std::max({std::abs(f0), std::abs(f), 1.0})) {
      res.status = Status::Converged;
      return res;
    }
  }
  res.status = Status::MaxIter;
  return res;
}

}  // namespace daml::lbfgs
