#pragma once

// Reference ("truth") models and the explicit RK4 machinery shared with the
// surrogate: tendencies, analytic Jacobians, stepping, trajectories and the
// tangent-linear of a single RK4 step.

#include "daml/core.hpp"

#include <string>
#include <utility>

namespace daml::dynamics {

struct L96Params {
  int nx = 40;
  double forcing = 8.0;

  void validate() const {
    if (nx < 4) throw ConfigError("L96Params: nx must be >= 4");
    if (!std::isfinite(forcing)) throw ConfigError("L96Params: forcing must be finite");
  }
};

/// Two-scale model: nx slow variables, each coupled to 10 fast ones.
struct L05IIIParams {
  int nx = 36;
  int nu = 360;
  double c = 10.0;  // time-scale ratio
  double b = 10.0;  // space-scale ratio
  double h = 1.0;   // coupling
  double forcing = 10.0;

  static constexpr int kFastPerSlow = 10;

  void validate() const {
    if (nx < 4) throw ConfigError("L05IIIParams: nx must be >= 4");
    if (nu != kFastPerSlow * nx) throw ConfigError("L05IIIParams: nu must equal 10 * nx");
    if (!(c > 0.0) || !(b > 0.0)) throw ConfigError("L05IIIParams: c and b must be positive");
    if (!std::isfinite(h) || !std::isfinite(forcing) || !std::isfinite(c) || !std::isfinite(b))
      throw ConfigError("L05IIIParams: parameters must be finite");
  }
};

// ---------------------------------------------------------------------------
// Lorenz-96

/// dx_n/dt = (x_{n+1} - x_{n-2}) x_{n-1} - x_n + F, periodic.
inline State l96_flow(const State& x, const L96Params& p) {
  require_dim(x.size(), p.nx, "l96_flow");
  const Eigen::Index n = x.size();
  State dx(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double xp1 = x[wrap(i + 1, n)];
    const double xm1 = x[wrap(i - 1, n)];
    const double xm2 = x[wrap(i - 2, n)];
    dx[i] = (xp1 - xm2) * xm1 - x[i] + p.forcing;
  }
  return dx;
}

inline Matrix l96_jacobian(const State& x, const L96Params& p) {
  require_dim(x.size(), p.nx, "l96_jacobian");
  const Eigen::Index n = x.size();
  Matrix jac = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index ip1 = wrap(i + 1, n), im1 = wrap(i - 1, n), im2 = wrap(i - 2, n);
    jac(i, im2) = -x[im1];
    jac(i, im1) = x[ip1] - x[im2];
    jac(i, i) = -1.0;
    jac(i, ip1) = x[im1];
  }
  return jac;
}

// ---------------------------------------------------------------------------
// Two-scale Lorenz (L05III)
//
//   dx_n/dt = x_{n-1}(x_{n+1} - x_{n-2}) - x_n + F - h c/b sum_{m<10} u_{m+10n}
//   du_m/dt = c b u_{m+1}(u_{m-1} - u_{m+2}) - c u_m + h c/b x_{m/10}

inline std::pair<State, State> l05iii_flow(const State& slow, const State& fast,
                                           const L05IIIParams& p) {
  require_dim(slow.size(), p.nx, "l05iii_flow (slow)");
  require_dim(fast.size(), p.nu, "l05iii_flow (fast)");
  const Eigen::Index nx = p.nx, nu = p.nu;
  const double hcb = p.h * p.c / p.b;
  State dx(nx), du(nu);
  for (Eigen::Index n = 0; n < nx; ++n) {
    double coupling = 0.0;
    for (int m = 0; m < L05IIIParams::kFastPerSlow; ++m) coupling += fast[m + L05IIIParams::kFastPerSlow * n];
    dx[n] = slow[wrap(n - 1, nx)] * (slow[wrap(n + 1, nx)] - slow[wrap(n - 2, nx)]) - slow[n] +
            p.forcing - hcb * coupling;
  }
  const double cb = p.c * p.b;
  for (Eigen::Index m = 0; m < nu; ++m) {
    du[m] = cb * fast[wrap(m + 1, nu)] * (fast[wrap(m - 1, nu)] - fast[wrap(m + 2, nu)]) -
            p.c * fast[m] + hcb * slow[m / L05IIIParams::kFastPerSlow];
  }
  return {std::move(dx), std::move(du)};
}

/// Packed form [slow; fast] used by the generic integrators.
inline State l05iii_flow_packed(const State& z, const L05IIIParams& p) {
  require_dim(z.size(), p.nx + p.nu, "l05iii_flow_packed");
  auto [dx, du] = l05iii_flow(z.head(p.nx), z.tail(p.nu), p);
  State out(z.size());
  out << dx, du;
  return out;
}

/// Slow-sector tendency alone with the fast forcing removed (h = 0 limit).
inline State l05iii_decoupled_slow_flow(const State& slow, const L05IIIParams& p) {
  L96Params q{p.nx, p.forcing};
  return l96_flow(slow, q);
}

// ---------------------------------------------------------------------------
// Integration

/// Classical fourth-order Runge-Kutta step. Throws BlowUpError when the
/// result is non-finite or exceeds kBlowUpThreshold in magnitude.
template <class Flow>
State rk4_step(const Flow& flow, const State& x, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("rk4_step: dt must be positive");
  const State k1 = flow(x);
  const State k2 = flow(x + (0.5 * dt) * k1);
  const State k3 = flow(x + (0.5 * dt) * k2);
  const State k4 = flow(x + dt * k3);
  State y = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  if (!is_bounded(y)) throw BlowUpError("rk4_step: state left the bounded regime");
  return y;
}

/// n_steps repeated RK4 steps; the trajectory holds n_steps + 1 states.
template <class Flow>
Trajectory integrate(const Flow& flow, const State& x0, double dt, int n_steps) {
  if (n_steps < 0) throw std::invalid_argument("integrate: n_steps must be >= 0");
  if (!(dt > 0.0)) throw std::invalid_argument("integrate: dt must be positive");
  Trajectory traj;
  traj.dt = dt;
  traj.states.reserve(static_cast<std::size_t>(n_steps) + 1);
  traj.states.push_back(x0);
  for (int k = 0; k < n_steps; ++k) {
    try {
      traj.states.push_back(rk4_step(flow, traj.states.back(), dt));
    } catch (const BlowUpError&) {
      throw BlowUpError("integrate: blow-up at step " + std::to_string(k + 1));
    }
  }
  return traj;
}

/// Advance without storing intermediates.
template <class Flow>
State advance(const Flow& flow, State x, double dt, int n_steps) {
  for (int k = 0; k < n_steps; ++k) x = rk4_step(flow, x, dt);
  return x;
}

/// Jacobian of one RK4 step, chained through the four stages:
///   M = I + dt/6 (K1 + 2 K2 + 2 K3 + K4),
///   K1 = J(x), K2 = J(x2)(I + dt/2 K1), K3 = J(x3)(I + dt/2 K2), K4 = J(x4)(I + dt K3).
template <class Flow, class Jacobian>
Matrix rk4_step_jacobian(const Flow& flow, const Jacobian& jacobian, const State& x, double dt) {
  const Eigen::Index n = x.size();
  const Matrix id = Matrix::Identity(n, n);
  const State k1 = flow(x);
  const State x2 = x + (0.5 * dt) * k1;
  const State k2 = flow(x2);
  const State x3 = x + (0.5 * dt) * k2;
  const State k3 = flow(x3);
  const State x4 = x + dt * k3;
  const Matrix m1 = jacobian(x);
  const Matrix m2 = jacobian(x2) * (id + (0.5 * dt) * m1);
  const Matrix m3 = jacobian(x3) * (id + (0.5 * dt) * m2);
  const Matrix m4 = jacobian(x4) * (id + dt * m3);
  return id + (dt / 6.0) * (m1 + 2.0 * m2 + 2.0 * m3 + m4);
}

// Callable wrappers for the generic integrators.

struct L96 {
  L96Params params;
  State operator()(const State& x) const { return l96_flow(x, params); }
  Matrix jacobian(const State& x) const { return l96_jacobian(x, params); }
};

struct L05III {
  L05IIIParams params;
  State operator()(const State& z) const { return l05iii_flow_packed(z, params); }
};

}  // namespace daml::dynamics
