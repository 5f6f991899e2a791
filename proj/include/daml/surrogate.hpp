#pragma once

// Local bilinear surrogate:  dx_n/dt = sum_j a_{n,j} r_j(x; n)
//
// The regressors r(x; n) are the constant, the s = 2 rho + 1 stencil values
// x_{n+o} and their s(s+1)/2 pairwise products. The flow is integrated with
// RK4 over dt_int and composed nc times into the resolvent F_A. Tangent-linear
// and adjoint sweeps of the resolvent give exact loss gradients in A.

#include "daml/core.hpp"
#include "daml/dynamics.hpp"
#include "daml/model_error.hpp"

#include <json.hpp>

#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace daml::surrogate {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Canonical regressor order: constant, linear terms by ascending offset,
/// then bilinear pairs (o, o') with o <= o' in lexicographic order.
class StencilBasis {
 public:
  struct Pair {
    int i;  // window slot of the first factor (offset i - radius)
    int j;  // window slot of the second factor, j >= i
  };

  StencilBasis() = default;

  StencilBasis(int radius, int nx) : radius_(radius), nx_(nx) {
    if (radius < 0) throw ConfigError("StencilBasis: radius must be >= 0");
    if (2 * radius + 1 > nx) throw DimensionError("StencilBasis: stencil wider than state");
    const int s = width();
    for (int i = 0; i < s; ++i)
      for (int j = i; j < s; ++j) pairs_.push_back({i, j});
  }

  int radius() const { return radius_; }
  int nx() const { return nx_; }
  int width() const { return 2 * radius_ + 1; }
  int size() const { return 1 + width() + static_cast<int>(pairs_.size()); }
  const std::vector<Pair>& pairs() const { return pairs_; }

  int constant_index() const { return 0; }
  int linear_index(int offset) const {
    check_offset(offset);
    return 1 + offset + radius_;
  }
  int pair_index(int o1, int o2) const {
    check_offset(o1);
    check_offset(o2);
    if (o1 > o2) std::swap(o1, o2);
    const int i = o1 + radius_, j = o2 + radius_, s = width();
    // pairs before row i: sum_{r<i} (s - r)
    return 1 + s + i * s - i * (i - 1) / 2 + (j - i);
  }

  /// Human-readable label, e.g. "x[-1]*x[+1]".
  std::string label(int index) const {
    auto off = [](int o) {
      std::ostringstream os;
      os << "x[" << (o >= 0 ? "+" : "") << o << "]";
      return os.str();
    };
    if (index == 0) return "1";
    if (index <= width()) return off(index - 1 - radius_);
    const Pair& p = pairs_.at(static_cast<std::size_t>(index - 1 - width()));
    return off(p.i - radius_) + "*" + off(p.j - radius_);
  }

  bool operator==(const StencilBasis& o) const { return radius_ == o.radius_ && nx_ == o.nx_; }

 private:
  void check_offset(int o) const {
    if (o < -radius_ || o > radius_) throw std::out_of_range("StencilBasis: offset outside stencil");
  }

  int radius_ = 0;
  int nx_ = 0;
  std::vector<Pair> pairs_;
};

enum class Mode { Homogeneous, Inhomogeneous };

inline std::string to_string(Mode m) { return m == Mode::Homogeneous ? "homogeneous" : "inhomogeneous"; }

inline Mode parse_mode(const std::string& s) {
  if (s == "homogeneous") return Mode::Homogeneous;
  if (s == "inhomogeneous") return Mode::Inhomogeneous;
  throw ConfigError("unknown surrogate mode '" + s + "'");
}

/// Surrogate coefficients A plus the time discretization of the resolvent.
struct SurrogateParams {
  StencilBasis basis;
  Mode mode = Mode::Homogeneous;
  RowMatrix coefficients;  // 1 x Na (homogeneous) or nx x Na
  double dt_int = 0.05;
  int nc = 1;

  static SurrogateParams zeros(const StencilBasis& basis, Mode mode, double dt_int, int nc = 1) {
    SurrogateParams p;
    p.basis = basis;
    p.mode = mode;
    p.dt_int = dt_int;
    p.nc = nc;
    p.coefficients = RowMatrix::Zero(mode == Mode::Homogeneous ? 1 : basis.nx(), basis.size());
    p.validate();
    return p;
  }

  int nx() const { return basis.nx(); }
  double interval() const { return dt_int * nc; }
  Eigen::Index n_params() const { return coefficients.size(); }

  /// Coefficient row applied at site n.
  const double* row(Eigen::Index n) const {
    return coefficients.data() + (mode == Mode::Homogeneous ? 0 : n * coefficients.cols());
  }

  Vector flat() const { return Eigen::Map<const Vector>(coefficients.data(), coefficients.size()); }

  void set_flat(const Vector& v) {
    require_dim(v.size(), coefficients.size(), "SurrogateParams::set_flat");
    Eigen::Map<Vector>(coefficients.data(), coefficients.size()) = v;
  }

  SurrogateParams with_flat(const Vector& v) const {
    SurrogateParams p = *this;
    p.set_flat(v);
    return p;
  }

  void validate() const {
    if (nc < 1) throw ConfigError("SurrogateParams: nc must be >= 1");
    if (!(dt_int > 0.0)) throw ConfigError("SurrogateParams: dt_int must be positive");
    const Eigen::Index rows = mode == Mode::Homogeneous ? 1 : basis.nx();
    if (coefficients.rows() != rows || coefficients.cols() != basis.size())
      throw DimensionError("SurrogateParams: coefficient shape does not match basis and mode");
    if (!coefficients.allFinite()) throw NumericalError("SurrogateParams: non-finite coefficients");
  }
};

/// Coefficients reproducing Lorenz-96 exactly (requires radius >= 2).
inline SurrogateParams l96_coefficients(const StencilBasis& basis, double forcing, Mode mode, double dt_int,
                                        int nc = 1) {
  if (basis.radius() < 2) throw ConfigError("l96_coefficients: radius must be >= 2");
  SurrogateParams p = SurrogateParams::zeros(basis, mode, dt_int, nc);
  for (Eigen::Index r = 0; r < p.coefficients.rows(); ++r) {
    p.coefficients(r, basis.constant_index()) = forcing;
    p.coefficients(r, basis.linear_index(0)) = -1.0;
    p.coefficients(r, basis.pair_index(-1, 1)) = 1.0;
    p.coefficients(r, basis.pair_index(-2, -1)) = -1.0;
  }
  return p;
}

namespace detail {

constexpr int kMaxWidth = 15;

inline void gather(const State& x, Eigen::Index n, int radius, double* w) {
  const Eigen::Index nx = x.size();
  const int s = 2 * radius + 1;
  for (int i = 0; i < s; ++i) w[i] = x[wrap(n + i - radius, nx)];
}

inline void check_width(const StencilBasis& b) {
  if (b.width() > kMaxWidth) throw ConfigError("surrogate: stencil radius too large");
}

/// Partial derivatives d f_n / d x_{n+o_i} for each window slot i.
inline void slot_derivatives(const StencilBasis& b, const double* a, const double* w, double* d) {
  const int s = b.width();
  for (int i = 0; i < s; ++i) d[i] = a[1 + i];
  int idx = 1 + s;
  for (const auto& p : b.pairs()) {
    d[p.i] += a[idx] * w[p.j];
    d[p.j] += a[idx] * w[p.i];
    ++idx;
  }
}

}  // namespace detail

/// Per-site regressor values (nx x Na), canonical column order.
inline Matrix build_regressors(const State& x, const StencilBasis& basis) {
  require_dim(x.size(), basis.nx(), "build_regressors");
  detail::check_width(basis);
  const Eigen::Index nx = x.size();
  const int s = basis.width();
  Matrix r(nx, basis.size());
  double w[detail::kMaxWidth];
  for (Eigen::Index n = 0; n < nx; ++n) {
    detail::gather(x, n, basis.radius(), w);
    r(n, 0) = 1.0;
    for (int i = 0; i < s; ++i) r(n, 1 + i) = w[i];
    int idx = 1 + s;
    for (const auto& p : basis.pairs()) r(n, idx++) = w[p.i] * w[p.j];
  }
  return r;
}

namespace detail {

/// Ghost-padded copy of x: pad[i] = x[(i - radius) mod nx], length nx + 2 radius.
/// The stencil window at site n is then pad + n.
inline void fill_pad(const double* x, Eigen::Index nx, int radius, double* pad) {
  for (int i = 0; i < radius; ++i) pad[i] = x[wrap(i - radius, nx)];
  std::copy(x, x + nx, pad + radius);
  for (int i = 0; i < radius; ++i) pad[radius + nx + i] = x[wrap(i, nx)];
}

/// Reusable buffers for the flow kernels.
struct FlowScratch {
  std::vector<double> pad, padbar;
  Vector tmp;
  explicit FlowScratch(const SurrogateParams& A)
      : pad(static_cast<std::size_t>(A.nx() + 2 * A.basis.radius())), padbar(pad.size()) {}
};

// kS > 0 fixes the stencil width at compile time so the pair loops unroll.
template <int kS>
void flow_into_w(const SurrogateParams& A, const double* x, double* out, FlowScratch& ws) {
  const Eigen::Index nx = A.nx();
  const int s = kS > 0 ? kS : A.basis.width();
  fill_pad(x, nx, A.basis.radius(), ws.pad.data());
  for (Eigen::Index n = 0; n < nx; ++n) {
    const double* w = ws.pad.data() + n;
    const double* a = A.row(n);
    double lin = a[0];
    for (int i = 0; i < s; ++i) lin += a[1 + i] * w[i];
    const double* ab = a + 1 + s;
    double quad = 0.0;
    for (int i = 0; i < s; ++i) {
      double acc = 0.0;
      for (int j = i; j < s; ++j) acc += *ab++ * w[j];
      quad += w[i] * acc;
    }
    out[n] = lin + quad;
  }
}

/// Adds the wrapped ghost cells of padbar back onto xbar.
inline void fold_pad(const double* pb, Eigen::Index nx, int rho, double* xbar) {
  for (Eigen::Index i = 0; i < nx; ++i) xbar[i] += pb[rho + i];
  for (int i = 0; i < rho; ++i) {
    xbar[wrap(i - rho, nx)] += pb[i];
    xbar[wrap(i, nx)] += pb[rho + nx + i];
  }
}

/// Shared coefficients let every slot be swept across all sites at once.
template <int kS>
void flow_adjoint_homogeneous(const SurrogateParams& A, const double* lambda, double* abar, FlowScratch& ws) {
  using CMap = Eigen::Map<const Vector>;
  const Eigen::Index nx = A.nx();
  const int s = kS > 0 ? kS : A.basis.width();
  const double* a = A.row(0);
  // d phi_n / d w_i = a_i + sum_j M_ij w_j
  double m[kMaxWidth][kMaxWidth];
  const double* ab = a + 1 + s;
  for (int i = 0; i < s; ++i) {
    m[i][i] = 2.0 * *ab++;
    for (int j = i + 1; j < s; ++j) m[i][j] = m[j][i] = *ab++;
  }
  const CMap lam(lambda, nx);
  ws.tmp.resize(nx);
  for (int i = 0; i < s; ++i) {
    ws.tmp.setConstant(a[1 + i]);
    for (int j = 0; j < s; ++j) ws.tmp += m[i][j] * CMap(ws.pad.data() + j, nx);
    Eigen::Map<Vector>(ws.padbar.data() + i, nx) += lam.cwiseProduct(ws.tmp);
  }
  if (!abar) return;
  abar[0] += lam.sum();
  double* gb = abar + 1 + s;
  for (int i = 0; i < s; ++i) {
    const CMap wi(ws.pad.data() + i, nx);
    abar[1 + i] += lam.dot(wi);
    ws.tmp = lam.cwiseProduct(wi);
    for (int j = i; j < s; ++j) *gb++ += ws.tmp.dot(CMap(ws.pad.data() + j, nx));
  }
}

template <int kS>
void flow_adjoint_into_w(const SurrogateParams& A, const double* x, const double* lambda, double* xbar,
                         double* abar, FlowScratch& ws) {
  const Eigen::Index nx = A.nx();
  const int s = kS > 0 ? kS : A.basis.width(), rho = A.basis.radius();
  const bool hom = A.mode == Mode::Homogeneous;
  const Eigen::Index cols = A.coefficients.cols();
  fill_pad(x, nx, rho, ws.pad.data());
  std::fill(ws.padbar.begin(), ws.padbar.end(), 0.0);
  if (hom) {
    flow_adjoint_homogeneous<kS>(A, lambda, abar, ws);
    fold_pad(ws.padbar.data(), nx, rho, xbar);
    return;
  }
  for (Eigen::Index n = 0; n < nx; ++n) {
    const double l = lambda[n];
    if (l == 0.0) continue;
    // Local copies keep the compiler from assuming pad and padbar alias.
    double w[kMaxWidth], wb[kMaxWidth];
    std::copy(ws.pad.data() + n, ws.pad.data() + n + s, w);
    const double* a = A.row(n);
    for (int i = 0; i < s; ++i) wb[i] = l * a[1 + i];
    const double* ab = a + 1 + s;
    for (int i = 0; i < s; ++i) {
      const double lwi = l * w[i];
      double acc = 0.0;
      for (int j = i; j < s; ++j) {
        const double c = *ab++;
        acc += c * w[j];
        wb[j] += lwi * c;
      }
      wb[i] += l * acc;
    }
    double* pb = ws.padbar.data() + n;
    for (int i = 0; i < s; ++i) pb[i] += wb[i];
  }
  if (abar) {
    for (Eigen::Index n = 0; n < nx; ++n) {
      const double l = lambda[n];
      if (l == 0.0) continue;
      double w[kMaxWidth];
      std::copy(ws.pad.data() + n, ws.pad.data() + n + s, w);
      double* g = abar + n * cols;
      g[0] += l;
      for (int i = 0; i < s; ++i) g[1 + i] += l * w[i];
      double* gb = g + 1 + s;
      for (int i = 0; i < s; ++i) {
        const double lwi = l * w[i];
        for (int j = i; j < s; ++j) *gb++ += lwi * w[j];
      }
    }
  }
  fold_pad(ws.padbar.data(), nx, rho, xbar);
}

inline void flow_into(const SurrogateParams& A, const double* x, double* out, FlowScratch& ws) {
  switch (A.basis.width()) {
    case 3: return flow_into_w<3>(A, x, out, ws);
    case 5: return flow_into_w<5>(A, x, out, ws);
    case 7: return flow_into_w<7>(A, x, out, ws);
    default: return flow_into_w<0>(A, x, out, ws);
  }
}

/// xbar += J(x)^T lambda; abar (flat, row-major, may be null) += (d phi / dA)^T lambda.
inline void flow_adjoint_into(const SurrogateParams& A, const double* x, const double* lambda, double* xbar,
                              double* abar, FlowScratch& ws) {
  switch (A.basis.width()) {
    case 3: return flow_adjoint_into_w<3>(A, x, lambda, xbar, abar, ws);
    case 5: return flow_adjoint_into_w<5>(A, x, lambda, xbar, abar, ws);
    case 7: return flow_adjoint_into_w<7>(A, x, lambda, xbar, abar, ws);
    default: return flow_adjoint_into_w<0>(A, x, lambda, xbar, abar, ws);
  }
}

}  // namespace detail

/// Tendency phi_A(x).
inline State flow(const SurrogateParams& A, const State& x) {
  require_dim(x.size(), A.nx(), "surrogate::flow");
  detail::check_width(A.basis);
  detail::FlowScratch ws(A);
  State out(x.size());
  detail::flow_into(A, x.data(), out.data(), ws);
  return out;
}

/// Dense Jacobian of the tendency with respect to the state.
inline Matrix flow_jacobian(const SurrogateParams& A, const State& x) {
  require_dim(x.size(), A.nx(), "surrogate::flow_jacobian");
  const Eigen::Index nx = x.size();
  const int s = A.basis.width(), rho = A.basis.radius();
  Matrix jac = Matrix::Zero(nx, nx);
  double w[detail::kMaxWidth], d[detail::kMaxWidth];
  for (Eigen::Index n = 0; n < nx; ++n) {
    detail::gather(x, n, rho, w);
    detail::slot_derivatives(A.basis, A.row(n), w, d);
    for (int i = 0; i < s; ++i) jac(n, wrap(n + i - rho, nx)) += d[i];
  }
  return jac;
}

/// Tangent of the tendency: J(x) dx + (d phi / dA) dA.
inline State flow_tangent(const SurrogateParams& A, const State& x, const State& dx, const RowMatrix& dA) {
  const Eigen::Index nx = x.size();
  const int s = A.basis.width(), rho = A.basis.radius();
  const bool hom = A.mode == Mode::Homogeneous;
  const auto& pairs = A.basis.pairs();
  State out(nx);
  double w[detail::kMaxWidth], d[detail::kMaxWidth];
  for (Eigen::Index n = 0; n < nx; ++n) {
    detail::gather(x, n, rho, w);
    detail::slot_derivatives(A.basis, A.row(n), w, d);
    const double* da = dA.data() + (hom ? 0 : n * dA.cols());
    double t = da[0];
    for (int i = 0; i < s; ++i) t += d[i] * dx[wrap(n + i - rho, nx)] + da[1 + i] * w[i];
    const double* dab = da + 1 + s;
    for (std::size_t k = 0; k < pairs.size(); ++k) t += dab[k] * w[pairs[k].i] * w[pairs[k].j];
    out[n] = t;
  }
  return out;
}

/// Adjoint of the tendency: xbar += J(x)^T lambda, Abar += (d phi / dA)^T lambda.
inline void flow_adjoint(const SurrogateParams& A, const State& x, const State& lambda, State& xbar,
                         RowMatrix* abar) {
  require_dim(x.size(), A.nx(), "surrogate::flow_adjoint");
  detail::check_width(A.basis);
  detail::FlowScratch ws(A);
  detail::flow_adjoint_into(A, x.data(), lambda.data(), xbar.data(), abar ? abar->data() : nullptr, ws);
}

/// F_A: nc RK4 steps of size dt_int.
inline State resolvent(const SurrogateParams& A, const State& x) {
  require_dim(x.size(), A.nx(), "surrogate::resolvent");
  detail::check_width(A.basis);
  const double h = A.dt_int;
  detail::FlowScratch ws(A);
  State y = x, k(x.size()), acc(x.size()), xs(x.size());
  for (int c = 0; c < A.nc; ++c) {
    detail::flow_into(A, y.data(), k.data(), ws);
    acc = k;
    xs = y + (0.5 * h) * k;
    detail::flow_into(A, xs.data(), k.data(), ws);
    acc += 2.0 * k;
    xs = y + (0.5 * h) * k;
    detail::flow_into(A, xs.data(), k.data(), ws);
    acc += 2.0 * k;
    xs = y + h * k;
    detail::flow_into(A, xs.data(), k.data(), ws);
    acc += k;
    y += (h / 6.0) * acc;
  }
  return y;
}

/// d F_A / d x, chained through every RK4 stage and the nc composition.
inline Matrix jacobian_state(const SurrogateParams& A, const State& x) {
  require_dim(x.size(), A.nx(), "surrogate::jacobian_state");
  auto phi = [&A](const State& z) { return flow(A, z); };
  auto jac = [&A](const State& z) { return flow_jacobian(A, z); };
  Matrix m = Matrix::Identity(x.size(), x.size());
  State y = x;
  for (int c = 0; c < A.nc; ++c) {
    m = dynamics::rk4_step_jacobian(phi, jac, y, A.dt_int) * m;
    y = dynamics::rk4_step(phi, y, A.dt_int);
  }
  return m;
}

/// Tangent-linear of the resolvent in both arguments.
inline State resolvent_tangent(const SurrogateParams& A, const State& x, const State& dx, const RowMatrix& dA) {
  require_dim(x.size(), A.nx(), "surrogate::resolvent_tangent");
  const double h = A.dt_int;
  State y = x, dy = dx;
  for (int c = 0; c < A.nc; ++c) {
    const State k1 = flow(A, y);
    const State dk1 = flow_tangent(A, y, dy, dA);
    const State x2 = y + 0.5 * h * k1, dx2 = dy + 0.5 * h * dk1;
    const State k2 = flow(A, x2);
    const State dk2 = flow_tangent(A, x2, dx2, dA);
    const State x3 = y + 0.5 * h * k2, dx3 = dy + 0.5 * h * dk2;
    const State k3 = flow(A, x3);
    const State dk3 = flow_tangent(A, x3, dx3, dA);
    const State x4 = y + h * k3, dx4 = dy + h * dk3;
    const State k4 = flow(A, x4);
    const State dk4 = flow_tangent(A, x4, dx4, dA);
    y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    dy = dy + (h / 6.0) * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4);
  }
  return dy;
}

/// Forward sweep that keeps the RK4 stage inputs for the reverse sweep.
/// Buffers are reused across calls, so one tape per thread avoids allocation.
struct ResolventTape {
  Matrix stages;  // nx x 4 nc: x, x + h/2 k1, x + h/2 k2, x + h k3 per substep
  State output;
  State k, acc;
  State cur, x0bar, kbar[4], s;  // reverse-sweep buffers
};

inline void record_resolvent(const SurrogateParams& A, const State& x, ResolventTape& tape,
                             detail::FlowScratch& ws) {
  const Eigen::Index nx = A.nx();
  const double h = A.dt_int;
  tape.stages.resize(nx, 4 * A.nc);
  tape.output = x;
  tape.k.resize(nx);
  tape.acc.resize(nx);
  State& y = tape.output;
  for (int c = 0; c < A.nc; ++c) {
    auto x1 = tape.stages.col(4 * c), x2 = tape.stages.col(4 * c + 1);
    auto x3 = tape.stages.col(4 * c + 2), x4 = tape.stages.col(4 * c + 3);
    x1 = y;
    detail::flow_into(A, x1.data(), tape.k.data(), ws);
    tape.acc = tape.k;
    x2 = y + (0.5 * h) * tape.k;
    detail::flow_into(A, x2.data(), tape.k.data(), ws);
    tape.acc += 2.0 * tape.k;
    x3 = y + (0.5 * h) * tape.k;
    detail::flow_into(A, x3.data(), tape.k.data(), ws);
    tape.acc += 2.0 * tape.k;
    x4 = y + h * tape.k;
    detail::flow_into(A, x4.data(), tape.k.data(), ws);
    tape.acc += tape.k;
    y += (h / 6.0) * tape.acc;
    if (!is_bounded(y)) throw BlowUpError("surrogate::resolvent: state left the bounded regime");
  }
}

inline ResolventTape record_resolvent(const SurrogateParams& A, const State& x) {
  require_dim(x.size(), A.nx(), "surrogate::record_resolvent");
  detail::check_width(A.basis);
  detail::FlowScratch ws(A);
  ResolventTape tape;
  record_resolvent(A, x, tape, ws);
  return tape;
}

/// Reverse sweep: given ybar = dL/dF_A(x), accumulate dL/dx into xbar and
/// dL/dA into abar (flat row-major, may be null).
inline void resolvent_adjoint(const SurrogateParams& A, ResolventTape& tape, const State& ybar, State& xbar,
                              double* abar, detail::FlowScratch& ws) {
  const double h = A.dt_int;
  const Eigen::Index nx = ybar.size();
  tape.cur = ybar;
  tape.s.resize(nx);
  for (int c = A.nc - 1; c >= 0; --c) {
    tape.kbar[3] = (h / 6.0) * tape.cur;
    tape.kbar[2] = (h / 3.0) * tape.cur;
    tape.kbar[1] = (h / 3.0) * tape.cur;
    tape.kbar[0] = (h / 6.0) * tape.cur;
    tape.x0bar = tape.cur;
    // stage m: k_m = f(x_m), x_m = x_1 + step_m k_{m-1}
    const double step[4] = {0.0, 0.5 * h, 0.5 * h, h};
    for (int m = 3; m >= 0; --m) {
      tape.s.setZero();
      detail::flow_adjoint_into(A, tape.stages.col(4 * c + m).data(), tape.kbar[m].data(), tape.s.data(), abar,
                                ws);
      tape.x0bar += tape.s;
      if (m > 0) tape.kbar[m - 1] += step[m] * tape.s;
    }
    tape.cur = tape.x0bar;
  }
  xbar += tape.cur;
}

/// Convenience wrapper returning (dL/dA flattened, dL/dx).
inline std::pair<Vector, State> resolvent_adjoint(const SurrogateParams& A, const State& x, const State& ybar) {
  require_dim(ybar.size(), A.nx(), "surrogate::resolvent_adjoint");
  detail::FlowScratch ws(A);
  ResolventTape tape;
  record_resolvent(A, x, tape, ws);
  RowMatrix abar = RowMatrix::Zero(A.coefficients.rows(), A.coefficients.cols());
  State xbar = State::Zero(x.size());
  resolvent_adjoint(A, tape, ybar, xbar, abar.data(), ws);
  return {Eigen::Map<const Vector>(abar.data(), abar.size()), xbar};
}

// ---------------------------------------------------------------------------
// Loss

/// One (x_{k-1}, x_k) transition entering the least-squares loss.
struct Transition {
  const State* prev;
  const State* next;
  double weight = 1.0;
};

struct LossResult {
  double value = 0.0;
  Vector gradient;  // same layout as SurrogateParams::flat()
};

inline constexpr std::size_t kLossChunk = 128;

/// value = 1/(2 W) sum_p w_p |x_next - F_A(x_prev)|^2_{Q^{-1}} + l2 |A|^2 / 2,
/// with the gradient obtained by the reverse sweep through every RK4 stage.
/// Pair contributions are reduced chunk by chunk in a fixed order.
inline LossResult loss_and_gradient(const SurrogateParams& A, std::span<const Transition> pairs,
                                    const ModelErrorCov& Q, double l2 = 0.0, double normalizer = 1.0) {
  if (pairs.empty()) throw std::invalid_argument("loss_and_gradient: no transitions");
  if (!(normalizer > 0.0)) throw std::invalid_argument("loss_and_gradient: normalizer must be positive");
  if (l2 < 0.0) throw std::invalid_argument("loss_and_gradient: l2 must be >= 0");
  require_dim(Q.nx(), A.nx(), "loss_and_gradient (Q)");

  detail::check_width(A.basis);
  const std::size_t chunks = chunk_count(pairs.size(), kLossChunk);
  std::vector<double> values(chunks, 0.0);
  std::vector<RowMatrix> grads(chunks);

  parallel_chunks(pairs.size(), kLossChunk, [&](std::size_t begin, std::size_t end, std::size_t c) {
    RowMatrix g = RowMatrix::Zero(A.coefficients.rows(), A.coefficients.cols());
    detail::FlowScratch ws(A);
    const auto m = static_cast<Eigen::Index>(end - begin);
    std::vector<ResolventTape> tapes(static_cast<std::size_t>(m));
    Matrix r(A.nx(), m);
    for (std::size_t p = begin; p < end; ++p) {
      const Transition& t = pairs[p];
      require_dim(t.prev->size(), A.nx(), "loss_and_gradient (pair)");
      ResolventTape& tape = tapes[p - begin];
      try {
        record_resolvent(A, *t.prev, tape, ws);
      } catch (const BlowUpError&) {
        throw BlowUpError("loss_and_gradient: blow-up at pair " + std::to_string(p));
      }
      r.col(static_cast<Eigen::Index>(p - begin)) = *t.next - tape.output;
    }
    // One batched solve per chunk instead of one per pair.
    const Matrix qr = Q.solve(r);
    State xbar(A.nx()), ybar(A.nx());
    double v = 0.0;
    for (std::size_t p = begin; p < end; ++p) {
      const auto col = static_cast<Eigen::Index>(p - begin);
      const double scale = pairs[p].weight / normalizer;
      v += 0.5 * scale * r.col(col).dot(qr.col(col));
      ybar = (-scale) * qr.col(col);
      xbar.setZero();
      resolvent_adjoint(A, tapes[p - begin], ybar, xbar, g.data(), ws);
    }
    values[c] = v;
    grads[c] = std::move(g);
  });

  LossResult out;
  out.value = 0.0;
  RowMatrix g = RowMatrix::Zero(A.coefficients.rows(), A.coefficients.cols());
  for (std::size_t c = 0; c < chunks; ++c) {
    out.value += values[c];
    g += grads[c];
  }
  if (l2 > 0.0) {
    out.value += 0.5 * l2 * A.coefficients.squaredNorm();
    g += l2 * A.coefficients;
  }
  out.gradient = Eigen::Map<const Vector>(g.data(), g.size());
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json to_json(const SurrogateParams& A) {
  nlohmann::json j;
  j["format"] = "daml-surrogate";
  j["format_version"] = kCheckpointVersion;
  j["mode"] = to_string(A.mode);
  j["radius"] = A.basis.radius();
  j["nx"] = A.basis.nx();
  j["nc"] = A.nc;
  j["dt"] = A.dt_int;
  std::vector<std::string> labels;
  for (int i = 0; i < A.basis.size(); ++i) labels.push_back(A.basis.label(i));
  j["regressors"] = labels;
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < A.coefficients.rows(); ++r) {
    std::vector<double> row(A.coefficients.row(r).data(), A.coefficients.row(r).data() + A.coefficients.cols());
    rows.push_back(row);
  }
  j["coefficients"] = rows;
  return j;
}

inline SurrogateParams from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "daml-surrogate") throw ConfigError("surrogate checkpoint: wrong format tag");
  if (j.at("format_version").get<int>() != kCheckpointVersion)
    throw ConfigError("surrogate checkpoint: unsupported format_version");
  StencilBasis basis(j.at("radius").get<int>(), j.at("nx").get<int>());
  SurrogateParams A = SurrogateParams::zeros(basis, parse_mode(j.at("mode").get<std::string>()),
                                             j.at("dt").get<double>(), j.at("nc").get<int>());
  const auto& rows = j.at("coefficients");
  if (static_cast<Eigen::Index>(rows.size()) != A.coefficients.rows())
    throw DimensionError("surrogate checkpoint: coefficient row count");
  for (Eigen::Index r = 0; r < A.coefficients.rows(); ++r) {
    const auto row = rows[static_cast<std::size_t>(r)].get<std::vector<double>>();
    if (static_cast<Eigen::Index>(row.size()) != A.coefficients.cols())
      throw DimensionError("surrogate checkpoint: coefficient row length");
    for (Eigen::Index c = 0; c < A.coefficients.cols(); ++c) A.coefficients(r, c) = row[static_cast<std::size_t>(c)];
  }
  A.validate();
  return A;
}

}  // namespace daml::surrogate
