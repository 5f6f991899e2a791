#pragma once

// Reference computations used only by the tests. They share no code with the
// library beyond the basic types.

#include "daml/core.hpp"
#include "daml/ensemble_da.hpp"

#include <vector>

namespace oracle {

using daml::Matrix;
using daml::Vector;

struct GaussianUpdate {
  Vector mean;
  Matrix cov;
};

/// Textbook Kalman update with H selecting `sites` and R = r I.
inline GaussianUpdate kalman_update(const Vector& m, const Matrix& p, const std::vector<int>& sites, const Vector& y,
                                    double r) {
  const auto ny = static_cast<Eigen::Index>(sites.size());
  Matrix h = Matrix::Zero(ny, m.size());
  for (Eigen::Index i = 0; i < ny; ++i) h(i, sites[static_cast<std::size_t>(i)]) = 1.0;
  const Matrix s = h * p * h.transpose() + r * Matrix::Identity(ny, ny);
  const Matrix k = p * h.transpose() * s.inverse();
  return {m + k * (y - h * m), (Matrix::Identity(m.size(), m.size()) - k * h) * p};
}

/// x_{k+1} = M x_k + N(0, Q), x_0 ~ N(m0, P0).
struct LinearGaussianModel {
  Matrix m;
  Matrix q;
  Vector m0;
  Matrix p0;
};

/// E[x_t | y_0..y_last] by conditioning the joint Gaussian of x_{0:last}.
inline Vector fixed_lag_mean(const LinearGaussianModel& lg, const std::vector<daml::enda::ObservationSlot>& obs, int t,
                             int last) {
  const Eigen::Index nx = lg.m0.size();
  const int n = last + 1;
  std::vector<Vector> mean(static_cast<std::size_t>(n));
  std::vector<Matrix> marg(static_cast<std::size_t>(n));
  mean[0] = lg.m0;
  marg[0] = lg.p0;
  for (int k = 1; k < n; ++k) {
    mean[static_cast<std::size_t>(k)] = lg.m * mean[static_cast<std::size_t>(k - 1)];
    marg[static_cast<std::size_t>(k)] = lg.m * marg[static_cast<std::size_t>(k - 1)] * lg.m.transpose() + lg.q;
  }
  Matrix big(nx * n, nx * n);
  for (int i = 0; i < n; ++i) {
    Matrix prop = Matrix::Identity(nx, nx);  // M^{j-i}
    for (int j = i; j < n; ++j) {
      const Matrix c = prop * marg[static_cast<std::size_t>(i)];  // Cov(x_j, x_i)
      big.block(j * nx, i * nx, nx, nx) = c;
      big.block(i * nx, j * nx, nx, nx) = c.transpose();
      prop = lg.m * prop;
    }
  }
  Vector mu(nx * n);
  for (int k = 0; k < n; ++k) mu.segment(k * nx, nx) = mean[static_cast<std::size_t>(k)];
  // Stack the observation operator.
  Eigen::Index ny = 0;
  for (int k = 0; k < n; ++k) ny += static_cast<Eigen::Index>(obs[static_cast<std::size_t>(k)].sites.size());
  Matrix h = Matrix::Zero(ny, nx * n);
  Vector y(ny), rdiag(ny);
  Eigen::Index row = 0;
  for (int k = 0; k < n; ++k) {
    const auto& o = obs[static_cast<std::size_t>(k)];
    for (std::size_t i = 0; i < o.sites.size(); ++i, ++row) {
      h(row, k * nx + o.sites[i]) = 1.0;
      y[row] = o.values[static_cast<Eigen::Index>(i)];
      rdiag[row] = o.sigma_y * o.sigma_y;
    }
  }
  const Matrix s = h * big * h.transpose() + Matrix(rdiag.asDiagonal());
  const Vector post = mu + big * h.transpose() * s.ldlt().solve(y - h * mu);
  return post.segment(t * nx, nx);
}

/// Sequential Kalman filter means (cross-check of the batch route).
inline std::vector<Vector> kalman_filter_means(const LinearGaussianModel& lg,
                                               const std::vector<daml::enda::ObservationSlot>& obs) {
  std::vector<Vector> out;
  Vector m = lg.m0;
  Matrix p = lg.p0;
  for (std::size_t k = 0; k < obs.size(); ++k) {
    if (k > 0) {
      m = lg.m * m;
      p = lg.m * p * lg.m.transpose() + lg.q;
    }
    const GaussianUpdate u = kalman_update(m, p, obs[k].sites, obs[k].values, obs[k].sigma_y * obs[k].sigma_y);
    m = u.mean;
    p = u.cov;
    out.push_back(m);
  }
  return out;
}

}  // namespace oracle
