#pragma once

// Model-error covariance Q with scalar (q I), diagonal and full
// parameterizations. Every constructed value is symmetric positive definite.

#include "daml/core.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <optional>

namespace daml {

enum class QVariant { Scalar, Diagonal, Full };

inline std::string to_string(QVariant v) {
  switch (v) {
    case QVariant::Scalar: return "scalar";
    case QVariant::Diagonal: return "diagonal";
    case QVariant::Full: return "full";
  }
  return "?";
}

inline QVariant parse_q_variant(const std::string& s) {
  if (s == "scalar") return QVariant::Scalar;
  if (s == "diagonal") return QVariant::Diagonal;
  if (s == "full") return QVariant::Full;
  throw ConfigError("unknown Q variant '" + s + "'");
}

class ModelErrorCov {
 public:
  /// Jitter added to full matrices whose smallest eigenvalue is not positive.
  static constexpr double kJitter = 1e-10;
  /// Eigenvalues below this bound mean the input was genuinely indefinite.
  static constexpr double kIndefiniteTol = -1e-12;

  static ModelErrorCov scalar(double q, Eigen::Index nx) {
    if (!(q > 0.0) || !std::isfinite(q)) throw NumericalError("ModelErrorCov: scalar variance must be positive");
    if (nx <= 0) throw DimensionError("ModelErrorCov: nx must be positive");
    ModelErrorCov c;
    c.variant_ = QVariant::Scalar;
    c.nx_ = nx;
    c.diag_ = Vector::Constant(nx, q);
    return c;
  }

  static ModelErrorCov diagonal(const Vector& d) {
    if (d.size() == 0) throw DimensionError("ModelErrorCov: empty diagonal");
    for (Eigen::Index i = 0; i < d.size(); ++i)
      if (!(d[i] > 0.0) || !std::isfinite(d[i]))
        throw NumericalError("ModelErrorCov: diagonal entries must be positive");
    ModelErrorCov c;
    c.variant_ = QVariant::Diagonal;
    c.nx_ = d.size();
    c.diag_ = d;
    return c;
  }

  static ModelErrorCov full(const Matrix& m) {
    if (m.rows() != m.cols() || m.rows() == 0) throw DimensionError("ModelErrorCov: full matrix must be square");
    if (!m.allFinite()) throw NumericalError("ModelErrorCov: non-finite entries");
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
      throw NumericalError("ModelErrorCov: matrix is not symmetric");
    Matrix sym = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
    const double min_eig = eig.eigenvalues().minCoeff();
    if (min_eig < kIndefiniteTol)
      throw NumericalError("ModelErrorCov: matrix is not positive semi-definite (min eigenvalue " +
                           std::to_string(min_eig) + ")");
    if (min_eig <= 0.0) sym.diagonal().array() += kJitter;
    ModelErrorCov c;
    c.variant_ = QVariant::Full;
    c.nx_ = sym.rows();
    c.full_ = sym;
    c.llt_.emplace(sym);
    if (c.llt_->info() != Eigen::Success) {
      sym.diagonal().array() += kJitter;
      c.full_ = sym;
      c.llt_.emplace(sym);
      if (c.llt_->info() != Eigen::Success) throw NumericalError("ModelErrorCov: Cholesky failed after jitter");
    }
    c.diag_ = sym.diagonal();
    return c;
  }

  QVariant variant() const { return variant_; }
  Eigen::Index nx() const { return nx_; }

  /// Diagonal of Q (for every variant).
  const Vector& diagonal_values() const { return diag_; }

  double scalar_value() const { return diag_[0]; }

  Matrix dense() const {
    if (variant_ == QVariant::Full) return full_;
    return diag_.asDiagonal();
  }

  /// Q^{-1} r
  Vector solve(const Vector& r) const {
    require_dim(r.size(), nx_, "ModelErrorCov::solve");
    if (variant_ == QVariant::Full) return llt_->solve(r);
    return r.cwiseQuotient(diag_);
  }

  Matrix solve(const Matrix& r) const {
    require_dim(r.rows(), nx_, "ModelErrorCov::solve");
    if (variant_ == QVariant::Full) return llt_->solve(r);
    return diag_.cwiseInverse().asDiagonal() * r;
  }

  double trace() const { return diag_.sum(); }

  double log_det() const {
    if (variant_ == QVariant::Full) {
      const Matrix l = llt_->matrixL();
      return 2.0 * l.diagonal().array().log().sum();
    }
    return diag_.array().log().sum();
  }

  /// Lower factor L with L L^T = Q.
  Matrix sqrt_factor() const {
    if (variant_ == QVariant::Full) return llt_->matrixL();
    return diag_.cwiseSqrt().asDiagonal();
  }

  ModelErrorCov scaled(double factor) const {
    switch (variant_) {
      case QVariant::Scalar: return scalar(factor * scalar_value(), nx_);
      case QVariant::Diagonal: return diagonal(factor * diag_);
      case QVariant::Full: return full(factor * full_);
    }
    return *this;
  }

 private:
  ModelErrorCov() = default;

  QVariant variant_ = QVariant::Scalar;
  Eigen::Index nx_ = 0;
  Vector diag_;
  Matrix full_;
  std::optional<Eigen::LLT<Matrix>> llt_;
};

}  // namespace daml
