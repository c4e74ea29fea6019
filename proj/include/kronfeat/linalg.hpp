#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace kf {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline MatrixXd sym(const MatrixXd& a) { return 0.5 * (a + a.transpose()); }

// Row orthonormalization, the QR factor with positive R diagonal. Two-pass
// modified Gram-Schmidt; coefficients below the snap threshold are skipped so
// feeding an already-orthonormal matrix back in reproduces it bit for bit.
inline MatrixXd ortho_rows(const MatrixXd& m) {
  const int k = static_cast<int>(m.rows());
  const int d = static_cast<int>(m.cols());
  if (k > d) throw std::invalid_argument("ortho_rows: more rows than columns");
  constexpr double snap = 1024.0 * std::numeric_limits<double>::epsilon();
  const double scale = m.cwiseAbs().maxCoeff();
  if (!(scale > 0.0) || !std::isfinite(scale))
    throw std::runtime_error("ortho_rows: zero or non-finite input");
  MatrixXd q(k, d);
  for (int i = 0; i < k; ++i) {
    VectorXd v = m.row(i);
    for (int pass = 0; pass < 2; ++pass) {
      const double vnorm = v.norm();
      for (int j = 0; j < i; ++j) {
        const double c = q.row(j).dot(v);
        if (std::abs(c) > snap * vnorm) v -= c * q.row(j).transpose();
      }
    }
    const double r = v.norm();
    if (r < 1e-12 * scale)
      throw std::runtime_error("ortho_rows: rank-deficient input");
    if (std::abs(r - 1.0) > snap) v /= r;
    q.row(i) = v;
  }
  return q;
}

// largest singular value via the Gram matrix of the smaller side
inline double operator_norm(const MatrixXd& m) {
  if (m.rows() == 0 || m.cols() == 0) return 0.0;
  MatrixXd gram;
  if (m.rows() <= m.cols())
    gram.noalias() = m * m.transpose();
  else
    gram.noalias() = m.transpose() * m;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(gram, Eigen::EigenvaluesOnly);
  double top = es.eigenvalues().maxCoeff();
  return std::sqrt(top > 0.0 ? top : 0.0);
}

struct PsdEig {
  MatrixXd vectors;
  VectorXd values;  // ascending, clamped at zero
};

inline PsdEig psd_eig(const MatrixXd& s) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym(s));
  if (es.info() != Eigen::Success)
    throw std::runtime_error("psd_eig: eigendecomposition failed");
  return {es.eigenvectors(), es.eigenvalues().cwiseMax(0.0)};
}

inline MatrixXd psd_sqrt(const MatrixXd& s) {
  PsdEig e = psd_eig(s);
  return e.vectors * e.values.cwiseSqrt().asDiagonal() * e.vectors.transpose();
}

// inverse square root with a relative floor on the eigenvalues;
// *floored reports how many were lifted
inline MatrixXd psd_inv_sqrt(const MatrixXd& s, double rel_floor = 1e-12,
                             int* floored = nullptr) {
  PsdEig e = psd_eig(s);
  const double top = e.values.maxCoeff();
  if (!(top > 0.0)) throw std::runtime_error("psd_inv_sqrt: zero matrix");
  const double floor = rel_floor * top;
  int count = 0;
  VectorXd inv(e.values.size());
  for (int i = 0; i < e.values.size(); ++i) {
    double v = e.values[i];
    if (v < floor) {
      v = floor;
      ++count;
    }
    inv[i] = 1.0 / std::sqrt(v);
  }
  if (floored) *floored = count;
  return e.vectors * inv.asDiagonal() * e.vectors.transpose();
}

// SPD solve of X A = B (right division by symmetric A), used for the
// right-preconditioner applications grad * (Q + lam I)^-1
inline MatrixXd solve_spd_right(const MatrixXd& b, const MatrixXd& a) {
  Eigen::LDLT<MatrixXd> ldlt(sym(a));
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
    throw std::runtime_error("solve_spd_right: matrix not positive definite");
  return ldlt.solve(b.transpose()).transpose();
}

// SPD solve of A X = B
inline MatrixXd solve_spd_left(const MatrixXd& a, const MatrixXd& b) {
  Eigen::LDLT<MatrixXd> ldlt(sym(a));
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
    throw std::runtime_error("solve_spd_left: matrix not positive definite");
  return ldlt.solve(b);
}

inline MatrixXd kron(const MatrixXd& a, const MatrixXd& b) {
  MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// column-major vec and its inverse
inline VectorXd vec(const MatrixXd& m) {
  return Eigen::Map<const VectorXd>(m.data(), m.size());
}

inline MatrixXd unvec(const VectorXd& v, int rows, int cols) {
  if (v.size() != static_cast<Eigen::Index>(rows) * cols)
    throw std::invalid_argument("unvec: size mismatch");
  return Eigen::Map<const MatrixXd>(v.data(), rows, cols);
}

}  // namespace kf
