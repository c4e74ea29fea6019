#pragma once

#include <Eigen/Dense>

#include "kronfeat/activation.hpp"
#include "kronfeat/synth_data.hpp"

namespace kf {

// Population spectral distribution H as an atomic measure, plus the
// dimension-to-sample aspect ratio phi = dx / n (phi = 0 is the
// infinite-data limit).
struct SpectralModel {
  VectorXd t;  // atom locations, >= 0
  VectorXd w;  // weights, sum to 1
  double phi = 0.0;

  double moment(int k) const;

  static SpectralModel from_covariance(const CovarianceModel& cov, int n);
  static SpectralModel two_point(double eps, double phi);
  static SpectralModel identity_spectrum(double phi);
};

// Gaussian moments of a link function at z ~ N(0, tau_sq):
// alpha = c1 = E[sigma'(z)], c_star_sq = E[sigma(z)^2],
// c_gt1_sq = E[(sigma(z) - c1 z)^2]. By Stein's identity
// c_star_sq = c1^2 tau_sq + c_gt1_sq.
struct ActivationMoments {
  double alpha = 0.0;
  double c1 = 0.0;
  double c_star_sq = 0.0;
  double c_gt1_sq = 0.0;
  double tau_sq = 0.0;
};

// 200-point Gauss-Hermite quadrature
ActivationMoments gaussian_moments(const Activation& act, double tau_sq);

// Stieltjes transform of the limiting sample-covariance spectrum at real
// z < 0, via the Silverstein fixed point for the companion transform
// nu(z) = phi (m(z) + 1/z) - 1/z:
//   -1 / nu = z - phi * sum_j w_j t_j / (1 + t_j nu).
// m_prime is the calculus derivative dm/dz (positive on the real axis
// below the support), from implicit differentiation of the fixed point.
struct StieltjesResult {
  double m = 0.0;
  double m_prime = 0.0;
  double nu = 0.0;
  int iterations = 0;
};

StieltjesResult stieltjes_m(const SpectralModel& model, double z);

// Resolvent trace factors of the ridge-regularized sample covariance:
// psi1 = lim tr(S R)/dx, psi2 = lim tr(S^2 R^2)/dx, psi3 = lim tr(S R^2)/dx
// with R = (S + lam I)^-1; all lie in [0, 1] / [0, inf).
struct PsiFactors {
  double psi1 = 0.0;
  double psi2 = 0.0;
  double psi3 = 0.0;
};

PsiFactors psi_factors(const SpectralModel& model, double lambda);

// asymptotic cosine between the one-step estimator and the index direction
double predict_corr_sgd(const ActivationMoments& teacher,
                        const SpectralModel& model, double noise_sd);
double predict_corr_kfac(const ActivationMoments& teacher,
                         const SpectralModel& model, double lambda,
                         double noise_sd);

}  // namespace kf
