#pragma once

#include <Eigen/Dense>
#include <string>

#include "kronfeat/activation.hpp"
#include "kronfeat/rng.hpp"

namespace kf {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// One-step feature learning for a scalar-output two-layer student
// f(x) = N^{-1/2} f0^T sigma(G0 x).
struct OneStepConfig {
  int dx = 0;
  int n = 0;
  int N = 0;           // hidden width
  double eta = 0.0;    // step scale, the layer update uses eta * sqrt(N)
  double lambda_G = 0.0;
  Activation act;      // student activation
};

struct OneStepInit {
  VectorXd f0;  // N entries, N(0, 1/N)
  MatrixXd G0;  // N x dx, entries N(0, 1/dx)
};

// Draw order: f0, then G0 row-major.
OneStepInit draw_one_step_init(const OneStepConfig& cfg, RngStream& rng);

enum class OneStepMethod { sgd, kfac };
OneStepMethod parse_one_step_method(const std::string& s);
const char* one_step_method_name(OneStepMethod m);

// Student predictions at the initial weights, n-vector.
VectorXd one_step_predict(const OneStepConfig& cfg, const OneStepInit& init,
                          const MatrixXd& X);

// G1 = G0 - eta sqrt(N) grad_G, with the kfac variant right-multiplying the
// gradient by (Sigma_hat + lambda I)^{-1}. kfac with lambda = 0 demands a
// nonsingular sample covariance, so n < dx is rejected.
MatrixXd one_step_update(const OneStepConfig& cfg, const OneStepInit& init,
                         const MatrixXd& X, const VectorXd& y,
                         OneStepMethod method);

// sgd: X^T y / n.  kfac: (Sigma_hat + lambda I)^{-1} X^T y / n.
VectorXd beta_estimator(const MatrixXd& X, const VectorXd& y,
                        OneStepMethod method, double lambda_G);

// X^T (y - yhat0) / n, the residual-based direction. For an identity student
// activation the one-step update is exactly G0 + eta f0 beta^T with this beta.
VectorXd beta_centered(const OneStepConfig& cfg, const OneStepInit& init,
                       const MatrixXd& X, const VectorXd& y);

// Signed cosine; rejects zero vectors.
double empirical_alignment(const VectorXd& beta, const VectorXd& beta_star);

// || G1 - G0 - alpha eta f0 beta^T ||_op. The rank-one term carries the sign
// under which a linear student makes the residual vanish.
double rank_one_residual(const MatrixXd& G1, const MatrixXd& G0,
                         const VectorXd& f0, const VectorXd& beta,
                         double alpha, double eta);

}  // namespace kf
