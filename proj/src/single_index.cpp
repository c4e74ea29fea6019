#include "kronfeat/single_index.hpp"

#include <cmath>
#include <stdexcept>

#include "kronfeat/linalg.hpp"
#include "kronfeat/two_layer.hpp"

namespace kf {

OneStepInit draw_one_step_init(const OneStepConfig& cfg, RngStream& rng) {
  if (cfg.dx <= 0 || cfg.n <= 0 || cfg.N <= 0)
    throw std::invalid_argument("one-step config: dims must be positive");
  OneStepInit init;
  init.f0.resize(cfg.N);
  rng.fill_gaussian(init.f0.data(), init.f0.size());
  init.f0 /= std::sqrt(static_cast<double>(cfg.N));
  init.G0.resize(cfg.N, cfg.dx);
  MatrixXd raw(cfg.dx, cfg.N);  // column-major fill reads as row-major of G0
  rng.fill_gaussian(raw.data(), raw.size());
  init.G0 = raw.transpose() / std::sqrt(static_cast<double>(cfg.dx));
  return init;
}

OneStepMethod parse_one_step_method(const std::string& s) {
  if (s == "sgd") return OneStepMethod::sgd;
  if (s == "kfac") return OneStepMethod::kfac;
  throw std::invalid_argument("unknown one-step method: " + s);
}

const char* one_step_method_name(OneStepMethod m) {
  return m == OneStepMethod::sgd ? "sgd" : "kfac";
}

VectorXd one_step_predict(const OneStepConfig& cfg, const OneStepInit& init,
                          const MatrixXd& X) {
  MatrixXd z = cfg.act.apply(X * init.G0.transpose());
  return z * init.f0 / std::sqrt(static_cast<double>(cfg.N));
}

namespace {

MatrixXd ridge_inv_apply(const MatrixXd& grad, const MatrixXd& X,
                         double lambda) {
  MatrixXd sigma = MatrixXd::Zero(X.cols(), X.cols());
  sigma.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose(),
                                                   1.0 / X.rows());
  sigma.triangularView<Eigen::Upper>() = sigma.transpose();
  sigma.diagonal().array() += lambda;
  Eigen::LDLT<MatrixXd> ldlt(sigma);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
    throw std::invalid_argument(
        "singular sample covariance: lambda_G > 0 required");
  return ldlt.solve(grad.transpose()).transpose();
}

}  // namespace

MatrixXd one_step_update(const OneStepConfig& cfg, const OneStepInit& init,
                         const MatrixXd& X, const VectorXd& y,
                         OneStepMethod method) {
  if (X.rows() != y.size() || X.cols() != cfg.dx || X.rows() != cfg.n)
    throw std::invalid_argument("one_step_update: shape mismatch");
  if (method == OneStepMethod::kfac && cfg.lambda_G == 0.0 && cfg.n < cfg.dx)
    throw std::invalid_argument(
        "kfac one-step with n < dx: lambda_G > 0 required");

  const double root_n_hidden = std::sqrt(static_cast<double>(cfg.N));
  Batch batch;
  batch.X = X;
  batch.Y = y;
  TwoLayerNet net{init.f0.transpose() / root_n_hidden, init.G0, cfg.act};
  MatrixXd g = grad_G(net, batch);
  if (method == OneStepMethod::kfac) g = ridge_inv_apply(g, X, cfg.lambda_G);
  return init.G0 - cfg.eta * root_n_hidden * g;
}

VectorXd beta_estimator(const MatrixXd& X, const VectorXd& y,
                        OneStepMethod method, double lambda_G) {
  if (X.rows() != y.size())
    throw std::invalid_argument("beta_estimator: shape mismatch");
  VectorXd b = X.transpose() * y / static_cast<double>(X.rows());
  if (method == OneStepMethod::sgd) return b;
  if (lambda_G == 0.0 && X.rows() < X.cols())
    throw std::invalid_argument(
        "kfac estimator with n < dx: lambda_G > 0 required");
  return ridge_inv_apply(b.transpose(), X, lambda_G).transpose();
}

VectorXd beta_centered(const OneStepConfig& cfg, const OneStepInit& init,
                       const MatrixXd& X, const VectorXd& y) {
  VectorXd resid = y - one_step_predict(cfg, init, X);
  return X.transpose() * resid / static_cast<double>(X.rows());
}

double empirical_alignment(const VectorXd& beta, const VectorXd& beta_star) {
  if (beta.size() != beta_star.size())
    throw std::invalid_argument("empirical_alignment: size mismatch");
  const double nb = beta.norm();
  const double ns = beta_star.norm();
  if (!(nb > 0.0) || !(ns > 0.0))
    throw std::invalid_argument("empirical_alignment: zero vector");
  return beta.dot(beta_star) / (nb * ns);
}

double rank_one_residual(const MatrixXd& G1, const MatrixXd& G0,
                         const VectorXd& f0, const VectorXd& beta,
                         double alpha, double eta) {
  MatrixXd resid = G1 - G0 - alpha * eta * f0 * beta.transpose();
  return operator_norm(resid);
}

}  // namespace kf
