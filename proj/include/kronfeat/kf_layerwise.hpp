#pragma once

#include <Eigen/Dense>
#include <utility>
#include <vector>

#include "kronfeat/activation.hpp"

namespace kf {

using Eigen::MatrixXd;

// Per-layer batch quantities for a fully-connected layer h = W z_prev.
// z_prev holds layer inputs row-wise (n x d_in), g holds per-sample loss
// gradients at the pre-activation (n x d_out).
struct LayerState {
  MatrixXd W;       // d_out x d_in
  MatrixXd z_prev;  // n x d_in
  MatrixXd g;       // n x d_out
  int n() const { return static_cast<int>(z_prev.rows()); }
};

// Empirical layer gradient g^T z_prev / n.
MatrixXd layer_grad(const LayerState& s);

// P = E_hat[g g^T], Q = E_hat[z_prev z_prev^T].
std::pair<MatrixXd, MatrixXd> kfac_preconds(const LayerState& s);

// eta * grad * (Q + ridge I)^{-1}; the minimizer of
// (1/2) E_hat ||dW z - eta g||^2 + (ridge/2) ||dW||_F^2.
MatrixXd foof_update(const LayerState& s, double eta, double ridge);
double foof_objective(const LayerState& s, const MatrixXd& dW, double eta,
                      double ridge);

// P = E_hat[G G^T]^{1/4}, Q = E_hat[G^T G]^{1/4} with per-sample G = g z^T.
std::pair<MatrixXd, MatrixXd> shampoo_preconds(const LayerState& s);

// -eta P^{-1} grad Q^{-1}; rejects singular P or Q.
MatrixXd steepest_direction(const MatrixXd& grad, const MatrixXd& P,
                            const MatrixXd& Q, double eta);

// tr(M^T P M Q), the squared norm in the local model
// J(M) = <grad, M> + tr(M^T P M Q) / (2 eta).
double kf_norm_sq(const MatrixXd& M, const MatrixXd& P, const MatrixXd& Q);
double variational_value(const MatrixXd& grad, const MatrixXd& M,
                         const MatrixXd& P, const MatrixXd& Q, double eta);

// Frobenius norm ||P M Q||_F and the dual norm of <grad, .> under it,
// ||P^{-1} grad Q^{-1}||_F, together with the maximizing unit direction.
double weighted_frob_norm(const MatrixXd& M, const MatrixXd& P,
                          const MatrixXd& Q);
double dual_norm(const MatrixXd& grad, const MatrixXd& P, const MatrixXd& Q);
MatrixXd dual_maximizer(const MatrixXd& grad, const MatrixXd& P,
                        const MatrixXd& Q);

// Minimal MLP with linear output layer and squared loss (1/2n)||Y - out||^2,
// just enough to produce per-layer (z_prev, g) batches.
struct Mlp {
  std::vector<MatrixXd> W;  // W[l]: d_{l+1} x d_l
  Activation act;           // hidden activation
};

MatrixXd mlp_forward(const Mlp& net, const MatrixXd& X);
double mlp_loss(const Mlp& net, const MatrixXd& X, const MatrixXd& Y);
std::vector<LayerState> mlp_backward(const Mlp& net, const MatrixXd& X,
                                     const MatrixXd& Y);

}  // namespace kf
