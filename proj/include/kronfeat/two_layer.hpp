#pragma once

#include <Eigen/Dense>

#include "kronfeat/activation.hpp"
#include "kronfeat/synth_data.hpp"

namespace kf {

// f(x) = F sigma(G x), squared loss ||Y - sigma(X G^T) F^T||^2 / (2n)
struct TwoLayerNet {
  MatrixXd F;  // dy x k
  MatrixXd G;  // k x dx
  Activation act;
};

MatrixXd forward(const TwoLayerNet& net, const MatrixXd& X);

double batch_loss(const TwoLayerNet& net, const Batch& batch);

MatrixXd grad_G(const TwoLayerNet& net, const Batch& batch);
MatrixXd grad_F(const TwoLayerNet& net, const Batch& batch);

struct Grads {
  MatrixXd G;
  MatrixXd F;
  double loss = 0.0;  // evaluated on the same batch, no extra pass
};
Grads grads(const TwoLayerNet& net, const Batch& batch);

// Layer-wise curvature factors: Q_G = X^T X / n, Q_F = Z^T Z / n with
// Z = sigma(X G^T), P_G = E[J^T J] for J the output-side Jacobian
// (F^T F when the activation is the identity), P_F = I.
struct PreconditionerSet {
  MatrixXd P_G;  // k x k
  MatrixXd Q_G;  // dx x dx
  MatrixXd Q_F;  // k x k
};

PreconditionerSet preconditioners(const TwoLayerNet& net, const Batch& batch);

}  // namespace kf
