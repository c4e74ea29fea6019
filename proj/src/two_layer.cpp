#include "kronfeat/two_layer.hpp"

namespace kf {

MatrixXd forward(const TwoLayerNet& net, const MatrixXd& X) {
  MatrixXd z = net.act.apply(X * net.G.transpose());
  return z * net.F.transpose();
}

double batch_loss(const TwoLayerNet& net, const Batch& batch) {
  MatrixXd r = batch.Y - forward(net, batch.X);
  return r.squaredNorm() / (2.0 * batch.n());
}

Grads grads(const TwoLayerNet& net, const Batch& batch) {
  const double n = batch.n();
  Grads out;
  MatrixXd a = batch.X * net.G.transpose();  // n x k, pre-activation
  MatrixXd z = net.act.apply(a);
  MatrixXd r = batch.Y - z * net.F.transpose();  // n x dy
  out.loss = r.squaredNorm() / (2.0 * n);
  out.F.noalias() = (-1.0 / n) * r.transpose() * z;
  MatrixXd back = r * net.F;  // n x k
  if (!net.act.is_identity()) back = back.cwiseProduct(net.act.apply_deriv(a));
  out.G.noalias() = (-1.0 / n) * back.transpose() * batch.X;
  return out;
}

MatrixXd grad_G(const TwoLayerNet& net, const Batch& batch) {
  return grads(net, batch).G;
}

MatrixXd grad_F(const TwoLayerNet& net, const Batch& batch) {
  return grads(net, batch).F;
}

PreconditionerSet preconditioners(const TwoLayerNet& net, const Batch& batch) {
  const double n = batch.n();
  const int dx = static_cast<int>(batch.X.cols());
  const int k = static_cast<int>(net.G.rows());
  PreconditionerSet p;
  p.Q_G = MatrixXd::Zero(dx, dx);
  p.Q_G.selfadjointView<Eigen::Lower>().rankUpdate(batch.X.transpose(), 1.0 / n);
  p.Q_G.triangularView<Eigen::Upper>() = p.Q_G.transpose();
  MatrixXd a = batch.X * net.G.transpose();
  MatrixXd z = net.act.apply(a);
  p.Q_F = MatrixXd::Zero(k, k);
  p.Q_F.selfadjointView<Eigen::Lower>().rankUpdate(z.transpose(), 1.0 / n);
  p.Q_F.triangularView<Eigen::Upper>() = p.Q_F.transpose();
  MatrixXd ftf = net.F.transpose() * net.F;
  if (net.act.is_identity()) {
    p.P_G = ftf;
  } else {
    MatrixXd d = net.act.apply_deriv(a);  // n x k
    p.P_G = (d.transpose() * d / n).cwiseProduct(ftf);
  }
  return p;
}

}  // namespace kf
