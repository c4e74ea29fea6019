#include "kronfeat/kf_layerwise.hpp"

#include <stdexcept>

#include "kronfeat/linalg.hpp"

namespace kf {

namespace {

void check_state(const LayerState& s) {
  if (s.z_prev.rows() == 0) throw std::invalid_argument("empty layer batch");
  if (s.z_prev.rows() != s.g.rows())
    throw std::invalid_argument("layer batch dims disagree");
  if (s.W.size() != 0 &&
      (s.W.rows() != s.g.cols() || s.W.cols() != s.z_prev.cols()))
    throw std::invalid_argument("layer weight shape disagrees with batch");
}

MatrixXd second_moment(const MatrixXd& rows) {
  MatrixXd m = MatrixXd::Zero(rows.cols(), rows.cols());
  m.selfadjointView<Eigen::Lower>().rankUpdate(rows.transpose(),
                                               1.0 / rows.rows());
  m.triangularView<Eigen::Upper>() = m.transpose();
  return m;
}

MatrixXd spd_inverse_apply_left(const MatrixXd& a, const MatrixXd& b,
                                const char* what) {
  Eigen::LDLT<MatrixXd> ldlt(a);
  // isPositive() admits semidefinite factors, so guard the pivots too
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      !(ldlt.vectorD().minCoeff() > 0.0))
    throw std::invalid_argument(std::string(what) + ": singular factor");
  return ldlt.solve(b);
}

}  // namespace

MatrixXd layer_grad(const LayerState& s) {
  check_state(s);
  return s.g.transpose() * s.z_prev / static_cast<double>(s.n());
}

std::pair<MatrixXd, MatrixXd> kfac_preconds(const LayerState& s) {
  check_state(s);
  return {second_moment(s.g), second_moment(s.z_prev)};
}

MatrixXd foof_update(const LayerState& s, double eta, double ridge) {
  if (ridge < 0.0) throw std::invalid_argument("foof_update: ridge < 0");
  MatrixXd grad = layer_grad(s);
  MatrixXd q = second_moment(s.z_prev);
  q.diagonal().array() += ridge;
  return spd_inverse_apply_left(q, grad.transpose(), "foof_update")
      .transpose() *
      eta;
}

double foof_objective(const LayerState& s, const MatrixXd& dW, double eta,
                      double ridge) {
  check_state(s);
  MatrixXd resid = s.z_prev * dW.transpose() - eta * s.g;
  return 0.5 * resid.squaredNorm() / s.n() + 0.5 * ridge * dW.squaredNorm();
}

std::pair<MatrixXd, MatrixXd> shampoo_preconds(const LayerState& s) {
  check_state(s);
  const int n = s.n();
  Eigen::VectorXd z_sq = s.z_prev.rowwise().squaredNorm();
  Eigen::VectorXd g_sq = s.g.rowwise().squaredNorm();
  MatrixXd left = s.g.transpose() * z_sq.asDiagonal() * s.g / n;
  MatrixXd right = s.z_prev.transpose() * g_sq.asDiagonal() * s.z_prev / n;
  auto fourth_root = [](const MatrixXd& m) {
    PsdEig e = psd_eig(sym(m));
    Eigen::VectorXd r = e.values.array().sqrt().sqrt();
    return MatrixXd(e.vectors * r.asDiagonal() * e.vectors.transpose());
  };
  return {fourth_root(left), fourth_root(right)};
}

MatrixXd steepest_direction(const MatrixXd& grad, const MatrixXd& P,
                            const MatrixXd& Q, double eta) {
  MatrixXd left = spd_inverse_apply_left(P, grad, "steepest_direction");
  MatrixXd full =
      spd_inverse_apply_left(Q, left.transpose(), "steepest_direction")
          .transpose();
  return -eta * full;
}

double kf_norm_sq(const MatrixXd& M, const MatrixXd& P, const MatrixXd& Q) {
  return (M.transpose() * P * M * Q).trace();
}

double variational_value(const MatrixXd& grad, const MatrixXd& M,
                         const MatrixXd& P, const MatrixXd& Q, double eta) {
  return grad.cwiseProduct(M).sum() + kf_norm_sq(M, P, Q) / (2.0 * eta);
}

double weighted_frob_norm(const MatrixXd& M, const MatrixXd& P,
                          const MatrixXd& Q) {
  return (P * M * Q).norm();
}

double dual_norm(const MatrixXd& grad, const MatrixXd& P, const MatrixXd& Q) {
  MatrixXd left = spd_inverse_apply_left(P, grad, "dual_norm");
  MatrixXd full =
      spd_inverse_apply_left(Q, left.transpose(), "dual_norm").transpose();
  return full.norm();
}

MatrixXd dual_maximizer(const MatrixXd& grad, const MatrixXd& P,
                        const MatrixXd& Q) {
  MatrixXd once_p = spd_inverse_apply_left(P, grad, "dual_maximizer");
  MatrixXd twice_p = spd_inverse_apply_left(P, once_p, "dual_maximizer");
  MatrixXd once_q =
      spd_inverse_apply_left(Q, twice_p.transpose(), "dual_maximizer")
          .transpose();
  MatrixXd full =
      spd_inverse_apply_left(Q, once_q.transpose(), "dual_maximizer")
          .transpose();
  const double scale = dual_norm(grad, P, Q);
  if (!(scale > 0.0))
    throw std::invalid_argument("dual_maximizer: zero gradient");
  return full / scale;
}

MatrixXd mlp_forward(const Mlp& net, const MatrixXd& X) {
  if (net.W.empty()) throw std::invalid_argument("mlp: no layers");
  MatrixXd z = X;
  for (std::size_t l = 0; l < net.W.size(); ++l) {
    MatrixXd h = z * net.W[l].transpose();
    z = (l + 1 < net.W.size()) ? net.act.apply(h) : h;
  }
  return z;
}

double mlp_loss(const Mlp& net, const MatrixXd& X, const MatrixXd& Y) {
  return (Y - mlp_forward(net, X)).squaredNorm() / (2.0 * X.rows());
}

std::vector<LayerState> mlp_backward(const Mlp& net, const MatrixXd& X,
                                     const MatrixXd& Y) {
  if (net.W.empty()) throw std::invalid_argument("mlp: no layers");
  const std::size_t L = net.W.size();
  std::vector<MatrixXd> inputs(L);   // z_{l-1}
  std::vector<MatrixXd> preacts(L);  // h_l
  MatrixXd z = X;
  for (std::size_t l = 0; l < L; ++l) {
    inputs[l] = z;
    preacts[l] = z * net.W[l].transpose();
    z = (l + 1 < L) ? net.act.apply(preacts[l]) : preacts[l];
  }
  std::vector<LayerState> out(L);
  MatrixXd g = z - Y;  // per-sample d(1/2||y - h_L||^2)/dh_L
  for (std::size_t l = L; l-- > 0;) {
    out[l].W = net.W[l];
    out[l].z_prev = inputs[l];
    out[l].g = g;
    if (l > 0) g = (g * net.W[l]).cwiseProduct(net.act.apply_deriv(preacts[l - 1]));
  }
  return out;
}

}  // namespace kf
