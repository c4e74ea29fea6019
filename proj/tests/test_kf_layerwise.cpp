#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "kronfeat/kf_layerwise.hpp"
#include "kronfeat/linalg.hpp"
#include "kronfeat/rng.hpp"
#include "kronfeat/synth_data.hpp"

using namespace kf;

namespace {
MatrixXd random_spd(int d, RngStream& rng) {
  MatrixXd b = gaussian_matrix(d, d, rng);
  return MatrixXd(b.transpose() * b / d + 0.1 * MatrixXd::Identity(d, d));
}

LayerState random_state(int n, int d_in, int d_out, RngStream& rng) {
  LayerState s;
  s.z_prev = gaussian_matrix(n, d_in, rng);
  s.g = gaussian_matrix(n, d_out, rng);
  s.W = gaussian_matrix(d_out, d_in, rng);
  return s;
}
}  // namespace

TEST_CASE("layer gradient and preconditioner moments") {
  RngStream rng(81, 0);
  LayerState s = random_state(40, 6, 4, rng);

  MatrixXd grad_direct = MatrixXd::Zero(4, 6);
  MatrixXd p_direct = MatrixXd::Zero(4, 4);
  MatrixXd q_direct = MatrixXd::Zero(6, 6);
  for (int i = 0; i < 40; ++i) {
    grad_direct += s.g.row(i).transpose() * s.z_prev.row(i);
    p_direct += s.g.row(i).transpose() * s.g.row(i);
    q_direct += s.z_prev.row(i).transpose() * s.z_prev.row(i);
  }
  grad_direct /= 40.0;
  p_direct /= 40.0;
  q_direct /= 40.0;

  CHECK((layer_grad(s) - grad_direct).cwiseAbs().maxCoeff() < 1e-12);
  auto [p, q] = kfac_preconds(s);
  CHECK((p - p_direct).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((q - q_direct).cwiseAbs().maxCoeff() < 1e-12);

  LayerState empty;
  CHECK_THROWS_AS((void)layer_grad(empty), std::invalid_argument);
  LayerState mismatched = s;
  mismatched.W = MatrixXd::Zero(3, 3);
  CHECK_THROWS_AS((void)layer_grad(mismatched), std::invalid_argument);
}

TEST_CASE("steepest direction solves the kronecker system") {
  RngStream rng(82, 0);
  for (int trial = 0; trial < 5; ++trial) {
    int d_out = 2 + static_cast<int>(rng.next_u32() % 5);
    int d_in = 2 + static_cast<int>(rng.next_u32() % 5);
    MatrixXd p = random_spd(d_out, rng);
    MatrixXd q = random_spd(d_in, rng);
    MatrixXd grad = gaussian_matrix(d_out, d_in, rng);
    const double eta = 0.3;

    MatrixXd m = steepest_direction(grad, p, q, eta);
    MatrixXd fisher = kron(q, p);
    VectorXd direct = -eta * fisher.ldlt().solve(vec(grad));
    CHECK((vec(m) - direct).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("steepest direction is the variational minimizer") {
  RngStream rng(83, 0);
  MatrixXd p = random_spd(5, rng);
  MatrixXd q = random_spd(7, rng);
  MatrixXd grad = gaussian_matrix(5, 7, rng);
  const double eta = 0.6;
  MatrixXd m = steepest_direction(grad, p, q, eta);

  // stationarity of J(M) = <grad, M> + tr(M^T P M Q) / (2 eta)
  MatrixXd j_grad = grad + p * m * q / eta;
  CHECK(j_grad.norm() < 1e-8 * grad.norm());

  // closed-form optimum -(eta/2) tr(grad^T P^-1 grad Q^-1)
  double s = grad.cwiseProduct(p.ldlt().solve(grad) * q.inverse()).sum();
  double at_min = variational_value(grad, m, p, q, eta);
  CHECK(at_min == doctest::Approx(-0.5 * eta * s).epsilon(1e-10));
  CHECK(at_min < 0.0);

  // random perturbations never go lower
  const double radius = 0.1 * m.norm();
  for (int probe = 0; probe < 200; ++probe) {
    MatrixXd delta = gaussian_matrix(5, 7, rng);
    delta *= radius / delta.norm();
    CHECK(variational_value(grad, MatrixXd(m + delta), p, q, eta) >=
          at_min - 1e-12);
  }

  CHECK_THROWS_AS(
      (void)steepest_direction(grad, MatrixXd::Zero(5, 5), q, eta),
      std::invalid_argument);
}

TEST_CASE("foof update minimizes its ridge regression") {
  RngStream rng(84, 0);
  LayerState s = random_state(60, 8, 3, rng);
  const double eta = 0.4, ridge = 0.05;

  MatrixXd dw = foof_update(s, eta, ridge);
  MatrixXd q = s.z_prev.transpose() * s.z_prev / 60.0;
  q.diagonal().array() += ridge;
  MatrixXd oracle = eta * (q.ldlt().solve(layer_grad(s).transpose())).transpose();
  CHECK((dw - oracle).cwiseAbs().maxCoeff() < 1e-12);

  double at_min = foof_objective(s, dw, eta, ridge);
  const double radius = 0.1 * dw.norm();
  for (int probe = 0; probe < 200; ++probe) {
    MatrixXd delta = gaussian_matrix(3, 8, rng);
    delta *= radius / delta.norm();
    CHECK(foof_objective(s, MatrixXd(dw + delta), eta, ridge) >=
          at_min - 1e-12);
  }
  CHECK_THROWS_AS((void)foof_update(s, eta, -1.0), std::invalid_argument);
}

TEST_CASE("shampoo factors are fourth roots of the sketched moments") {
  RngStream rng(85, 0);
  LayerState s = random_state(50, 6, 4, rng);
  auto [p, q] = shampoo_preconds(s);

  MatrixXd left = MatrixXd::Zero(4, 4);
  MatrixXd right = MatrixXd::Zero(6, 6);
  for (int i = 0; i < 50; ++i) {
    MatrixXd gi = s.g.row(i).transpose() * s.z_prev.row(i);
    left += gi * gi.transpose();
    right += gi.transpose() * gi;
  }
  left /= 50.0;
  right /= 50.0;

  MatrixXd p4 = p * p * p * p;
  MatrixXd q4 = q * q * q * q;
  CHECK((p4 - left).cwiseAbs().maxCoeff() < 1e-10 * left.norm());
  CHECK((q4 - right).cwiseAbs().maxCoeff() < 1e-10 * right.norm());
  CHECK((p - p.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((q - q.transpose()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("dual norm and its maximizer") {
  RngStream rng(86, 0);
  MatrixXd p = random_spd(4, rng);
  MatrixXd q = random_spd(6, rng);
  MatrixXd grad = gaussian_matrix(4, 6, rng);

  double dn = dual_norm(grad, p, q);
  MatrixXd oracle = p.ldlt().solve(grad) * q.inverse();
  CHECK(dn == doctest::Approx(oracle.norm()).epsilon(1e-12));

  MatrixXd m = dual_maximizer(grad, p, q);
  CHECK(weighted_frob_norm(m, p, q) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(grad.cwiseProduct(m).sum() == doctest::Approx(dn).epsilon(1e-10));

  // no feasible direction beats the maximizer
  for (int probe = 0; probe < 100; ++probe) {
    MatrixXd d = gaussian_matrix(4, 6, rng);
    d /= weighted_frob_norm(d, p, q);
    CHECK(grad.cwiseProduct(d).sum() <= dn + 1e-10);
  }

  CHECK_THROWS_AS((void)dual_maximizer(MatrixXd::Zero(4, 6), p, q),
                  std::invalid_argument);
}

TEST_CASE("mlp backward matches finite differences") {
  RngStream rng(87, 0);
  Mlp net;
  net.act = Activation(Activation::Kind::tanh_);
  net.W = {0.6 * gaussian_matrix(4, 5, rng), 0.6 * gaussian_matrix(3, 4, rng),
           0.6 * gaussian_matrix(2, 3, rng)};
  MatrixXd x = gaussian_matrix(20, 5, rng);
  MatrixXd y = gaussian_matrix(20, 2, rng);

  std::vector<LayerState> states = mlp_backward(net, x, y);
  REQUIRE(states.size() == 3);
  const double h = 1e-6;
  for (std::size_t l = 0; l < 3; ++l) {
    MatrixXd analytic = layer_grad(states[l]);
    double scale = analytic.cwiseAbs().maxCoeff() + 1.0;
    for (int r = 0; r < net.W[l].rows(); ++r) {
      for (int c = 0; c < net.W[l].cols(); ++c) {
        Mlp plus = net, minus = net;
        plus.W[l](r, c) += h;
        minus.W[l](r, c) -= h;
        double fd = (mlp_loss(plus, x, y) - mlp_loss(minus, x, y)) / (2.0 * h);
        CHECK(std::abs(analytic(r, c) - fd) / scale < 1e-7);
      }
    }
  }

  // layer states expose exactly the forward-pass inputs
  CHECK((states[0].z_prev - x).cwiseAbs().maxCoeff() == 0.0);
  MatrixXd h1 = net.act.apply(x * net.W[0].transpose());
  CHECK((states[1].z_prev - h1).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(mlp_forward(net, x).rows() == 20);
  CHECK(mlp_forward(net, x).cols() == 2);

  Mlp empty;
  CHECK_THROWS_AS((void)mlp_forward(empty, x), std::invalid_argument);
}

TEST_CASE("foof on a layer state equals eta grad against ridged inputs") {
  // the linear-output layer of a one-layer mlp reproduces the textbook
  // least-squares direction
  RngStream rng(88, 0);
  Mlp net;
  net.W = {gaussian_matrix(2, 6, rng)};
  MatrixXd x = gaussian_matrix(30, 6, rng);
  MatrixXd y = gaussian_matrix(30, 2, rng);
  std::vector<LayerState> states = mlp_backward(net, x, y);
  MatrixXd dw = foof_update(states[0], 1.0, 0.0);
  // one full foof step with eta = 1 jumps to the least-squares solution
  MatrixXd w_new = net.W[0] - dw;
  MatrixXd w_ls = (x.transpose() * x)
                      .ldlt()
                      .solve(x.transpose() * y)
                      .transpose();
  CHECK((w_new - w_ls).cwiseAbs().maxCoeff() < 1e-9);
}
