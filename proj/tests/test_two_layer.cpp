#include <doctest.h>

#include <cmath>
#include <vector>

#include "kronfeat/rng.hpp"
#include "kronfeat/synth_data.hpp"
#include "kronfeat/two_layer.hpp"

using namespace kf;

namespace {
struct Setup {
  TwoLayerNet net;
  Batch batch;
};

Setup random_setup(const char* act_name, std::uint64_t seed) {
  RngStream rng(seed, 0);
  Setup s;
  s.net.act = Activation::parse(act_name);
  s.net.G = gaussian_matrix(3, 7, rng) * 0.6;
  s.net.F = gaussian_matrix(2, 3, rng) * 0.8;
  s.batch.X = gaussian_matrix(12, 7, rng);
  s.batch.Y = gaussian_matrix(12, 2, rng);
  return s;
}

double fd_rel_error(Setup s) {
  const double h = 1e-6;
  MatrixXd gG = grad_G(s.net, s.batch);
  MatrixXd gF = grad_F(s.net, s.batch);
  double worst = 0.0;
  auto probe = [&](MatrixXd& param, const MatrixXd& grad) {
    double scale = grad.cwiseAbs().maxCoeff() + 1.0;
    for (int i = 0; i < param.size(); ++i) {
      double saved = param.data()[i];
      param.data()[i] = saved + h;
      double up = batch_loss(s.net, s.batch);
      param.data()[i] = saved - h;
      double dn = batch_loss(s.net, s.batch);
      param.data()[i] = saved;
      double fd = (up - dn) / (2.0 * h);
      worst = std::max(worst, std::abs(fd - grad.data()[i]) / scale);
    }
  };
  probe(s.net.G, gG);
  probe(s.net.F, gF);
  return worst;
}
}  // namespace

TEST_CASE("forward composes the two layers") {
  Setup s = random_setup("identity", 41);
  MatrixXd out = forward(s.net, s.batch.X);
  MatrixXd expect = s.batch.X * s.net.G.transpose() * s.net.F.transpose();
  CHECK((out - expect).cwiseAbs().maxCoeff() < 1e-13);

  s.net.act = Activation::parse("square");
  MatrixXd a = s.batch.X * s.net.G.transpose();
  MatrixXd expect_sq = a.cwiseProduct(a) * s.net.F.transpose();
  CHECK((forward(s.net, s.batch.X) - expect_sq).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("gradients match central finite differences") {
  for (const char* act : {"identity", "tanh", "square", "hermite12"}) {
    CAPTURE(act);
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      Setup s = random_setup(act, 100 + seed);
      CHECK(fd_rel_error(s) < 1e-7);
    }
  }
}

TEST_CASE("gradients match their closed forms") {
  Setup s = random_setup("tanh", 55);
  const double n = static_cast<double>(s.batch.n());
  MatrixXd a = s.batch.X * s.net.G.transpose();
  MatrixXd z = s.net.act.apply(a);
  MatrixXd d = s.net.act.apply_deriv(a);
  MatrixXd r = s.batch.Y - z * s.net.F.transpose();
  MatrixXd expect_f = -r.transpose() * z / n;
  MatrixXd expect_g =
      -((r * s.net.F).cwiseProduct(d)).transpose() * s.batch.X / n;
  CHECK((grad_F(s.net, s.batch) - expect_f).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((grad_G(s.net, s.batch) - expect_g).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("zero loss and zero gradient at the planted solution") {
  RngStream rng(42, 0);
  LinRepInstance inst = make_linrep_instance(10, 4, 2, cov_identity(10),
                                             cov_identity(10), 0.0, 0.0,
                                             Family::gaussian, rng);
  Batch b = sample_linrep_batch(inst, Task::train, 64, rng);
  TwoLayerNet net{inst.F_star_train, inst.G_star, Activation()};
  CHECK(batch_loss(net, b) < 1e-24);
  Grads g = grads(net, b);
  CHECK(g.G.cwiseAbs().maxCoeff() < 1e-13);
  CHECK(g.F.cwiseAbs().maxCoeff() < 1e-13);
  CHECK(g.loss == batch_loss(net, b));
}

TEST_CASE("grads pack the same values as the single-layer calls") {
  Setup s = random_setup("hermite12", 77);
  Grads g = grads(s.net, s.batch);
  CHECK((g.G - grad_G(s.net, s.batch)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((g.F - grad_F(s.net, s.batch)).cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.loss == doctest::Approx(batch_loss(s.net, s.batch)).epsilon(1e-14));
}

TEST_CASE("preconditioners are the layer-wise second moments") {
  Setup s = random_setup("identity", 88);
  const double n = static_cast<double>(s.batch.n());
  PreconditionerSet p = preconditioners(s.net, s.batch);
  MatrixXd z = s.net.act.apply(s.batch.X * s.net.G.transpose());
  CHECK((p.Q_G - s.batch.X.transpose() * s.batch.X / n).cwiseAbs().maxCoeff() <
        1e-12);
  CHECK((p.Q_F - z.transpose() * z / n).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((p.P_G - s.net.F.transpose() * s.net.F).cwiseAbs().maxCoeff() < 1e-13);

  // nonlinear case: P_G = (D^T D / n) elementwise with F^T F
  s.net.act = Activation::parse("tanh");
  PreconditionerSet pt = preconditioners(s.net, s.batch);
  MatrixXd a = s.batch.X * s.net.G.transpose();
  MatrixXd d = s.net.act.apply_deriv(a);
  MatrixXd ftf = s.net.F.transpose() * s.net.F;
  MatrixXd expect =
      (d.transpose() * d / n).cwiseProduct(ftf);
  CHECK((pt.P_G - expect).cwiseAbs().maxCoeff() < 1e-12);

  for (const MatrixXd* m : {&p.Q_G, &p.Q_F, &p.P_G}) {
    CHECK((*m - m->transpose()).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(*m, Eigen::EigenvaluesOnly);
    CHECK(es.eigenvalues().minCoeff() > -1e-12);
  }
}
