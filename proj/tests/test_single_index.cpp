#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "kronfeat/linalg.hpp"
#include "kronfeat/rmt_theory.hpp"
#include "kronfeat/rng.hpp"
#include "kronfeat/single_index.hpp"
#include "kronfeat/synth_data.hpp"

using namespace kf;

namespace {
struct Draw {
  SingleIndexInstance inst;
  SingleIndexBatch batch;
  OneStepInit init;
};

Draw draw_problem(const OneStepConfig& cfg, Activation teacher,
                  double noise_sd, RngStream& rng) {
  Draw d;
  d.inst = make_single_index_instance(cov_identity(cfg.dx), teacher, noise_sd,
                                      rng);
  d.batch = sample_single_index_batch(d.inst, cfg.n, rng);
  d.init = draw_one_step_init(cfg, rng);
  return d;
}
}  // namespace

TEST_CASE("method names") {
  CHECK(parse_one_step_method("sgd") == OneStepMethod::sgd);
  CHECK(parse_one_step_method("kfac") == OneStepMethod::kfac);
  CHECK(std::string(one_step_method_name(OneStepMethod::kfac)) == "kfac");
  CHECK_THROWS_AS((void)parse_one_step_method("adam"), std::invalid_argument);
}

TEST_CASE("init scaling") {
  OneStepConfig cfg;
  cfg.dx = 400;
  cfg.n = 10;
  cfg.N = 500;
  RngStream rng(70, 0);
  OneStepInit init = draw_one_step_init(cfg, rng);
  REQUIRE(init.f0.size() == 500);
  REQUIRE(init.G0.rows() == 500);
  REQUIRE(init.G0.cols() == 400);
  // f0 ~ N(0, 1/N), rows of G0 ~ N(0, I/dx)
  CHECK(init.f0.squaredNorm() == doctest::Approx(1.0).epsilon(0.15));
  CHECK(init.G0.row(0).squaredNorm() == doctest::Approx(1.0).epsilon(0.25));
  CHECK(init.G0.squaredNorm() / 500.0 == doctest::Approx(1.0).epsilon(0.05));

  OneStepConfig bad = cfg;
  bad.N = 0;
  CHECK_THROWS_AS((void)draw_one_step_init(bad, rng), std::invalid_argument);
}

TEST_CASE("identity student makes the update exactly rank one") {
  OneStepConfig cfg;
  cfg.dx = 30;
  cfg.n = 200;
  cfg.N = 25;
  cfg.eta = 0.7;
  RngStream rng(71, 0);
  Draw d = draw_problem(cfg, Activation(), 0.3, rng);

  MatrixXd g1 = one_step_update(cfg, d.init, d.batch.X, d.batch.y,
                                OneStepMethod::sgd);
  VectorXd beta = beta_centered(cfg, d.init, d.batch.X, d.batch.y);
  CHECK(rank_one_residual(g1, d.init.G0, d.init.f0, beta, 1.0, cfg.eta) <
        1e-10);

  // the kfac variant right-multiplies that same rank-one direction by the
  // ridge resolvent
  OneStepConfig kcfg = cfg;
  kcfg.lambda_G = 0.05;
  MatrixXd g1k = one_step_update(kcfg, d.init, d.batch.X, d.batch.y,
                                 OneStepMethod::kfac);
  MatrixXd sigma = d.batch.X.transpose() * d.batch.X /
                   static_cast<double>(cfg.n);
  sigma.diagonal().array() += kcfg.lambda_G;
  VectorXd beta_k = sigma.ldlt().solve(beta);
  CHECK(rank_one_residual(g1k, d.init.G0, d.init.f0, beta_k, 1.0, cfg.eta) <
        1e-10);
}

TEST_CASE("zero step size returns the initial weights") {
  OneStepConfig cfg;
  cfg.dx = 12;
  cfg.n = 40;
  cfg.N = 8;
  cfg.eta = 0.0;
  RngStream rng(72, 0);
  Draw d = draw_problem(cfg, Activation(Activation::Kind::tanh_), 0.1, rng);
  MatrixXd g1 = one_step_update(cfg, d.init, d.batch.X, d.batch.y,
                                OneStepMethod::sgd);
  CHECK((g1 - d.init.G0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("beta estimators") {
  const int dx = 25, n = 300;
  RngStream rng(73, 0);
  MatrixXd x = gaussian_matrix(n, dx, rng);
  VectorXd y(n);
  rng.fill_gaussian(y.data(), y.size());

  VectorXd sgd = beta_estimator(x, y, OneStepMethod::sgd, 0.0);
  VectorXd oracle = x.transpose() * y / static_cast<double>(n);
  CHECK((sgd - oracle).cwiseAbs().maxCoeff() == 0.0);

  VectorXd kfac = beta_estimator(x, y, OneStepMethod::kfac, 0.0);
  MatrixXd sigma = x.transpose() * x / static_cast<double>(n);
  VectorXd direct = sigma.ldlt().solve(oracle);
  CHECK((kfac - direct).cwiseAbs().maxCoeff() < 1e-10);

  // huge ridge collapses kfac onto the sgd direction
  VectorXd ridged = beta_estimator(x, y, OneStepMethod::kfac, 1e10);
  CHECK(empirical_alignment(ridged, sgd) == doctest::Approx(1.0).epsilon(1e-9));

  // unregularized kfac needs an invertible sample covariance
  MatrixXd wide = gaussian_matrix(10, 25, rng);
  VectorXd ywide(10);
  rng.fill_gaussian(ywide.data(), ywide.size());
  CHECK_THROWS_AS(
      (void)beta_estimator(wide, ywide, OneStepMethod::kfac, 0.0),
      std::invalid_argument);

  OneStepConfig cfg;
  cfg.dx = 25;
  cfg.n = 10;
  cfg.N = 5;
  cfg.eta = 0.1;
  OneStepInit init;
  init.f0 = VectorXd::Ones(5) / std::sqrt(5.0);
  init.G0 = MatrixXd::Ones(5, 25) / 5.0;
  CHECK_THROWS_AS(
      (void)one_step_update(cfg, init, wide, ywide, OneStepMethod::kfac),
      std::invalid_argument);
}

TEST_CASE("noiseless linear target is recovered exactly by kfac") {
  const int dx = 50, n = 4000;
  RngStream rng(74, 0);
  SingleIndexInstance inst =
      make_single_index_instance(cov_identity(dx), Activation(), 0.0, rng);
  SingleIndexBatch b = sample_single_index_batch(inst, n, rng);

  VectorXd kfac = beta_estimator(b.X, b.y, OneStepMethod::kfac, 0.0);
  CHECK(empirical_alignment(kfac, inst.beta_star) ==
        doctest::Approx(1.0).epsilon(1e-10));
  CHECK((kfac - inst.beta_star).cwiseAbs().maxCoeff() < 1e-10);

  VectorXd sgd = beta_estimator(b.X, b.y, OneStepMethod::sgd, 0.0);
  CHECK(empirical_alignment(sgd, inst.beta_star) > 0.99);
}

TEST_CASE("alignment properties") {
  RngStream rng(75, 0);
  VectorXd a(4), b(4);
  rng.fill_gaussian(a.data(), 4);
  rng.fill_gaussian(b.data(), 4);
  CHECK(empirical_alignment(a, a) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(empirical_alignment(VectorXd(3.0 * a), b) ==
        doctest::Approx(empirical_alignment(a, b)).epsilon(1e-14));
  CHECK(empirical_alignment(VectorXd(-a), b) ==
        doctest::Approx(-empirical_alignment(a, b)).epsilon(1e-14));
  CHECK(empirical_alignment(a, b) >= -1.0);
  CHECK(empirical_alignment(a, b) <= 1.0);
  CHECK_THROWS_AS((void)empirical_alignment(VectorXd::Zero(4), b),
                  std::invalid_argument);
  VectorXd short_vec(3);
  short_vec << 1, 2, 3;
  CHECK_THROWS_AS((void)empirical_alignment(a, short_vec),
                  std::invalid_argument);
}

TEST_CASE("student predictions match a scalar evaluation") {
  OneStepConfig cfg;
  cfg.dx = 2;
  cfg.N = 2;
  cfg.n = 3;
  cfg.act = Activation(Activation::Kind::square);
  OneStepInit init;
  init.f0.resize(2);
  init.f0 << 0.5, -1.5;
  init.G0.resize(2, 2);
  init.G0 << 1.0, 2.0, -0.5, 0.25;
  MatrixXd x(3, 2);
  x << 1.0, 0.0, 0.0, 1.0, 2.0, -1.0;
  VectorXd got = one_step_predict(cfg, init, x);
  const double inv_root = 1.0 / std::sqrt(2.0);
  for (int i = 0; i < 3; ++i) {
    double expect = 0.0;
    for (int j = 0; j < 2; ++j) {
      double pre = x(i, 0) * init.G0(j, 0) + x(i, 1) * init.G0(j, 1);
      expect += init.f0[j] * pre * pre;
    }
    CHECK(got[i] == doctest::Approx(expect * inv_root).epsilon(1e-14));
  }
}

TEST_CASE("rank-one approximation sharpens with size") {
  auto relative_residual = [](int dx, int n, int N, std::uint64_t seed) {
    OneStepConfig cfg;
    cfg.dx = dx;
    cfg.n = n;
    cfg.N = N;
    cfg.eta = 0.5;
    cfg.act = Activation(Activation::Kind::tanh_);
    RngStream rng(seed, 0);
    SingleIndexInstance inst = make_single_index_instance(
        cov_identity(dx), Activation(Activation::Kind::tanh_), 0.1, rng);
    SingleIndexBatch b = sample_single_index_batch(inst, n, rng);
    OneStepInit init = draw_one_step_init(cfg, rng);
    MatrixXd g1 =
        one_step_update(cfg, init, b.X, b.y, OneStepMethod::sgd);
    VectorXd beta = beta_estimator(b.X, b.y, OneStepMethod::sgd, 0.0);
    double alpha = gaussian_moments(cfg.act, 1.0).alpha;
    double resid = rank_one_residual(g1, init.G0, init.f0, beta, alpha,
                                     cfg.eta);
    return resid / (std::abs(alpha) * cfg.eta * init.f0.norm() * beta.norm());
  };
  double small = relative_residual(60, 180, 60, 76);
  double large = relative_residual(240, 720, 240, 76);
  CHECK(large < small);
  CHECK(large < 0.75);
}
