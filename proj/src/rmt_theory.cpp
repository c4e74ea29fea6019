#include "kronfeat/rmt_theory.hpp"

#include <cmath>
#include <stdexcept>

namespace kf {

double SpectralModel::moment(int k) const {
  double acc = 0.0;
  for (int j = 0; j < t.size(); ++j) acc += w[j] * std::pow(t[j], k);
  return acc;
}

SpectralModel SpectralModel::from_covariance(const CovarianceModel& cov, int n) {
  SpectralModel m;
  m.t = cov.eigenvalues;
  m.w = VectorXd::Constant(cov.dim(), 1.0 / cov.dim());
  m.phi = static_cast<double>(cov.dim()) / n;
  return m;
}

SpectralModel SpectralModel::two_point(double eps, double phi) {
  SpectralModel m;
  m.t = VectorXd(2);
  m.t << 1.0 - eps, 1.0 + eps;
  m.w = VectorXd::Constant(2, 0.5);
  m.phi = phi;
  return m;
}

SpectralModel SpectralModel::identity_spectrum(double phi) {
  SpectralModel m;
  m.t = VectorXd::Constant(1, 1.0);
  m.w = VectorXd::Constant(1, 1.0);
  m.phi = phi;
  return m;
}

namespace {

struct GaussHermite {
  VectorXd nodes;
  VectorXd weights;  // for weight function exp(-x^2), sum = sqrt(pi)
};

// Golub-Welsch on the Hermite Jacobi matrix
const GaussHermite& gauss_hermite_200() {
  static const GaussHermite gh = [] {
    const int n = 200;
    MatrixXd j = MatrixXd::Zero(n, n);
    for (int i = 1; i < n; ++i) {
      double b = std::sqrt(i / 2.0);
      j(i, i - 1) = b;
      j(i - 1, i) = b;
    }
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(j);
    GaussHermite out;
    out.nodes = es.eigenvalues();
    out.weights = VectorXd(n);
    const double mu0 = std::sqrt(M_PI);
    for (int i = 0; i < n; ++i) {
      double v0 = es.eigenvectors()(0, i);
      out.weights[i] = mu0 * v0 * v0;
    }
    return out;
  }();
  return gh;
}

}  // namespace

ActivationMoments gaussian_moments(const Activation& act, double tau_sq) {
  if (!(tau_sq > 0.0)) throw std::invalid_argument("gaussian_moments: tau_sq must be > 0");
  const GaussHermite& gh = gauss_hermite_200();
  const double tau = std::sqrt(tau_sq);
  const double norm = 1.0 / std::sqrt(M_PI);
  double c1 = 0.0, c2 = 0.0;
  for (int i = 0; i < gh.nodes.size(); ++i) {
    const double z = std::sqrt(2.0) * tau * gh.nodes[i];
    c1 += gh.weights[i] * act.df(z);
    c2 += gh.weights[i] * act.f(z) * act.f(z);
  }
  c1 *= norm;
  c2 *= norm;
  double orth = 0.0;
  for (int i = 0; i < gh.nodes.size(); ++i) {
    const double z = std::sqrt(2.0) * tau * gh.nodes[i];
    const double r = act.f(z) - c1 * z;
    orth += gh.weights[i] * r * r;
  }
  orth *= norm;
  ActivationMoments m;
  m.alpha = c1;
  m.c1 = c1;
  m.c_star_sq = c2;
  m.c_gt1_sq = orth;
  m.tau_sq = tau_sq;
  return m;
}

StieltjesResult stieltjes_m(const SpectralModel& model, double z) {
  if (!(z < 0.0)) throw std::invalid_argument("stieltjes_m: need real z < 0");
  if (model.phi < 0.0) throw std::invalid_argument("stieltjes_m: phi must be >= 0");
  const double phi = model.phi;
  if (phi == 0.0) {
    // no sampling noise: the spectrum is H itself
    double m = 0.0, mp = 0.0;
    for (int j = 0; j < model.t.size(); ++j) {
      m += model.w[j] / (model.t[j] - z);
      mp += model.w[j] / ((model.t[j] - z) * (model.t[j] - z));
    }
    return {m, mp, 0.0, 0};
  }
  auto rhs = [&](double nu) {
    double s = 0.0;
    for (int j = 0; j < model.t.size(); ++j)
      s += model.w[j] * model.t[j] / (1.0 + model.t[j] * nu);
    return -1.0 / (z - phi * s);
  };
  const double damping = 0.5;
  const double tol = 1e-12;
  const int max_iter = 100000;
  double nu = -1.0 / z;
  int it = 0;
  for (; it < max_iter; ++it) {
    double next = (1.0 - damping) * nu + damping * rhs(nu);
    if (std::abs(next - nu) <= tol * std::max(1.0, std::abs(next))) {
      nu = next;
      break;
    }
    nu = next;
  }
  if (it == max_iter)
    throw std::runtime_error("stieltjes_m: fixed point did not converge");
  auto weighted_sq = [&](double v) {
    double s = 0.0;
    for (int j = 0; j < model.t.size(); ++j) {
      const double d = 1.0 + model.t[j] * v;
      s += model.w[j] * model.t[j] * model.t[j] / (d * d);
    }
    return s;
  };
  // Newton polish on the residual 1/nu + z - phi * sum w t / (1 + t nu)
  for (int i = 0; i < 3; ++i) {
    double s1 = 0.0;
    for (int j = 0; j < model.t.size(); ++j)
      s1 += model.w[j] * model.t[j] / (1.0 + model.t[j] * nu);
    const double res = 1.0 / nu + z - phi * s1;
    const double dres = -(1.0 / (nu * nu) - phi * weighted_sq(nu));
    if (dres == 0.0) break;
    nu -= res / dres;
  }

  const double denom = 1.0 / (nu * nu) - phi * weighted_sq(nu);
  if (!(denom > 0.0))
    throw std::runtime_error("stieltjes_m: unstable fixed point (z inside support?)");
  const double nu_prime = 1.0 / denom;
  StieltjesResult r;
  r.nu = nu;
  r.m = (nu + 1.0 / z) / phi - 1.0 / z;
  r.m_prime = (nu_prime - 1.0 / (z * z)) / phi + 1.0 / (z * z);
  r.iterations = it + 1;
  return r;
}

PsiFactors psi_factors(const SpectralModel& model, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("psi_factors: lambda must be > 0");
  PsiFactors p;
  if (model.phi == 0.0) {
    for (int j = 0; j < model.t.size(); ++j) {
      const double d = model.t[j] + lambda;
      p.psi1 += model.w[j] * model.t[j] / d;
      p.psi2 += model.w[j] * model.t[j] * model.t[j] / (d * d);
      p.psi3 += model.w[j] * model.t[j] / (d * d);
    }
    return p;
  }
  // The naive forms 1 - lambda m etc. cancel catastrophically once lambda
  // dwarfs the spectrum, so evaluate through the companion transform nu and
  // the fixed point 1/nu = lambda + phi s1, where every sum below is benign:
  //   psi1 = nu s1, psi3 = t1 / d, psi2 = (w2 + phi s1 (t1 - nu w2)) / d
  const double nu = stieltjes_m(model, -lambda).nu;
  double s1 = 0.0, t1 = 0.0, w2 = 0.0;
  for (int j = 0; j < model.t.size(); ++j) {
    const double r = model.t[j] / (1.0 + model.t[j] * nu);
    s1 += model.w[j] * r;
    t1 += model.w[j] * r / (1.0 + model.t[j] * nu);
    w2 += model.w[j] * r * r;
  }
  const double d = 1.0 / (nu * nu) - model.phi * w2;
  if (!(d > 0.0))
    throw std::runtime_error("psi_factors: unstable fixed point");
  p.psi1 = nu * s1;
  p.psi3 = t1 / d;
  p.psi2 = (w2 + model.phi * s1 * (t1 - nu * w2)) / d;
  const double slack = -1e-12;
  if (p.psi1 < slack || p.psi2 < slack || p.psi3 < slack)
    throw std::runtime_error("psi_factors: negative resolvent trace");
  p.psi1 = std::max(p.psi1, 0.0);
  p.psi2 = std::max(p.psi2, 0.0);
  p.psi3 = std::max(p.psi3, 0.0);
  return p;
}

namespace {

void check_tau(const ActivationMoments& teacher, const SpectralModel& model) {
  const double mu1 = model.moment(1);
  if (std::abs(teacher.tau_sq - mu1) > 1e-8 * std::max(1.0, mu1))
    throw std::invalid_argument(
        "correlation predictor: moments computed at tau_sq != tr(Sigma)/dx");
}

}  // namespace

double predict_corr_sgd(const ActivationMoments& teacher,
                        const SpectralModel& model, double noise_sd) {
  check_tau(teacher, model);
  const double mu1 = model.moment(1);
  const double mu2 = model.moment(2);
  const double num = teacher.c1 * mu1;
  const double rad = (teacher.c_star_sq + noise_sd * noise_sd) * model.phi * mu1 +
                     teacher.c1 * teacher.c1 * mu2;
  if (rad <= 0.0) throw std::runtime_error("predict_corr_sgd: degenerate radicand");
  return num / std::sqrt(rad);
}

double predict_corr_kfac(const ActivationMoments& teacher,
                         const SpectralModel& model, double lambda,
                         double noise_sd) {
  check_tau(teacher, model);
  PsiFactors p = psi_factors(model, lambda);
  const double num = teacher.c1 * p.psi1;
  const double rad =
      teacher.c1 * teacher.c1 * p.psi2 +
      model.phi * (teacher.c_gt1_sq + noise_sd * noise_sd) * p.psi3;
  if (rad < -1e-12) throw std::runtime_error("predict_corr_kfac: negative radicand");
  if (rad <= 0.0) throw std::runtime_error("predict_corr_kfac: degenerate radicand");
  return num / std::sqrt(rad);
}

}  // namespace kf
