#include "kronfeat/synth_data.hpp"

#include <cmath>
#include <stdexcept>
#include <unsupported/Eigen/MatrixFunctions>

#include "kronfeat/linalg.hpp"

namespace kf {

MatrixXd gaussian_matrix(int rows, int cols, RngStream& rng) {
  MatrixXd m(rows, cols);
  rng.fill_gaussian(m.data(), static_cast<std::size_t>(rows) * cols);
  return m;
}

CovarianceModel cov_identity(int dim) {
  CovarianceModel c;
  c.matrix = MatrixXd::Identity(dim, dim);
  c.sqrt = c.matrix;
  c.eigenvectors = c.matrix;
  c.eigenvalues = VectorXd::Ones(dim);
  c.recipe = "identity";
  return c;
}

CovarianceModel cov_low_aniso(int dim, RngStream& rng) {
  MatrixXd e = 5.0 * MatrixXd::Identity(dim, dim) + gaussian_matrix(dim, dim, rng);
  PsdEig raw = [&] {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym(e));
    return PsdEig{es.eigenvectors(), es.eigenvalues()};
  }();
  constexpr double kFloor = 1e-3;
  CovarianceModel c;
  c.floored = 0;
  VectorXd vals = raw.values;
  for (int i = 0; i < vals.size(); ++i) {
    if (vals[i] < kFloor) {
      vals[i] = kFloor;
      ++c.floored;
    }
  }
  c.eigenvectors = raw.vectors;
  c.eigenvalues = vals;
  c.matrix = sym(raw.vectors * vals.asDiagonal() * raw.vectors.transpose());
  c.sqrt = sym(raw.vectors * vals.cwiseSqrt().asDiagonal() * raw.vectors.transpose());
  c.recipe = "low_aniso";
  return c;
}

CovarianceModel cov_high_aniso(int dim, double decades, RngStream& rng) {
  if (dim < 2) throw std::invalid_argument("cov_high_aniso: dim must be >= 2");
  MatrixXd v = haar_row_orthonormal(dim, dim, rng).transpose();
  VectorXd vals(dim);
  for (int i = 0; i < dim; ++i)
    vals[i] = std::pow(10.0, decades * static_cast<double>(i) / (dim - 1));
  CovarianceModel c;
  c.eigenvectors = v;
  c.eigenvalues = vals;
  c.matrix = sym(v * vals.asDiagonal() * v.transpose());
  c.sqrt = sym(v * vals.cwiseSqrt().asDiagonal() * v.transpose());
  c.recipe = "high_aniso";
  return c;
}

CovarianceModel cov_two_point(int dim, double eps) {
  if (dim % 2 != 0) throw std::invalid_argument("cov_two_point: dim must be even");
  if (eps < 0.0 || eps >= 1.0)
    throw std::invalid_argument("cov_two_point: eps must be in [0, 1)");
  VectorXd diag(dim);
  const int half = dim / 2;
  for (int i = 0; i < dim; ++i) diag[i] = (i < half) ? 1.0 + eps : 1.0 - eps;
  CovarianceModel c;
  c.matrix = diag.asDiagonal();
  c.sqrt = diag.cwiseSqrt().asDiagonal();
  // ascending eigenvalue order: the 1-eps block comes first
  VectorXd vals(dim);
  MatrixXd vecs = MatrixXd::Zero(dim, dim);
  for (int i = 0; i < half; ++i) {
    vals[i] = 1.0 - eps;
    vecs(half + i, i) = 1.0;
    vals[half + i] = 1.0 + eps;
    vecs(i, half + i) = 1.0;
  }
  c.eigenvalues = vals;
  c.eigenvectors = vecs;
  c.recipe = "two_point";
  return c;
}

Family parse_family(const std::string& name) {
  if (name == "rademacher") return Family::rademacher;
  if (name == "gaussian") return Family::gaussian;
  throw std::invalid_argument("unknown data family: " + name);
}

const char* family_name(Family f) {
  return f == Family::rademacher ? "rademacher" : "gaussian";
}

MatrixXd rotate_head(const MatrixXd& base, RngStream& rng) {
  const int dy = static_cast<int>(base.rows());
  MatrixXd b = gaussian_matrix(dy, dy, rng);
  MatrixXd skew = 0.005 * (b - b.transpose());
  return skew.exp() * base;
}

LinRepInstance make_linrep_instance(int dx, int dy, int k,
                                    CovarianceModel cov_train,
                                    CovarianceModel cov_test,
                                    double noise_train, double noise_test,
                                    Family family, RngStream& rng) {
  if (k > dy || k > dx)
    throw std::invalid_argument("make_linrep_instance: need k <= min(dx, dy)");
  if (cov_train.dim() != dx || cov_test.dim() != dx)
    throw std::invalid_argument("make_linrep_instance: covariance dim mismatch");
  LinRepInstance inst;
  MatrixXd f0 = gaussian_matrix(dy, k, rng);
  inst.F_star_train = rotate_head(f0, rng);
  inst.F_star_test = rotate_head(f0, rng);
  inst.G_star = haar_row_orthonormal(k, dx, rng);
  inst.cov_train = std::move(cov_train);
  inst.cov_test = std::move(cov_test);
  inst.noise_train = noise_train;
  inst.noise_test = noise_test;
  inst.family = family;
  return inst;
}

MatrixXd sample_raw_design(int n, int dx, Family family, RngStream& rng) {
  MatrixXd u(n, dx);
  if (family == Family::rademacher)
    rng.fill_rademacher(u.data(), static_cast<std::size_t>(n) * dx);
  else
    rng.fill_gaussian(u.data(), static_cast<std::size_t>(n) * dx);
  return u;
}

Batch sample_linrep_batch(const LinRepInstance& inst, Task task, int n,
                          RngStream& rng) {
  const CovarianceModel& cov =
      (task == Task::train) ? inst.cov_train : inst.cov_test;
  const MatrixXd& f_star =
      (task == Task::train) ? inst.F_star_train : inst.F_star_test;
  const double noise_sd =
      (task == Task::train) ? inst.noise_train : inst.noise_test;
  Batch b;
  MatrixXd u = sample_raw_design(n, cov.dim(), inst.family, rng);
  b.X.noalias() = u * cov.sqrt;
  b.Y.noalias() = b.X * inst.G_star.transpose() * f_star.transpose();
  if (noise_sd > 0.0) {
    MatrixXd e = gaussian_matrix(n, static_cast<int>(f_star.rows()), rng);
    b.Y += noise_sd * e;
  }
  return b;
}

SingleIndexInstance make_single_index_instance(CovarianceModel cov,
                                               Activation teacher,
                                               double noise_sd,
                                               RngStream& rng) {
  SingleIndexInstance inst;
  const int dx = cov.dim();
  inst.beta_star = gaussian_matrix(dx, 1, rng) / std::sqrt(double(dx));
  inst.cov = std::move(cov);
  inst.teacher = teacher;
  inst.noise_sd = noise_sd;
  return inst;
}

SingleIndexBatch sample_single_index_batch(const SingleIndexInstance& inst,
                                           int n, RngStream& rng) {
  SingleIndexBatch b;
  MatrixXd u = gaussian_matrix(n, inst.cov.dim(), rng);
  b.X.noalias() = u * inst.cov.sqrt;
  VectorXd z = b.X * inst.beta_star;
  b.y = z.unaryExpr([&](double v) { return inst.teacher.f(v); });
  if (inst.noise_sd > 0.0)
    b.y += inst.noise_sd * gaussian_matrix(n, 1, rng);
  return b;
}

MatrixXd haar_row_orthonormal(int k, int dx, RngStream& rng) {
  return ortho_rows(gaussian_matrix(k, dx, rng));
}

MatrixXd perturbed_subspace(const MatrixXd& G_star, double dist,
                            RngStream& rng) {
  if (dist < 0.0 || dist > 1.0)
    throw std::invalid_argument("perturbed_subspace: dist must be in [0, 1]");
  const int k = static_cast<int>(G_star.rows());
  const int dx = static_cast<int>(G_star.cols());
  if (2 * k > dx)
    throw std::invalid_argument("perturbed_subspace: need 2k <= dx");
  MatrixXd w = gaussian_matrix(k, dx, rng);
  w -= (w * G_star.transpose()) * G_star;
  w = ortho_rows(w);
  const double c = std::sqrt(1.0 - dist * dist);
  return c * G_star + dist * w;
}

}  // namespace kf
