#pragma once

#include <Eigen/Dense>
#include <string>

#include "kronfeat/activation.hpp"
#include "kronfeat/rng.hpp"

namespace kf {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct CovarianceModel {
  MatrixXd matrix;        // dx x dx, symmetric psd
  MatrixXd sqrt;          // symmetric psd square root
  MatrixXd eigenvectors;  // columns, matching `eigenvalues`
  VectorXd eigenvalues;   // ascending
  std::string recipe;
  int floored = 0;  // eigenvalues lifted to the spectrum floor

  int dim() const { return static_cast<int>(matrix.rows()); }
  double condition_number() const {
    return eigenvalues[eigenvalues.size() - 1] / eigenvalues[0];
  }
};

CovarianceModel cov_identity(int dim);
// 0.5 (E + E^T) with E = 5 I + N, N iid standard normal; the symmetrized
// matrix can be indefinite, so eigenvalues are floored at 1e-3 and the
// number lifted is recorded
CovarianceModel cov_low_aniso(int dim, RngStream& rng);
// V diag(logspace(0, decades, dim)) V^T with V Haar orthogonal
CovarianceModel cov_high_aniso(int dim, double decades, RngStream& rng);
// diag: first half 1+eps, second half 1-eps (dim must be even)
CovarianceModel cov_two_point(int dim, double eps);

enum class Family { rademacher, gaussian };
Family parse_family(const std::string& name);
const char* family_name(Family f);

struct Batch {
  MatrixXd X;  // n x dx
  MatrixXd Y;  // n x dy
  int n() const { return static_cast<int>(X.rows()); }
};

struct LinRepInstance {
  MatrixXd G_star;        // k x dx, row-orthonormal
  MatrixXd F_star_train;  // dy x k
  MatrixXd F_star_test;   // same singular values as F_star_train
  CovarianceModel cov_train;
  CovarianceModel cov_test;
  double noise_train = 0.0;
  double noise_test = 0.0;
  Family family = Family::gaussian;
};

// exp(0.005 (B - B^T)) base with B iid standard normal: a small random
// rotation, so rotated heads share singular values with the base.
MatrixXd rotate_head(const MatrixXd& base, RngStream& rng);

// Draw order: F0, B_train, B_test, G_star. The two task heads are
// rotate_head(F0) for independent B, so they share singular values.
LinRepInstance make_linrep_instance(int dx, int dy, int k,
                                    CovarianceModel cov_train,
                                    CovarianceModel cov_test,
                                    double noise_train, double noise_test,
                                    Family family, RngStream& rng);

// raw pre-covariance design: iid signs or standard normals
MatrixXd sample_raw_design(int n, int dx, Family family, RngStream& rng);

enum class Task { train, test };

// X = U S with S the covariance square root; Y = X G*^T F*^T + noise.
// Draw order: U, then the noise matrix.
Batch sample_linrep_batch(const LinRepInstance& inst, Task task, int n,
                          RngStream& rng);

struct SingleIndexInstance {
  VectorXd beta_star;  // N(0, I/dx)
  CovarianceModel cov;
  Activation teacher;
  double noise_sd = 0.0;
};

SingleIndexInstance make_single_index_instance(CovarianceModel cov,
                                               Activation teacher,
                                               double noise_sd, RngStream& rng);

struct SingleIndexBatch {
  MatrixXd X;  // n x dx, gaussian with the instance covariance
  VectorXd y;
};

SingleIndexBatch sample_single_index_batch(const SingleIndexInstance& inst,
                                           int n, RngStream& rng);

// Haar-uniform row-orthonormal matrix (QR of a gaussian, positive R diagonal)
MatrixXd haar_row_orthonormal(int k, int dx, RngStream& rng);

// Row-orthonormal G at prescribed subspace distance `dist` from G_star:
// cos(theta) G_star + sin(theta) W with W orthonormal in the complement.
MatrixXd perturbed_subspace(const MatrixXd& G_star, double dist,
                            RngStream& rng);

MatrixXd gaussian_matrix(int rows, int cols, RngStream& rng);

}  // namespace kf
