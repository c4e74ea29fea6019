#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "kronfeat/synth_data.hpp"
#include "kronfeat/two_layer.hpp"

namespace kf {

// One benchmarked update rule for the alternating two-layer template:
// representation step, row orthonormalization, then head step.
//   sgd            plain gradient on both layers
//   amgd           plain gradient on G, exact least-squares head (eta_F = 1)
//   dfw            input-whitened G step (Q = X^T X / n), least-squares head
//   kfac           P = F^T F and Q = X^T X / n on the G step, least-squares head
//   adam           bias-corrected diagonal rule on both layers
//   ngd_full       per-layer Gauss-Newton blocks solved densely, no factoring
//   amgd_batchnorm amgd on per-batch whitened inputs (the caller whitens;
//                  the update math is identical to amgd)
struct LinRepMethod {
  enum class Name { sgd, amgd, dfw, kfac, adam, ngd_full, amgd_batchnorm };
  Name name = Name::kfac;
  double eta_G = 1e-2;
  double eta_F = 1.0;
  double lambda_G = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  // canonical hyperparameters for a name at a given base learning rate
  static LinRepMethod make(Name name, double lr);
  static Name parse_name(const std::string& s);
  const char* str() const;
};

struct OptimizerState {
  MatrixXd mG, vG, mF, vF;  // adam moments
  long long t = 0;
};

struct StepOutcome {
  bool diverged = false;     // update produced non-finite values; rolled back
  bool head_ridged = false;  // head solve needed a ridge fallback
};

// operator-norm distance || G Pi_perp || between row spans
double subspace_distance(const MatrixXd& G, const MatrixXd& G_star);

// G half of the update: G <- Ortho(G - eta_G P^-1 grad_G (Q + lam I)^-1)
StepOutcome update_representation(TwoLayerNet& net, const LinRepMethod& m,
                                  OptimizerState& st, const Batch& batch);

// F half, evaluated at the current (already updated) G:
// F <- F - eta_F grad_F Q_F^-1, which for eta_F = 1 is the exact
// least-squares head and for eta_F in (0,1) its EMA
StepOutcome update_head(TwoLayerNet& net, const LinRepMethod& m,
                        OptimizerState& st, const Batch& batch);

// full step in template order: representation first, then head
StepOutcome step(TwoLayerNet& net, const LinRepMethod& m, OptimizerState& st,
                 const Batch& batch_G, const Batch& batch_F);

// closed-form least-squares head Y^T Z (Z^T Z)^-1, Z = sigma(X G^T)
MatrixXd fit_head_ls(const MatrixXd& G, const Batch& batch,
                     const Activation& act = Activation(),
                     bool* ridged = nullptr);

// per-batch standardization: x -> Shat^-1/2 (x - mean); labels untouched
Batch batchnorm_transform(const Batch& batch, int* floored = nullptr);

// Transfer evaluation: refit the head on a test-task batch, then estimate
// the population loss on an eval batch given as a raw design U (x = U S)
// and standard-normal noise E, so X_eval is never materialized.
struct TransferResult {
  MatrixXd F_ls;
  double loss = 0.0;
  bool ridged = false;
};
TransferResult evaluate_transfer(const MatrixXd& G_hat,
                                 const LinRepInstance& inst,
                                 const Batch& fit_batch, const MatrixXd& U_eval,
                                 const MatrixXd& E_eval);

// Population lower-bound dynamics for the two-direction construction:
// c1 <- c1 (1 + eta lam c2^2), c2 <- c2 (1 - eta lam c1^2), renormalized;
// returns |c2| for t = 0..T. Requires lam in (0, 1/5] and
// 0 < eta <= 4 / (1 - lam).
std::vector<double> lower_bound_trajectory(double lambda, double eta,
                                           double eps0, int T);

// envelope rate 1 - 4 lam / (1 - lam)
double lower_bound_envelope(double lambda);

// one multi-task round: per-task least-squares heads first, then a shared
// representation step preconditioned by the task-averaged P = mean F^T F
// and per-task input covariances
struct MultitaskBatches {
  Batch head;
  Batch rep;
};
StepOutcome multitask_step(std::vector<MatrixXd>& heads, MatrixXd& G,
                           const std::vector<MultitaskBatches>& batches,
                           double eta_G, double lambda_G);

// naive baseline: per-task heads, unpreconditioned task-averaged G step
StepOutcome multitask_sgd_step(std::vector<MatrixXd>& heads, MatrixXd& G,
                               const std::vector<MultitaskBatches>& batches,
                               double eta_G);

}  // namespace kf
