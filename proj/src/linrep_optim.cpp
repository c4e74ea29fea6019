#include "kronfeat/linrep_optim.hpp"

#include <cmath>
#include <stdexcept>

#include "kronfeat/linalg.hpp"

namespace kf {

LinRepMethod LinRepMethod::make(Name name, double lr) {
  LinRepMethod m;
  m.name = name;
  m.eta_G = lr;
  switch (name) {
    case Name::sgd:
    case Name::adam:
    case Name::ngd_full:
      m.eta_F = lr;
      break;
    case Name::amgd:
    case Name::dfw:
    case Name::kfac:
    case Name::amgd_batchnorm:
      m.eta_F = 1.0;
      break;
  }
  return m;
}

LinRepMethod::Name LinRepMethod::parse_name(const std::string& s) {
  if (s == "sgd") return Name::sgd;
  if (s == "amgd") return Name::amgd;
  if (s == "dfw") return Name::dfw;
  if (s == "kfac") return Name::kfac;
  if (s == "adam") return Name::adam;
  if (s == "ngd_full") return Name::ngd_full;
  if (s == "amgd_batchnorm") return Name::amgd_batchnorm;
  throw std::invalid_argument("unknown method: " + s);
}

const char* LinRepMethod::str() const {
  switch (name) {
    case Name::sgd: return "sgd";
    case Name::amgd: return "amgd";
    case Name::dfw: return "dfw";
    case Name::kfac: return "kfac";
    case Name::adam: return "adam";
    case Name::ngd_full: return "ngd_full";
    case Name::amgd_batchnorm: return "amgd_batchnorm";
  }
  return "?";
}

double subspace_distance(const MatrixXd& G, const MatrixXd& G_star) {
  if (G.rows() != G_star.rows() || G.cols() != G_star.cols())
    throw std::invalid_argument("subspace_distance: shape mismatch");
  auto check_rows = [](const MatrixXd& m, const char* which) {
    MatrixXd gram = m * m.transpose();
    gram.diagonal().array() -= 1.0;
    if (gram.cwiseAbs().maxCoeff() > 1e-8)
      throw std::invalid_argument(std::string("subspace_distance: ") + which +
                                  " is not row-orthonormal");
  };
  check_rows(G, "G");
  check_rows(G_star, "G_star");
  MatrixXd residual = G - (G * G_star.transpose()) * G_star;
  return operator_norm(residual);
}

namespace {

MatrixXd sample_cov(const MatrixXd& x) {
  const int d = static_cast<int>(x.cols());
  MatrixXd q = MatrixXd::Zero(d, d);
  q.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose(), 1.0 / x.rows());
  q.triangularView<Eigen::Upper>() = q.transpose();
  return q;
}

// right-solve with a one-shot ridge retry; flags when the ridge was needed
MatrixXd solve_right_ridged(const MatrixXd& b, const MatrixXd& a,
                            double rel_ridge, bool* ridged) {
  Eigen::LDLT<MatrixXd> ldlt(a);
  if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
    MatrixXd out = ldlt.solve(b.transpose()).transpose();
    if (out.allFinite()) return out;
  }
  if (ridged) *ridged = true;
  const double ridge = rel_ridge * a.trace() / a.rows();
  MatrixXd ar = a;
  ar.diagonal().array() += ridge;
  Eigen::LDLT<MatrixXd> retry(ar);
  if (retry.info() != Eigen::Success)
    throw std::runtime_error("head solve failed even with ridge");
  return retry.solve(b.transpose()).transpose();
}

MatrixXd adam_direction(MatrixXd& m, MatrixXd& v, const MatrixXd& g,
                        long long t, double b1, double b2, double eps) {
  if (m.size() == 0) {
    m = MatrixXd::Zero(g.rows(), g.cols());
    v = MatrixXd::Zero(g.rows(), g.cols());
  }
  m = b1 * m + (1.0 - b1) * g;
  v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
  Eigen::ArrayXXd mhat = m.array() / bc1;
  Eigen::ArrayXXd vhat = v.array() / bc2;
  return (mhat / (vhat.sqrt() + eps)).matrix();
}

// dense per-layer Gauss-Newton solve: (kron(Q, P) + ridge I)^-1 vec(grad),
// ridge = 1e-8 tr / dim
MatrixXd dense_block_solve(const MatrixXd& grad, const MatrixXd& q,
                           const MatrixXd& p) {
  MatrixXd fisher = kron(q, p);
  const double ridge = 1e-8 * fisher.trace() / fisher.rows();
  fisher.diagonal().array() += ridge;
  Eigen::LLT<MatrixXd> llt(fisher);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("ngd_full: block solve failed");
  VectorXd x = llt.solve(vec(grad));
  return unvec(x, static_cast<int>(grad.rows()), static_cast<int>(grad.cols()));
}

}  // namespace

StepOutcome update_representation(TwoLayerNet& net, const LinRepMethod& m,
                                  OptimizerState& st, const Batch& batch) {
  StepOutcome out;
  MatrixXd g = grad_G(net, batch);
  MatrixXd dir;
  try {
    switch (m.name) {
      case LinRepMethod::Name::sgd:
      case LinRepMethod::Name::amgd:
      case LinRepMethod::Name::amgd_batchnorm:
        dir = g;
        break;
      case LinRepMethod::Name::dfw: {
        MatrixXd q = sample_cov(batch.X);
        q.diagonal().array() += m.lambda_G;
        dir = solve_spd_right(g, q);
        break;
      }
      case LinRepMethod::Name::kfac: {
        MatrixXd q = sample_cov(batch.X);
        q.diagonal().array() += m.lambda_G;
        MatrixXd p = net.F.transpose() * net.F;
        dir = solve_spd_left(p, solve_spd_right(g, q));
        break;
      }
      case LinRepMethod::Name::adam: {
        st.t += 1;
        dir = adam_direction(st.mG, st.vG, g, st.t, m.adam_beta1, m.adam_beta2,
                             m.adam_eps);
        break;
      }
      case LinRepMethod::Name::ngd_full: {
        MatrixXd q = sample_cov(batch.X);
        MatrixXd p = net.F.transpose() * net.F;
        dir = dense_block_solve(g, q, p);
        break;
      }
    }
    MatrixXd candidate = net.G - m.eta_G * dir;
    if (!candidate.allFinite()) {
      out.diverged = true;
      return out;
    }
    net.G = ortho_rows(candidate);
  } catch (const std::runtime_error&) {
    out.diverged = true;
  }
  return out;
}

StepOutcome update_head(TwoLayerNet& net, const LinRepMethod& m,
                        OptimizerState& st, const Batch& batch) {
  StepOutcome out;
  MatrixXd candidate;
  try {
    switch (m.name) {
      case LinRepMethod::Name::sgd:
        candidate = net.F - m.eta_F * grad_F(net, batch);
        break;
      case LinRepMethod::Name::adam:
        candidate = net.F - m.eta_F * adam_direction(st.mF, st.vF,
                                                     grad_F(net, batch), st.t,
                                                     m.adam_beta1, m.adam_beta2,
                                                     m.adam_eps);
        break;
      case LinRepMethod::Name::ngd_full: {
        MatrixXd z = net.act.apply(batch.X * net.G.transpose());
        MatrixXd qf = sample_cov(z);
        MatrixXd dir = dense_block_solve(
            grad_F(net, batch), qf,
            MatrixXd::Identity(net.F.rows(), net.F.rows()));
        candidate = net.F - m.eta_F * dir;
        break;
      }
      default: {
        // amgd, dfw, kfac, amgd_batchnorm: F - eta_F grad Q_F^-1, computed
        // in its equivalent interpolation form toward the least-squares
        // head so eta_F = 1 lands on it exactly
        MatrixXd f_ls = fit_head_ls(net.G, batch, net.act, &out.head_ridged);
        candidate = m.eta_F == 1.0
                        ? f_ls
                        : MatrixXd((1.0 - m.eta_F) * net.F + m.eta_F * f_ls);
        break;
      }
    }
  } catch (const std::runtime_error&) {
    out.diverged = true;
    return out;
  }
  if (!candidate.allFinite()) {
    out.diverged = true;
    return out;
  }
  net.F = candidate;
  return out;
}

StepOutcome step(TwoLayerNet& net, const LinRepMethod& m, OptimizerState& st,
                 const Batch& batch_G, const Batch& batch_F) {
  TwoLayerNet saved = net;
  StepOutcome a = update_representation(net, m, st, batch_G);
  if (a.diverged) {
    net = saved;
    return a;
  }
  StepOutcome b = update_head(net, m, st, batch_F);
  if (b.diverged) {
    net = saved;
    return b;
  }
  b.head_ridged = b.head_ridged || a.head_ridged;
  return b;
}

MatrixXd fit_head_ls(const MatrixXd& G, const Batch& batch,
                     const Activation& act, bool* ridged) {
  MatrixXd z = act.apply(batch.X * G.transpose());
  MatrixXd ztz = z.transpose() * z;
  MatrixXd zty = z.transpose() * batch.Y;
  bool flag = false;
  MatrixXd f = solve_right_ridged(zty.transpose(), ztz, 1e-10, &flag);
  if (ridged) *ridged = flag;
  return f;
}

Batch batchnorm_transform(const Batch& batch, int* floored) {
  const int n = batch.n();
  const int dx = static_cast<int>(batch.X.cols());
  Batch out;
  Eigen::RowVectorXd mean = batch.X.colwise().mean();
  MatrixXd xc = batch.X.rowwise() - mean;
  MatrixXd c = sample_cov(xc);
  PsdEig e = psd_eig(c);
  const double floor = 1e-8 * c.trace() / dx;
  int lifted = 0;
  VectorXd inv(dx);
  for (int i = 0; i < dx; ++i) {
    double v = e.values[i];
    if (v < floor) {
      v = floor;
      ++lifted;
    }
    inv[i] = 1.0 / std::sqrt(v);
  }
  if (floored) *floored = lifted;
  MatrixXd w = e.vectors * inv.asDiagonal() * e.vectors.transpose();
  out.X.noalias() = xc * w;
  out.Y = batch.Y;
  (void)n;
  return out;
}

TransferResult evaluate_transfer(const MatrixXd& G_hat,
                                 const LinRepInstance& inst,
                                 const Batch& fit_batch, const MatrixXd& U_eval,
                                 const MatrixXd& E_eval) {
  TransferResult r;
  r.F_ls = fit_head_ls(G_hat, fit_batch, Activation(), &r.ridged);
  MatrixXd w_hat = r.F_ls * G_hat;                     // dy x dx
  MatrixXd w_star = inst.F_star_test * inst.G_star;    // dy x dx
  MatrixXd delta = inst.cov_test.sqrt * (w_hat - w_star).transpose();
  MatrixXd resid = U_eval * delta;
  if (inst.noise_test > 0.0) resid -= inst.noise_test * E_eval;
  r.loss = resid.squaredNorm() / (2.0 * U_eval.rows());
  return r;
}

double lower_bound_envelope(double lambda) {
  return 1.0 - 4.0 * lambda / (1.0 - lambda);
}

std::vector<double> lower_bound_trajectory(double lambda, double eta,
                                           double eps0, int T) {
  if (!(lambda > 0.0) || lambda > 0.2)
    throw std::invalid_argument("lower_bound_trajectory: lambda in (0, 1/5]");
  if (!(eta > 0.0) || eta > 4.0 / (1.0 - lambda) + 1e-12)
    throw std::invalid_argument("lower_bound_trajectory: eta in (0, 4/(1-lambda)]");
  if (eps0 < 0.0 || eps0 >= 1.0)
    throw std::invalid_argument("lower_bound_trajectory: eps0 in [0, 1)");
  std::vector<double> dist(static_cast<std::size_t>(T) + 1);
  double c2 = eps0;
  double c1 = std::sqrt(1.0 - eps0 * eps0);
  dist[0] = std::abs(c2);
  const double w = eta * lambda;
  for (int t = 1; t <= T; ++t) {
    const double a = c1 * (1.0 + w * c2 * c2);
    const double b = c2 * (1.0 - w * c1 * c1);
    const double r = std::sqrt(a * a + b * b);
    c1 = a / r;
    c2 = b / r;
    dist[static_cast<std::size_t>(t)] = std::abs(c2);
  }
  return dist;
}

StepOutcome multitask_step(std::vector<MatrixXd>& heads, MatrixXd& G,
                           const std::vector<MultitaskBatches>& batches,
                           double eta_G, double lambda_G) {
  StepOutcome out;
  const std::size_t tasks = heads.size();
  if (batches.size() != tasks)
    throw std::invalid_argument("multitask_step: batch/head count mismatch");
  if (tasks == 0) throw std::invalid_argument("multitask_step: no tasks");
  const int k = static_cast<int>(G.rows());
  std::vector<MatrixXd> new_heads(tasks);
  MatrixXd dbar = MatrixXd::Zero(k, G.cols());
  MatrixXd p = MatrixXd::Zero(k, k);
  try {
    for (std::size_t t = 0; t < tasks; ++t) {
      TwoLayerNet net{heads[t], G, Activation()};
      MatrixXd z = batches[t].head.X * G.transpose();
      MatrixXd qf = sample_cov(z);
      MatrixXd gf = grad_F(net, batches[t].head);
      bool ridged = false;
      new_heads[t] = heads[t] - solve_right_ridged(gf, qf, 1e-10, &ridged);
      out.head_ridged = out.head_ridged || ridged;

      TwoLayerNet updated{new_heads[t], G, Activation()};
      MatrixXd gg = grad_G(updated, batches[t].rep);
      MatrixXd q = sample_cov(batches[t].rep.X);
      q.diagonal().array() += lambda_G;
      dbar += solve_spd_right(gg, q);
      p += new_heads[t].transpose() * new_heads[t];
    }
    dbar /= static_cast<double>(tasks);
    p /= static_cast<double>(tasks);
    MatrixXd candidate = G - eta_G * solve_spd_left(p, dbar);
    if (!candidate.allFinite()) {
      out.diverged = true;
      return out;
    }
    G = ortho_rows(candidate);
    heads = std::move(new_heads);
  } catch (const std::runtime_error&) {
    out.diverged = true;
  }
  return out;
}

StepOutcome multitask_sgd_step(std::vector<MatrixXd>& heads, MatrixXd& G,
                               const std::vector<MultitaskBatches>& batches,
                               double eta_G) {
  StepOutcome out;
  const std::size_t tasks = heads.size();
  if (batches.size() != tasks)
    throw std::invalid_argument("multitask_sgd_step: batch/head count mismatch");
  if (tasks == 0) throw std::invalid_argument("multitask_sgd_step: no tasks");
  const int k = static_cast<int>(G.rows());
  std::vector<MatrixXd> new_heads(tasks);
  MatrixXd dbar = MatrixXd::Zero(k, G.cols());
  try {
    for (std::size_t t = 0; t < tasks; ++t) {
      TwoLayerNet net{heads[t], G, Activation()};
      MatrixXd z = batches[t].head.X * G.transpose();
      MatrixXd qf = sample_cov(z);
      MatrixXd gf = grad_F(net, batches[t].head);
      bool ridged = false;
      new_heads[t] = heads[t] - solve_right_ridged(gf, qf, 1e-10, &ridged);
      out.head_ridged = out.head_ridged || ridged;

      TwoLayerNet updated{new_heads[t], G, Activation()};
      dbar += grad_G(updated, batches[t].rep);
    }
    dbar /= static_cast<double>(tasks);
    MatrixXd candidate = G - eta_G * dbar;
    if (!candidate.allFinite()) {
      out.diverged = true;
      return out;
    }
    G = ortho_rows(candidate);
    heads = std::move(new_heads);
  } catch (const std::runtime_error&) {
    out.diverged = true;
  }
  return out;
}

}  // namespace kf
