#include "kronfeat/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "kronfeat/csv.hpp"
#include "kronfeat/rmt_theory.hpp"
#include "kronfeat/single_index.hpp"
#include "kronfeat/svg_plot.hpp"
#include "kronfeat/two_layer.hpp"

namespace kf {

using nlohmann::json;

namespace {

// ------------------------------------------------------------------ config

void check_keys(const json& obj, const std::vector<std::string>& allowed,
                const std::string& where) {
  if (!obj.is_object())
    throw std::invalid_argument("config: expected an object at " + where);
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw std::invalid_argument("config: unknown key \"" + it.key() +
                                  "\" in " + where);
}

const json& require(const json& obj, const std::string& key,
                    const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end())
    throw std::invalid_argument("config: missing key \"" + key + "\" in " +
                                where);
  return *it;
}

double get_double(const json& obj, const std::string& key,
                  const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_number())
    throw std::invalid_argument("config: \"" + key + "\" in " + where +
                                " must be a number");
  return v.get<double>();
}

double get_double_or(const json& obj, const std::string& key, double fallback,
                     const std::string& where) {
  return obj.contains(key) ? get_double(obj, key, where) : fallback;
}

int get_int(const json& obj, const std::string& key, const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_number_integer())
    throw std::invalid_argument("config: \"" + key + "\" in " + where +
                                " must be an integer");
  return v.get<int>();
}

int get_int_or(const json& obj, const std::string& key, int fallback,
               const std::string& where) {
  return obj.contains(key) ? get_int(obj, key, where) : fallback;
}

std::string get_string(const json& obj, const std::string& key,
                       const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_string())
    throw std::invalid_argument("config: \"" + key + "\" in " + where +
                                " must be a string");
  return v.get<std::string>();
}

std::vector<double> get_double_array(const json& obj, const std::string& key,
                                     const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_array() || v.empty())
    throw std::invalid_argument("config: \"" + key + "\" in " + where +
                                " must be a nonempty array");
  std::vector<double> out;
  for (const auto& e : v) {
    if (!e.is_number())
      throw std::invalid_argument("config: \"" + key + "\" in " + where +
                                  " must contain numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

CovRecipe parse_recipe(const json& obj, const std::string& where) {
  CovRecipe r;
  std::string kind = get_string(obj, "kind", where);
  if (kind == "identity") {
    check_keys(obj, {"kind"}, where);
    r.kind = CovRecipe::Kind::identity;
  } else if (kind == "low_aniso") {
    check_keys(obj, {"kind"}, where);
    r.kind = CovRecipe::Kind::low_aniso;
  } else if (kind == "high_aniso") {
    check_keys(obj, {"kind", "decades"}, where);
    r.kind = CovRecipe::Kind::high_aniso;
    r.decades = get_double_or(obj, "decades", 5.0, where);
  } else if (kind == "two_point") {
    check_keys(obj, {"kind", "eps"}, where);
    r.kind = CovRecipe::Kind::two_point;
    r.eps = get_double(obj, "eps", where);
  } else {
    throw std::invalid_argument("config: unknown covariance kind \"" + kind +
                                "\" in " + where);
  }
  return r;
}

json recipe_to_json(const CovRecipe& r) {
  switch (r.kind) {
    case CovRecipe::Kind::identity: return {{"kind", "identity"}};
    case CovRecipe::Kind::low_aniso: return {{"kind", "low_aniso"}};
    case CovRecipe::Kind::high_aniso:
      return {{"kind", "high_aniso"}, {"decades", r.decades}};
    case CovRecipe::Kind::two_point:
      return {{"kind", "two_point"}, {"eps", r.eps}};
  }
  throw std::logic_error("recipe_to_json");
}

std::vector<MethodSpec> parse_methods(const json& arr, bool allow_lr,
                                      const std::string& where) {
  if (!arr.is_array() || arr.empty())
    throw std::invalid_argument("config: \"methods\" in " + where +
                                " must be a nonempty array");
  std::vector<MethodSpec> out;
  std::set<std::string> seen;
  for (const auto& e : arr) {
    std::string name = get_string(e, "name", where + ".methods[]");
    if (!seen.insert(name).second)
      throw std::invalid_argument("config: duplicate method \"" + name + "\"");
    if (allow_lr)
      check_keys(e, {"name", "lr", "lambda_G"}, where + ".methods[]");
    else
      check_keys(e, {"name", "lambda_G"}, where + ".methods[]");
    MethodSpec m;
    m.name = LinRepMethod::parse_name(name);
    double default_lr = m.name == LinRepMethod::Name::ngd_full ? 1e-4 : 1e-2;
    m.lr = allow_lr ? get_double_or(e, "lr", default_lr, where) : default_lr;
    m.lambda_G = get_double_or(e, "lambda_G", 0.0, where);
    out.push_back(m);
  }
  return out;
}

// single_head: one dy x k head must have rank k, so k <= min(dx, dy);
// the multitask preconditioner only needs the task-averaged head rank,
// checked separately against tasks * dy
void parse_linrep_instance_keys(const json& top, LinRepSection& L,
                                const std::string& where, bool single_head) {
  L.dx = get_int(top, "dx", where);
  L.dy = get_int(top, "dy", where);
  L.k = get_int(top, "k", where);
  L.n = get_int(top, "n", where);
  if (L.dx <= 0 || L.dy <= 0 || L.k <= 0 || L.n <= 0)
    throw std::invalid_argument("config: dims must be positive");
  if (L.k > L.dx) throw std::invalid_argument("config: need k <= dx");
  if (single_head && L.k > L.dy)
    throw std::invalid_argument("config: need k <= min(dx, dy)");
  L.noise_train = get_double(top, "noise_train", where);
  L.noise_test = get_double(top, "noise_test", where);
  L.family = parse_family(get_string(top, "family", where));
  L.cov_train = parse_recipe(require(top, "cov_train", where), "cov_train");
  L.cov_test = parse_recipe(require(top, "cov_test", where), "cov_test");
  L.iterations = get_int(top, "iterations", where);
  if (L.iterations < 0)
    throw std::invalid_argument("config: iterations must be >= 0");
}

// ------------------------------------------------------------------ output

std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

struct MethodTrace {
  // per-iteration sums over trials
  std::vector<double> loss, dist, transfer, diverged;
};

void write_traces(const ExperimentConfig& cfg,
                  const std::vector<std::string>& names,
                  const std::vector<MethodTrace>& agg, int T, RunRecord& rec) {
  const double inv = 1.0 / cfg.trials;
  for (std::size_t m = 0; m < names.size(); ++m) {
    std::string fname = "trace_" + names[m] + ".csv";
    CsvWriter csv(join_path(cfg.out_dir, fname));
    csv.header({"iter", "train_loss", "subspace_dist", "transfer_loss",
                "diverged"});
    for (int t = 0; t <= T; ++t)
      csv.row({CsvWriter::cell(t), CsvWriter::cell(agg[m].loss[t] * inv),
               CsvWriter::cell(agg[m].dist[t] * inv),
               CsvWriter::cell(agg[m].transfer[t] * inv),
               CsvWriter::cell(agg[m].diverged[t] * inv)});
    rec.files.push_back(fname);
  }
  CsvWriter sum(join_path(cfg.out_dir, "summary.csv"));
  sum.header({"method", "final_train_loss", "final_subspace_dist",
              "final_transfer_loss", "diverged_fraction"});
  for (std::size_t m = 0; m < names.size(); ++m)
    sum.row({names[m], CsvWriter::cell(agg[m].loss[T] * inv),
             CsvWriter::cell(agg[m].dist[T] * inv),
             CsvWriter::cell(agg[m].transfer[T] * inv),
             CsvWriter::cell(agg[m].diverged[T] * inv)});
  rec.files.push_back("summary.csv");

  if (cfg.svg) {
    std::vector<double> iters(static_cast<std::size_t>(T) + 1);
    for (int t = 0; t <= T; ++t) iters[static_cast<std::size_t>(t)] = t;
    auto plot = [&](const std::string& stem, const std::string& ylabel,
                    auto field) {
      std::vector<PlotSeries> series;
      for (std::size_t m = 0; m < names.size(); ++m) {
        PlotSeries s;
        s.label = names[m];
        s.x = iters;
        for (double v : field(agg[m])) s.y.push_back(v * inv);
        series.push_back(std::move(s));
      }
      PlotSpec spec;
      spec.title = ylabel;
      spec.xlabel = "iteration";
      spec.ylabel = ylabel;
      spec.log_y = true;
      std::string fname = stem + ".svg";
      write_svg_plot(join_path(cfg.out_dir, fname), spec, series);
      rec.files.push_back(fname);
    };
    plot("train_loss", "train loss",
         [](const MethodTrace& a) -> const std::vector<double>& { return a.loss; });
    plot("subspace_dist", "subspace distance",
         [](const MethodTrace& a) -> const std::vector<double>& { return a.dist; });
    plot("transfer_loss", "transfer loss",
         [](const MethodTrace& a) -> const std::vector<double>& { return a.transfer; });
  }
}

// ------------------------------------------------------- linrep trace runs

struct TrialStreams {
  RngStream instance, init, data, fit, eval;
  explicit TrialStreams(std::uint64_t seed)
      : instance(seed, 0), init(seed, 1), data(seed, 2), fit(seed, 3),
        eval(seed, 4) {}
};

bool all_finite3(double a, double b, double c) {
  return std::isfinite(a) && std::isfinite(b) && std::isfinite(c);
}

// Idealized batch-norm view for training runs: whiten covariates with the
// exact population covariance (known to the data generator), no centering
// because the covariates are zero-mean by construction. Whitening each batch
// by its own sample covariance instead would make the whitened-view target
// operator jitter from batch to batch, which floors the achievable train
// loss orders of magnitude above the noise level at this label scale.
MatrixXd population_whitener(const CovarianceModel& cov) {
  VectorXd inv = cov.eigenvalues.array().rsqrt();
  return cov.eigenvectors * inv.asDiagonal() * cov.eigenvectors.transpose();
}

Batch whiten_batch(const Batch& b, const MatrixXd& w) {
  Batch out;
  out.X.noalias() = b.X * w;  // w is symmetric
  out.Y = b.Y;
  return out;
}

void run_linrep_traces(const ExperimentConfig& cfg, RunRecord& rec) {
  const LinRepSection& L = cfg.linrep;
  const int T = L.iterations;
  const std::size_t M = L.methods.size();
  std::vector<std::string> names;
  std::vector<LinRepMethod> methods;
  bool any_bn = false;
  for (const MethodSpec& s : L.methods) {
    LinRepMethod m = LinRepMethod::make(s.name, s.lr);
    m.lambda_G = s.lambda_G;
    methods.push_back(m);
    names.push_back(m.str());
    any_bn = any_bn || s.name == LinRepMethod::Name::amgd_batchnorm;
  }
  std::vector<MethodTrace> agg(M);
  for (auto& a : agg) {
    a.loss.assign(T + 1, 0.0);
    a.dist.assign(T + 1, 0.0);
    a.transfer.assign(T + 1, 0.0);
    a.diverged.assign(T + 1, 0.0);
  }

  for (int trial = 0; trial < cfg.trials; ++trial) {
    TrialStreams rs(derive_seed(cfg.base_seed, trial));
    CovarianceModel cov_tr = build_cov(L.cov_train, L.dx, rs.instance);
    CovarianceModel cov_te = build_cov(L.cov_test, L.dx, rs.instance);
    LinRepInstance inst = make_linrep_instance(
        L.dx, L.dy, L.k, std::move(cov_tr), std::move(cov_te), L.noise_train,
        L.noise_test, L.family, rs.instance);
    MatrixXd G0 = haar_row_orthonormal(L.k, L.dx, rs.init);
    MatrixXd F0 =
        gaussian_matrix(L.dy, L.k, rs.init) / std::sqrt(static_cast<double>(L.k));
    Batch fit_batch = sample_linrep_batch(inst, Task::test, L.n, rs.fit);

    std::vector<TwoLayerNet> nets(M, TwoLayerNet{F0, G0, Activation()});
    std::vector<OptimizerState> states(M);
    std::vector<char> frozen(M, 0);
    std::vector<double> last_loss(M), last_dist(M), last_transfer(M);

    MatrixXd W_bn;
    if (any_bn) W_bn = population_whitener(inst.cov_train);
    Batch bG = sample_linrep_batch(inst, Task::train, L.n, rs.data);
    Batch bF = sample_linrep_batch(inst, Task::train, L.n, rs.data);
    Batch bG_white;
    if (any_bn) bG_white = whiten_batch(bG, W_bn);

    auto measure = [&](int row) {
      MatrixXd U_eval = gaussian_matrix(L.eval_n, L.dx, rs.eval);
      MatrixXd E_eval = gaussian_matrix(L.eval_n, L.dy, rs.eval);
      for (std::size_t m = 0; m < M; ++m) {
        if (!frozen[m]) {
          bool bn = methods[m].name == LinRepMethod::Name::amgd_batchnorm;
          double loss = batch_loss(nets[m], bn ? bG_white : bG);
          double dist = subspace_distance(nets[m].G, inst.G_star);
          double transfer =
              evaluate_transfer(nets[m].G, inst, fit_batch, U_eval, E_eval)
                  .loss;
          if (all_finite3(loss, dist, transfer)) {
            last_loss[m] = loss;
            last_dist[m] = dist;
            last_transfer[m] = transfer;
          } else {
            frozen[m] = 1;
          }
        }
        agg[m].loss[row] += last_loss[m];
        agg[m].dist[row] += last_dist[m];
        agg[m].transfer[row] += last_transfer[m];
        agg[m].diverged[row] += frozen[m] ? 1.0 : 0.0;
      }
    };

    // row 0 cannot be frozen: init weights are finite and orthonormal
    measure(0);

    for (int t = 1; t <= T; ++t) {
      Batch bF_white;
      if (any_bn) bF_white = whiten_batch(bF, W_bn);
      for (std::size_t m = 0; m < M; ++m) {
        if (frozen[m]) continue;
        bool bn = methods[m].name == LinRepMethod::Name::amgd_batchnorm;
        StepOutcome out = step(nets[m], methods[m], states[m],
                               bn ? bG_white : bG, bn ? bF_white : bF);
        if (out.diverged) frozen[m] = 1;
      }
      bG = sample_linrep_batch(inst, Task::train, L.n, rs.data);
      bF = sample_linrep_batch(inst, Task::train, L.n, rs.data);
      if (any_bn) bG_white = whiten_batch(bG, W_bn);
      measure(t);
    }
  }
  write_traces(cfg, names, agg, T, rec);
}

void run_lr_sweep(const ExperimentConfig& cfg, RunRecord& rec) {
  const LinRepSection& L = cfg.linrep;
  const int T = L.iterations;
  const std::size_t M = L.methods.size();
  const std::size_t G = L.lr_grid.size();
  bool any_bn = false;
  for (const MethodSpec& s : L.methods)
    any_bn = any_bn || s.name == LinRepMethod::Name::amgd_batchnorm;

  std::vector<std::vector<double>> dist_sum(M, std::vector<double>(G, 0.0));
  std::vector<std::vector<double>> div_sum(M, std::vector<double>(G, 0.0));

  for (int trial = 0; trial < cfg.trials; ++trial) {
    TrialStreams rs(derive_seed(cfg.base_seed, trial));
    CovarianceModel cov_tr = build_cov(L.cov_train, L.dx, rs.instance);
    CovarianceModel cov_te = build_cov(L.cov_test, L.dx, rs.instance);
    LinRepInstance inst = make_linrep_instance(
        L.dx, L.dy, L.k, std::move(cov_tr), std::move(cov_te), L.noise_train,
        L.noise_test, L.family, rs.instance);
    MatrixXd G0 = haar_row_orthonormal(L.k, L.dx, rs.init);
    MatrixXd F0 =
        gaussian_matrix(L.dy, L.k, rs.init) / std::sqrt(static_cast<double>(L.k));

    struct Run {
      TwoLayerNet net;
      OptimizerState st;
      LinRepMethod method;
      bool frozen = false;
    };
    std::vector<Run> runs;
    runs.reserve(M * G);
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t g = 0; g < G; ++g) {
        LinRepMethod method = LinRepMethod::make(L.methods[m].name, L.lr_grid[g]);
        method.lambda_G = L.methods[m].lambda_G;
        runs.push_back(Run{TwoLayerNet{F0, G0, Activation()}, OptimizerState{},
                           method, false});
      }

    MatrixXd W_bn;
    if (any_bn) W_bn = population_whitener(inst.cov_train);
    for (int t = 1; t <= T; ++t) {
      Batch bG = sample_linrep_batch(inst, Task::train, L.n, rs.data);
      Batch bF = sample_linrep_batch(inst, Task::train, L.n, rs.data);
      Batch bG_white, bF_white;
      if (any_bn) {
        bG_white = whiten_batch(bG, W_bn);
        bF_white = whiten_batch(bF, W_bn);
      }
      for (Run& r : runs) {
        if (r.frozen) continue;
        bool bn = r.method.name == LinRepMethod::Name::amgd_batchnorm;
        StepOutcome out =
            step(r.net, r.method, r.st, bn ? bG_white : bG, bn ? bF_white : bF);
        if (out.diverged) r.frozen = true;
      }
    }
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t g = 0; g < G; ++g) {
        Run& r = runs[m * G + g];
        double d = 1.0;
        if (!r.frozen) {
          d = subspace_distance(r.net.G, inst.G_star);
          if (!std::isfinite(d)) {
            d = 1.0;
            r.frozen = true;
          }
        }
        dist_sum[m][g] += d;
        div_sum[m][g] += r.frozen ? 1.0 : 0.0;
      }
  }

  CsvWriter sum(join_path(cfg.out_dir, "summary.csv"));
  sum.header({"method", "lr", "subspace_dist", "diverged_fraction"});
  const double inv = 1.0 / cfg.trials;
  for (std::size_t m = 0; m < M; ++m) {
    LinRepMethod method = LinRepMethod::make(L.methods[m].name, 0.0);
    for (std::size_t g = 0; g < G; ++g)
      sum.row({method.str(), CsvWriter::cell(L.lr_grid[g]),
               CsvWriter::cell(dist_sum[m][g] * inv),
               CsvWriter::cell(div_sum[m][g] * inv)});
  }
  rec.files.push_back("summary.csv");

  if (cfg.svg) {
    std::vector<PlotSeries> series;
    for (std::size_t m = 0; m < M; ++m) {
      PlotSeries s;
      s.label = LinRepMethod::make(L.methods[m].name, 0.0).str();
      s.x = L.lr_grid;
      for (std::size_t g = 0; g < G; ++g) s.y.push_back(dist_sum[m][g] * inv);
      series.push_back(std::move(s));
    }
    PlotSpec spec;
    spec.title = "subspace distance after " + std::to_string(T) + " iterations";
    spec.xlabel = "learning rate";
    spec.ylabel = "subspace distance";
    spec.log_x = true;
    write_svg_plot(join_path(cfg.out_dir, "lr_sweep.svg"), spec, series);
    rec.files.push_back("lr_sweep.svg");
  }
}

void run_multitask(const ExperimentConfig& cfg, RunRecord& rec) {
  const LinRepSection& L = cfg.linrep;
  const int T = L.iterations;
  const int tasks = L.tasks;
  const std::vector<std::string> names = {"multitask_kfac", "multitask_sgd"};
  std::vector<MethodTrace> agg(2);
  for (auto& a : agg) {
    a.loss.assign(T + 1, 0.0);
    a.dist.assign(T + 1, 0.0);
    a.transfer.assign(T + 1, 0.0);
    a.diverged.assign(T + 1, 0.0);
  }

  for (int trial = 0; trial < cfg.trials; ++trial) {
    TrialStreams rs(derive_seed(cfg.base_seed, trial));
    CovarianceModel cov_te = build_cov(L.cov_test, L.dx, rs.instance);
    MatrixXd G_star = haar_row_orthonormal(L.k, L.dx, rs.instance);
    MatrixXd F0 = gaussian_matrix(L.dy, L.k, rs.instance);
    MatrixXd F_test = rotate_head(F0, rs.instance);
    std::vector<CovarianceModel> covs;
    std::vector<MatrixXd> F_stars;
    for (int t = 0; t < tasks; ++t) {
      covs.push_back(build_cov(L.cov_train, L.dx, rs.instance));
      F_stars.push_back(rotate_head(F0, rs.instance));
    }

    // transfer task view shared by both variants
    LinRepInstance transfer_inst;
    transfer_inst.G_star = G_star;
    transfer_inst.F_star_train = F_test;
    transfer_inst.F_star_test = F_test;
    transfer_inst.cov_train = cov_te;
    transfer_inst.cov_test = cov_te;
    transfer_inst.noise_train = L.noise_test;
    transfer_inst.noise_test = L.noise_test;
    transfer_inst.family = L.family;
    Batch fit_batch = sample_linrep_batch(transfer_inst, Task::test, L.n, rs.fit);

    MatrixXd G_init = haar_row_orthonormal(L.k, L.dx, rs.init);
    std::vector<MatrixXd> heads_init;
    for (int t = 0; t < tasks; ++t)
      heads_init.push_back(gaussian_matrix(L.dy, L.k, rs.init) /
                           std::sqrt(static_cast<double>(L.k)));

    struct Variant {
      std::vector<MatrixXd> heads;
      MatrixXd G;
      bool frozen = false;
      double last_loss = 0.0, last_dist = 0.0, last_transfer = 0.0;
    };
    std::vector<Variant> variants(2, Variant{heads_init, G_init});

    auto draw_task_batch = [&](int task) {
      Batch b;
      MatrixXd u = sample_raw_design(L.n, L.dx, L.family, rs.data);
      b.X = u * covs[static_cast<std::size_t>(task)].sqrt;
      b.Y = b.X * G_star.transpose() *
            F_stars[static_cast<std::size_t>(task)].transpose();
      MatrixXd e = gaussian_matrix(L.n, L.dy, rs.data);
      if (L.noise_train > 0.0) b.Y += L.noise_train * e;
      return b;
    };
    auto draw_round = [&]() {
      std::vector<MultitaskBatches> round(static_cast<std::size_t>(tasks));
      for (int t = 0; t < tasks; ++t) {
        round[static_cast<std::size_t>(t)].head = draw_task_batch(t);
        round[static_cast<std::size_t>(t)].rep = draw_task_batch(t);
      }
      return round;
    };

    std::vector<MultitaskBatches> round = draw_round();

    auto measure = [&](int row) {
      MatrixXd U_eval = gaussian_matrix(L.eval_n, L.dx, rs.eval);
      MatrixXd E_eval = gaussian_matrix(L.eval_n, L.dy, rs.eval);
      for (std::size_t v = 0; v < 2; ++v) {
        Variant& var = variants[v];
        if (!var.frozen) {
          double loss = 0.0;
          for (int t = 0; t < tasks; ++t) {
            TwoLayerNet net{var.heads[static_cast<std::size_t>(t)], var.G,
                            Activation()};
            loss += batch_loss(net, round[static_cast<std::size_t>(t)].head);
          }
          loss /= tasks;
          double dist = subspace_distance(var.G, G_star);
          double transfer = evaluate_transfer(var.G, transfer_inst, fit_batch,
                                              U_eval, E_eval)
                                .loss;
          if (all_finite3(loss, dist, transfer)) {
            var.last_loss = loss;
            var.last_dist = dist;
            var.last_transfer = transfer;
          } else {
            var.frozen = true;
          }
        }
        agg[v].loss[row] += var.last_loss;
        agg[v].dist[row] += var.last_dist;
        agg[v].transfer[row] += var.last_transfer;
        agg[v].diverged[row] += var.frozen ? 1.0 : 0.0;
      }
    };

    measure(0);
    for (int t = 1; t <= T; ++t) {
      if (!variants[0].frozen) {
        StepOutcome out = multitask_step(variants[0].heads, variants[0].G,
                                         round, L.lr, L.lambda_G);
        if (out.diverged) variants[0].frozen = true;
      }
      if (!variants[1].frozen) {
        StepOutcome out =
            multitask_sgd_step(variants[1].heads, variants[1].G, round, L.lr);
        if (out.diverged) variants[1].frozen = true;
      }
      round = draw_round();
      measure(t);
    }
  }
  write_traces(cfg, names, agg, T, rec);
}

// ---------------------------------------------------------- single index

void run_single_index(const ExperimentConfig& cfg, RunRecord& rec) {
  const SingleIndexSection& S = cfg.single_index;
  const bool lambda_mode = cfg.kind == ExperimentKind::single_index_lambda;
  const std::vector<double>& grid =
      lambda_mode ? S.lambda_grid : S.epsilon_grid;
  const double phi = static_cast<double>(S.dx) / S.n;

  struct GridPoint {
    double param = 0.0;
    double align_sgd = 0.0, align_kfac = 0.0;
    double theory_sgd = 0.0, theory_kfac = 0.0;
    bool theory_ok = false;
  };
  std::vector<GridPoint> points(grid.size());

  if (lambda_mode) {
    // one dataset per trial, shared by both estimators across the whole grid
    std::vector<double> sgd_sum(grid.size(), 0.0), kfac_sum(grid.size(), 0.0);
    CovarianceModel theory_cov;
    for (int trial = 0; trial < cfg.trials; ++trial) {
      RngStream r_inst(derive_seed(cfg.base_seed, trial), 0);
      RngStream r_data(derive_seed(cfg.base_seed, trial), 2);
      CovarianceModel cov = build_cov(S.cov, S.dx, r_inst);
      SingleIndexInstance inst =
          make_single_index_instance(cov, S.teacher, S.noise, r_inst);
      SingleIndexBatch batch = sample_single_index_batch(inst, S.n, r_data);
      if (trial == 0) theory_cov = inst.cov;

      VectorXd xty = batch.X.transpose() * batch.y / S.n;
      double a_sgd = empirical_alignment(xty, inst.beta_star);
      MatrixXd sigma = MatrixXd::Zero(S.dx, S.dx);
      sigma.selfadjointView<Eigen::Lower>().rankUpdate(batch.X.transpose(),
                                                       1.0 / S.n);
      sigma.triangularView<Eigen::Upper>() = sigma.transpose();
      for (std::size_t g = 0; g < grid.size(); ++g) {
        MatrixXd ridged = sigma;
        ridged.diagonal().array() += grid[g];
        VectorXd beta = Eigen::LDLT<MatrixXd>(ridged).solve(xty);
        sgd_sum[g] += a_sgd;
        kfac_sum[g] += empirical_alignment(beta, inst.beta_star);
      }
    }
    SpectralModel model = SpectralModel::from_covariance(theory_cov, S.n);
    ActivationMoments mom =
        gaussian_moments(S.teacher, theory_cov.matrix.trace() / S.dx);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      points[g].param = grid[g];
      points[g].align_sgd = sgd_sum[g] / cfg.trials;
      points[g].align_kfac = kfac_sum[g] / cfg.trials;
      try {
        points[g].theory_sgd = predict_corr_sgd(mom, model, S.noise);
        points[g].theory_kfac = predict_corr_kfac(mom, model, grid[g], S.noise);
        points[g].theory_ok = true;
      } catch (const std::exception&) {
        // theory cells stay empty for this grid point
      }
    }
  } else {
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const double eps = grid[g];
      CovarianceModel cov = cov_two_point(S.dx, eps);
      std::uint64_t grid_seed = derive_seed(cfg.base_seed, g);
      double sgd_sum = 0.0, kfac_sum = 0.0;
      for (int trial = 0; trial < cfg.trials; ++trial) {
        RngStream r_inst(derive_seed(grid_seed, trial), 0);
        RngStream r_data(derive_seed(grid_seed, trial), 2);
        SingleIndexInstance inst =
            make_single_index_instance(cov, S.teacher, S.noise, r_inst);
        SingleIndexBatch batch = sample_single_index_batch(inst, S.n, r_data);
        VectorXd xty = batch.X.transpose() * batch.y / S.n;
        sgd_sum += empirical_alignment(xty, inst.beta_star);
        VectorXd beta =
            beta_estimator(batch.X, batch.y, OneStepMethod::kfac, S.lambda_G);
        kfac_sum += empirical_alignment(beta, inst.beta_star);
      }
      points[g].param = eps;
      points[g].align_sgd = sgd_sum / cfg.trials;
      points[g].align_kfac = kfac_sum / cfg.trials;
      SpectralModel model = SpectralModel::two_point(eps, phi);
      ActivationMoments mom = gaussian_moments(S.teacher, 1.0);
      try {
        points[g].theory_sgd = predict_corr_sgd(mom, model, S.noise);
        points[g].theory_kfac =
            predict_corr_kfac(mom, model, S.lambda_G, S.noise);
        points[g].theory_ok = true;
      } catch (const std::exception&) {
        // theory cells stay empty for this grid point
      }
    }
  }

  CsvWriter sum(join_path(cfg.out_dir, "summary.csv"));
  const std::string param_name = lambda_mode ? "lambda" : "epsilon";
  sum.header({param_name, "align_sgd", "align_kfac", "theory_sgd",
              "theory_kfac", "theory_ok"});
  for (const GridPoint& p : points) {
    std::string th_sgd = p.theory_ok ? CsvWriter::cell(p.theory_sgd) : "";
    std::string th_kfac = p.theory_ok ? CsvWriter::cell(p.theory_kfac) : "";
    sum.row({CsvWriter::cell(p.param), CsvWriter::cell(p.align_sgd),
             CsvWriter::cell(p.align_kfac), th_sgd, th_kfac,
             CsvWriter::cell(p.theory_ok ? 1 : 0)});
  }
  rec.files.push_back("summary.csv");

  if (cfg.svg) {
    auto col = [&](auto field) {
      PlotSeries s;
      for (const GridPoint& p : points) {
        s.x.push_back(p.param);
        s.y.push_back(field(p));
      }
      return s;
    };
    PlotSeries sim_sgd = col([](const GridPoint& p) { return p.align_sgd; });
    sim_sgd.label = "sgd (simulated)";
    PlotSeries sim_kfac = col([](const GridPoint& p) { return p.align_kfac; });
    sim_kfac.label = "kfac (simulated)";
    PlotSeries th_sgd = col([](const GridPoint& p) {
      return p.theory_ok ? p.theory_sgd : std::nan("");
    });
    th_sgd.label = "sgd (theory)";
    PlotSeries th_kfac = col([](const GridPoint& p) {
      return p.theory_ok ? p.theory_kfac : std::nan("");
    });
    th_kfac.label = "kfac (theory)";
    PlotSpec spec;
    spec.title = "alignment with the index direction";
    spec.xlabel = param_name;
    spec.ylabel = "correlation";
    spec.log_x = lambda_mode;
    write_svg_plot(join_path(cfg.out_dir, "alignment.svg"), spec,
                   {sim_sgd, sim_kfac, th_sgd, th_kfac});
    rec.files.push_back("alignment.svg");
  }
}

// ------------------------------------------------------------ lower bound

void run_lower_bound(const ExperimentConfig& cfg, RunRecord& rec) {
  const LowerBoundSection& B = cfg.lower_bound;
  CsvWriter sum(join_path(cfg.out_dir, "summary.csv"));
  sum.header({"lambda", "eta", "iter", "dist", "envelope", "satisfied"});
  std::vector<PlotSeries> series;
  for (double lambda : B.lambdas) {
    std::vector<double> etas = B.etas;
    if (B.include_max_eta) etas.push_back(4.0 / (1.0 - lambda));
    const double rate = lower_bound_envelope(lambda);
    for (double eta : etas) {
      std::vector<double> dist =
          lower_bound_trajectory(lambda, eta, B.eps0, B.iterations);
      PlotSeries s;
      s.label = "lam " + format_double(lambda) + " eta " + format_double(eta);
      double envelope = B.eps0;
      for (int t = 0; t <= B.iterations; ++t) {
        bool ok = dist[static_cast<std::size_t>(t)] >= envelope - 1e-12;
        sum.row({CsvWriter::cell(lambda), CsvWriter::cell(eta),
                 CsvWriter::cell(t),
                 CsvWriter::cell(dist[static_cast<std::size_t>(t)]),
                 CsvWriter::cell(envelope), CsvWriter::cell(ok ? 1 : 0)});
        s.x.push_back(t);
        s.y.push_back(dist[static_cast<std::size_t>(t)]);
        envelope *= rate;
      }
      series.push_back(std::move(s));
    }
  }
  rec.files.push_back("summary.csv");
  if (cfg.svg) {
    PlotSpec spec;
    spec.title = "population dynamics lower bound";
    spec.xlabel = "iteration";
    spec.ylabel = "subspace distance";
    write_svg_plot(join_path(cfg.out_dir, "lower_bound.svg"), spec, series);
    rec.files.push_back("lower_bound.svg");
  }
}

void write_manifest(const ExperimentConfig& cfg, const RunRecord& rec) {
  json m;
  m["experiment"] = experiment_kind_name(cfg.kind);
  m["base_seed"] = cfg.base_seed;
  m["trials"] = cfg.trials;
  m["config"] = json::parse(config_to_json(cfg));
  m["files"] = rec.files;
  m["wall_ms"] = rec.wall_ms;
  m["versions"] = {
      {"kronfeat", kVersion},
      {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                    std::to_string(EIGEN_MAJOR_VERSION) + "." +
                    std::to_string(EIGEN_MINOR_VERSION)},
  };
  std::ofstream out(join_path(cfg.out_dir, "manifest.json"),
                    std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest.json");
  out << m.dump(2) << '\n';
}

}  // namespace

// ----------------------------------------------------------------- public

CovarianceModel build_cov(const CovRecipe& recipe, int dim, RngStream& rng) {
  switch (recipe.kind) {
    case CovRecipe::Kind::identity: return cov_identity(dim);
    case CovRecipe::Kind::low_aniso: return cov_low_aniso(dim, rng);
    case CovRecipe::Kind::high_aniso:
      return cov_high_aniso(dim, recipe.decades, rng);
    case CovRecipe::Kind::two_point: return cov_two_point(dim, recipe.eps);
  }
  throw std::logic_error("build_cov");
}

ExperimentKind parse_experiment_kind(const std::string& s) {
  if (s == "headtohead") return ExperimentKind::headtohead;
  if (s == "lr_sweep") return ExperimentKind::lr_sweep;
  if (s == "batchnorm") return ExperimentKind::batchnorm;
  if (s == "single_index_lambda") return ExperimentKind::single_index_lambda;
  if (s == "single_index_epsilon") return ExperimentKind::single_index_epsilon;
  if (s == "lower_bound") return ExperimentKind::lower_bound;
  if (s == "multitask") return ExperimentKind::multitask;
  throw std::invalid_argument("unknown experiment: " + s);
}

const char* experiment_kind_name(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::headtohead: return "headtohead";
    case ExperimentKind::lr_sweep: return "lr_sweep";
    case ExperimentKind::batchnorm: return "batchnorm";
    case ExperimentKind::single_index_lambda: return "single_index_lambda";
    case ExperimentKind::single_index_epsilon: return "single_index_epsilon";
    case ExperimentKind::lower_bound: return "lower_bound";
    case ExperimentKind::multitask: return "multitask";
  }
  return "?";
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  json top = json::parse(in);

  ExperimentConfig cfg;
  cfg.kind = parse_experiment_kind(get_string(top, "experiment", "config"));
  const std::string where = experiment_kind_name(cfg.kind);

  std::vector<std::string> allowed = {"experiment", "base_seed", "trials",
                                      "out_dir"};
  auto extend = [&](std::initializer_list<const char*> keys) {
    for (const char* k : keys) allowed.emplace_back(k);
  };

  switch (cfg.kind) {
    case ExperimentKind::headtohead:
    case ExperimentKind::batchnorm:
      extend({"dx", "dy", "k", "n", "noise_train", "noise_test", "family",
              "cov_train", "cov_test", "methods", "iterations", "eval_n"});
      break;
    case ExperimentKind::lr_sweep:
      extend({"dx", "dy", "k", "n", "noise_train", "noise_test", "family",
              "cov_train", "cov_test", "methods", "iterations", "lr_grid"});
      break;
    case ExperimentKind::multitask:
      extend({"dx", "dy", "k", "n", "noise_train", "noise_test", "family",
              "cov_train", "cov_test", "iterations", "eval_n", "tasks", "lr",
              "lambda_G"});
      break;
    case ExperimentKind::single_index_lambda:
      extend({"dx", "n", "N", "noise", "teacher", "cov", "lambda_grid"});
      break;
    case ExperimentKind::single_index_epsilon:
      extend({"dx", "n", "N", "noise", "teacher", "epsilon_grid", "lambda_G"});
      break;
    case ExperimentKind::lower_bound:
      extend({"lambdas", "etas", "include_max_eta", "eps0", "iterations"});
      break;
  }
  check_keys(top, allowed, where);

  if (top.contains("base_seed")) {
    const json& v = top["base_seed"];
    if (!v.is_number_integer() || v.get<long long>() < 0)
      throw std::invalid_argument("config: base_seed must be a nonnegative integer");
    cfg.base_seed = v.get<std::uint64_t>();
  }
  cfg.trials = get_int_or(top, "trials", 1, where);
  if (cfg.trials < 1)
    throw std::invalid_argument("config: trials must be >= 1");
  if (top.contains("out_dir")) cfg.out_dir = get_string(top, "out_dir", where);

  switch (cfg.kind) {
    case ExperimentKind::headtohead:
    case ExperimentKind::batchnorm:
      parse_linrep_instance_keys(top, cfg.linrep, where, true);
      cfg.linrep.methods = parse_methods(require(top, "methods", where), true, where);
      cfg.linrep.eval_n = get_int_or(top, "eval_n", 4096, where);
      if (cfg.linrep.eval_n < 1)
        throw std::invalid_argument("config: eval_n must be >= 1");
      break;
    case ExperimentKind::lr_sweep:
      parse_linrep_instance_keys(top, cfg.linrep, where, true);
      cfg.linrep.methods = parse_methods(require(top, "methods", where), false, where);
      cfg.linrep.lr_grid = get_double_array(top, "lr_grid", where);
      for (double lr : cfg.linrep.lr_grid)
        if (!(lr > 0.0))
          throw std::invalid_argument("config: lr_grid entries must be > 0");
      break;
    case ExperimentKind::multitask:
      parse_linrep_instance_keys(top, cfg.linrep, where, false);
      cfg.linrep.eval_n = get_int_or(top, "eval_n", 4096, where);
      if (cfg.linrep.eval_n < 1)
        throw std::invalid_argument("config: eval_n must be >= 1");
      cfg.linrep.tasks = get_int(top, "tasks", where);
      if (cfg.linrep.tasks < 1)
        throw std::invalid_argument("config: tasks must be >= 1");
      if (static_cast<long long>(cfg.linrep.tasks) * cfg.linrep.dy <
          cfg.linrep.k)
        throw std::invalid_argument("config: need tasks * dy >= k");
      cfg.linrep.lr = get_double(top, "lr", where);
      cfg.linrep.lambda_G = get_double_or(top, "lambda_G", 0.0, where);
      break;
    case ExperimentKind::single_index_lambda:
    case ExperimentKind::single_index_epsilon: {
      SingleIndexSection& S = cfg.single_index;
      S.dx = get_int(top, "dx", where);
      S.n = get_int(top, "n", where);
      S.N = get_int(top, "N", where);
      if (S.dx <= 0 || S.n <= 0 || S.N <= 0)
        throw std::invalid_argument("config: dims must be positive");
      S.noise = get_double(top, "noise", where);
      S.teacher = Activation::parse(get_string(top, "teacher", where));
      if (cfg.kind == ExperimentKind::single_index_lambda) {
        S.cov = parse_recipe(require(top, "cov", where), "cov");
        S.lambda_grid = get_double_array(top, "lambda_grid", where);
        for (double l : S.lambda_grid)
          if (!(l > 0.0))
            throw std::invalid_argument("config: lambda_grid entries must be > 0");
      } else {
        S.epsilon_grid = get_double_array(top, "epsilon_grid", where);
        for (double e : S.epsilon_grid)
          if (e < 0.0 || e >= 1.0)
            throw std::invalid_argument(
                "config: epsilon_grid entries must be in [0, 1)");
        S.lambda_G = get_double(top, "lambda_G", where);
        if (!(S.lambda_G > 0.0))
          throw std::invalid_argument("config: lambda_G must be > 0");
      }
      break;
    }
    case ExperimentKind::lower_bound: {
      LowerBoundSection& B = cfg.lower_bound;
      B.lambdas = get_double_array(top, "lambdas", where);
      B.etas = get_double_array(top, "etas", where);
      if (top.contains("include_max_eta")) {
        const json& v = top["include_max_eta"];
        if (!v.is_boolean())
          throw std::invalid_argument("config: include_max_eta must be a bool");
        B.include_max_eta = v.get<bool>();
      }
      B.eps0 = get_double(top, "eps0", where);
      B.iterations = get_int(top, "iterations", where);
      if (B.iterations < 0)
        throw std::invalid_argument("config: iterations must be >= 0");
      break;
    }
  }
  return cfg;
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json top;
  top["experiment"] = experiment_kind_name(cfg.kind);
  top["base_seed"] = cfg.base_seed;
  top["trials"] = cfg.trials;
  if (!cfg.out_dir.empty()) top["out_dir"] = cfg.out_dir;

  auto linrep_instance = [&](json& t) {
    const LinRepSection& L = cfg.linrep;
    t["dx"] = L.dx;
    t["dy"] = L.dy;
    t["k"] = L.k;
    t["n"] = L.n;
    t["noise_train"] = L.noise_train;
    t["noise_test"] = L.noise_test;
    t["family"] = family_name(L.family);
    t["cov_train"] = recipe_to_json(L.cov_train);
    t["cov_test"] = recipe_to_json(L.cov_test);
    t["iterations"] = L.iterations;
  };
  auto methods_json = [&]() {
    json arr = json::array();
    for (const MethodSpec& m : cfg.linrep.methods) {
      json e;
      e["name"] = LinRepMethod::make(m.name, m.lr).str();
      e["lr"] = m.lr;
      e["lambda_G"] = m.lambda_G;
      arr.push_back(e);
    }
    return arr;
  };

  switch (cfg.kind) {
    case ExperimentKind::headtohead:
    case ExperimentKind::batchnorm:
      linrep_instance(top);
      top["methods"] = methods_json();
      top["eval_n"] = cfg.linrep.eval_n;
      break;
    case ExperimentKind::lr_sweep: {
      linrep_instance(top);
      json arr = json::array();
      for (const MethodSpec& m : cfg.linrep.methods) {
        json e;
        e["name"] = LinRepMethod::make(m.name, m.lr).str();
        e["lambda_G"] = m.lambda_G;
        arr.push_back(e);
      }
      top["methods"] = arr;
      top["lr_grid"] = cfg.linrep.lr_grid;
      break;
    }
    case ExperimentKind::multitask:
      linrep_instance(top);
      top["eval_n"] = cfg.linrep.eval_n;
      top["tasks"] = cfg.linrep.tasks;
      top["lr"] = cfg.linrep.lr;
      top["lambda_G"] = cfg.linrep.lambda_G;
      break;
    case ExperimentKind::single_index_lambda:
    case ExperimentKind::single_index_epsilon: {
      const SingleIndexSection& S = cfg.single_index;
      top["dx"] = S.dx;
      top["n"] = S.n;
      top["N"] = S.N;
      top["noise"] = S.noise;
      top["teacher"] = S.teacher.name();
      if (cfg.kind == ExperimentKind::single_index_lambda) {
        top["cov"] = recipe_to_json(S.cov);
        top["lambda_grid"] = S.lambda_grid;
      } else {
        top["epsilon_grid"] = S.epsilon_grid;
        top["lambda_G"] = S.lambda_G;
      }
      break;
    }
    case ExperimentKind::lower_bound: {
      const LowerBoundSection& B = cfg.lower_bound;
      top["lambdas"] = B.lambdas;
      top["etas"] = B.etas;
      top["include_max_eta"] = B.include_max_eta;
      top["eps0"] = B.eps0;
      top["iterations"] = B.iterations;
      break;
    }
  }
  return top.dump(2);
}

RunRecord run_experiment(const ExperimentConfig& cfg) {
  if (cfg.out_dir.empty())
    throw std::invalid_argument("no output directory: pass --out or set out_dir");
  std::filesystem::create_directories(cfg.out_dir);
  RunRecord rec;
  rec.out_dir = cfg.out_dir;
  auto start = std::chrono::steady_clock::now();
  switch (cfg.kind) {
    case ExperimentKind::headtohead:
    case ExperimentKind::batchnorm:
      run_linrep_traces(cfg, rec);
      break;
    case ExperimentKind::lr_sweep:
      run_lr_sweep(cfg, rec);
      break;
    case ExperimentKind::multitask:
      run_multitask(cfg, rec);
      break;
    case ExperimentKind::single_index_lambda:
    case ExperimentKind::single_index_epsilon:
      run_single_index(cfg, rec);
      break;
    case ExperimentKind::lower_bound:
      run_lower_bound(cfg, rec);
      break;
  }
  rec.wall_ms = std::chrono::duration<double, std::milli>(
                    std::chrono::steady_clock::now() - start)
                    .count();
  write_manifest(cfg, rec);
  rec.files.push_back("manifest.json");
  return rec;
}

}  // namespace kf
