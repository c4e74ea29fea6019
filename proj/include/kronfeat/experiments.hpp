#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kronfeat/linrep_optim.hpp"
#include "kronfeat/synth_data.hpp"

namespace kf {

inline constexpr const char* kVersion = "0.1.0";

struct CovRecipe {
  enum class Kind { identity, low_aniso, high_aniso, two_point };
  Kind kind = Kind::identity;
  double decades = 5.0;  // high_aniso
  double eps = 0.0;      // two_point
};

CovarianceModel build_cov(const CovRecipe& recipe, int dim, RngStream& rng);

struct MethodSpec {
  LinRepMethod::Name name = LinRepMethod::Name::sgd;
  double lr = 1e-2;
  double lambda_G = 0.0;
};

enum class ExperimentKind {
  headtohead,
  lr_sweep,
  batchnorm,
  single_index_lambda,
  single_index_epsilon,
  lower_bound,
  multitask,
};

ExperimentKind parse_experiment_kind(const std::string& s);
const char* experiment_kind_name(ExperimentKind k);

struct LinRepSection {
  int dx = 0, dy = 0, k = 0, n = 0;
  double noise_train = 0.0, noise_test = 0.0;
  Family family = Family::gaussian;
  CovRecipe cov_train, cov_test;
  std::vector<MethodSpec> methods;
  int iterations = 0;
  int eval_n = 4096;
  int tasks = 1;                // multitask
  double lr = 1e-2;             // multitask
  double lambda_G = 0.0;        // multitask
  std::vector<double> lr_grid;  // lr_sweep
};

struct SingleIndexSection {
  int dx = 0, n = 0, N = 0;
  double noise = 0.0;
  Activation teacher;
  CovRecipe cov;                     // lambda sweep
  std::vector<double> lambda_grid;   // lambda sweep
  std::vector<double> epsilon_grid;  // epsilon sweep
  double lambda_G = 0.0;             // epsilon sweep
};

struct LowerBoundSection {
  std::vector<double> lambdas;
  std::vector<double> etas;
  bool include_max_eta = true;  // append 4/(1-lambda) per lambda
  double eps0 = 0.5;
  int iterations = 200;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::headtohead;
  std::uint64_t base_seed = 0;
  int trials = 1;
  std::string out_dir;
  bool svg = false;
  LinRepSection linrep;
  SingleIndexSection single_index;
  LowerBoundSection lower_bound;
};

// Strict parse: unknown keys anywhere in the file are rejected.
ExperimentConfig load_config(const std::string& path);

// Round-trip used for the manifest echo; stable key order.
std::string config_to_json(const ExperimentConfig& cfg);

struct RunRecord {
  std::string out_dir;
  double wall_ms = 0.0;
  std::vector<std::string> files;
};

RunRecord run_experiment(const ExperimentConfig& cfg);

}  // namespace kf
