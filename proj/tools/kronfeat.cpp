#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "kronfeat/experiments.hpp"

int main(int argc, char** argv) {
  CLI::App app{"kronfeat: feature-learning experiments with layer-wise "
               "Kronecker preconditioning"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  int trials = 1;
  bool svg = false;

  const std::pair<const char*, const char*> kinds[] = {
      {"headtohead", "optimizer comparison on linear representation learning"},
      {"lr_sweep", "final subspace distance across a learning-rate grid"},
      {"batchnorm", "batch whitening as a substitute for input preconditioning"},
      {"single_index_lambda", "one-step alignment vs ridge strength"},
      {"single_index_epsilon", "one-step alignment vs covariance spread"},
      {"lower_bound", "population recursion that saturates the contraction rate"},
      {"multitask", "shared representation updates averaged over task heads"},
  };
  for (const auto& [name, desc] : kinds) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "JSON experiment config")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir,
                    "output directory (overrides out_dir from the config)");
    sub->add_option("--seed", seed, "base seed override");
    sub->add_option("--trials", trials, "trial count override")
        ->check(CLI::PositiveNumber);
    sub->add_flag("--svg", svg, "also write svg plots");
  }
  CLI11_PARSE(app, argc, argv);
  CLI::App* sub = app.get_subcommands().front();

  try {
    kf::ExperimentConfig cfg = kf::load_config(config_path);
    if (sub->get_name() != kf::experiment_kind_name(cfg.kind)) {
      std::fprintf(stderr,
                   "error: config is for \"%s\" but the \"%s\" subcommand "
                   "was invoked\n",
                   kf::experiment_kind_name(cfg.kind), sub->get_name().c_str());
      return 1;
    }
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (sub->count("--seed")) cfg.base_seed = seed;
    if (sub->count("--trials")) cfg.trials = trials;
    if (svg) cfg.svg = true;

    kf::RunRecord rec = kf::run_experiment(cfg);
    std::printf("%s: %zu files in %s (%.1f s)\n", sub->get_name().c_str(),
                rec.files.size(), rec.out_dir.c_str(), rec.wall_ms / 1000.0);
    for (const std::string& f : rec.files)
      std::printf("  %s\n", f.c_str());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
