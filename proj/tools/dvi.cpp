#include "dualvi/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  using namespace dualvi::cli;

  CLI::App app{"Dual variational Gaussian inference for latent Gaussian models"};
  app.require_subcommand(1);

  CliOptions opts;
  std::string config;
  std::string out = ".";
  std::uint64_t seed = 0;

  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("--config", config, "key = value configuration file");
    if (config_required) c->required();
    sub->add_option("--out", out, "output directory")->capture_default_str();
    sub->add_option("--seed", seed, "override the configured seed");
    sub->add_flag("--parallel", opts.parallel, "run grid cells or solvers concurrently");
  };

  auto* fit = app.add_subcommand("fit", "fit one model and write trace, posterior and summary");
  auto* grid = app.add_subcommand("grid", "hyperparameter grid search");
  auto* bench = app.add_subcommand("bench", "race solvers on one model");
  auto* synth = app.add_subcommand("synth", "emit a synthetic lattice GMRF dataset");
  add_common(fit, true);
  add_common(grid, true);
  add_common(bench, true);
  add_common(synth, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitError;
  }

  CLI::App* sub = app.get_subcommands().front();
  if (!config.empty()) opts.config = config;
  opts.out = out;
  if (sub->count("--seed")) opts.seed = seed;

  if (sub == fit) return cmd_fit(opts, std::cout, std::cerr);
  if (sub == grid) return cmd_grid(opts, std::cout, std::cerr);
  if (sub == bench) return cmd_bench(opts, std::cout, std::cerr);
  return cmd_synth(opts, std::cout, std::cerr);
}
