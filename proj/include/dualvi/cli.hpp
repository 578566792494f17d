#pragma once

#include "dualvi/baselines.hpp"
#include "dualvi/dual.hpp"
#include "dualvi/io.hpp"
#include "dualvi/tasks.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace dualvi::cli {

enum class ModelKind { Generic, GmrfPoisson, GpMulticlass };
enum class SolverKind { Dual, OpperArch, PrimalCholesky };

ModelKind parse_model_kind(const std::string& s);
SolverKind parse_solver_kind(const std::string& s);
std::string to_string(SolverKind s);

/// Command-line flags shared by every subcommand.
struct CliOptions {
  std::optional<std::filesystem::path> config;
  std::filesystem::path out = ".";
  std::optional<std::uint64_t> seed;
  bool parallel = false;
};

/// Everything a run needs, validated before any fitting starts.
struct RunConfig {
  ModelKind model = ModelKind::Generic;
  SolverKind solver = SolverKind::Dual;
  std::vector<SolverKind> bench_solvers;
  SolverOptions options;
  Hyperparameters hp;
  std::optional<GridSpec> grid;
  std::uint64_t seed = 0;
  std::uint64_t mc_seed = 0;
  int mc_samples = 2000;
  bool parallel = false;
  double train_fraction = 1.0;
  std::filesystem::path out_dir;
  io::Config raw;

  /// `default_train_fraction` applies when `split.train_fraction` is absent.
  static RunConfig load(const CliOptions& cli, double default_train_fraction);
};

/// Model plus the task that owns its data split; `task` is null for generic
/// models.
struct LoadedModel {
  std::shared_ptr<ExperimentTask> task;
  LgmModel model;
};

LoadedModel load_model(const RunConfig& cfg);
std::shared_ptr<ExperimentTask> load_task(const RunConfig& cfg);

/// First trace record whose value, shifted by `offset`, lies within relative
/// distance `rel_tol` of `reference` (scale max(|reference|, 1)).
struct ToleranceHit {
  int iteration = -1;
  double elapsed_sec = -1.0;
  bool reached() const { return iteration >= 0; }
};
ToleranceHit first_within_tolerance(const Trace& trace, double offset, double reference, double rel_tol);

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitNotConverged = 2;

/// Each command reports errors on `err` and never throws.
int cmd_fit(const CliOptions& cli, std::ostream& log, std::ostream& err);
int cmd_grid(const CliOptions& cli, std::ostream& log, std::ostream& err);
int cmd_bench(const CliOptions& cli, std::ostream& log, std::ostream& err);
int cmd_synth(const CliOptions& cli, std::ostream& log, std::ostream& err);

}  // namespace dualvi::cli
