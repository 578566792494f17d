#include "dualvi/cli.hpp"

#include "dualvi/errors.hpp"

#include <cmath>
#include <fstream>
#include <thread>

namespace dualvi::cli {

namespace fs = std::filesystem;

ModelKind parse_model_kind(const std::string& s) {
  if (s == "generic") return ModelKind::Generic;
  if (s == "gmrf-poisson") return ModelKind::GmrfPoisson;
  if (s == "gp-multiclass") return ModelKind::GpMulticlass;
  throw ParseError("config", 0, "unknown model kind '" + s + "' (generic | gmrf-poisson | gp-multiclass)");
}

SolverKind parse_solver_kind(const std::string& s) {
  if (s == "dual") return SolverKind::Dual;
  if (s == "opper-arch") return SolverKind::OpperArch;
  if (s == "primal-cholesky") return SolverKind::PrimalCholesky;
  throw ParseError("config", 0, "unknown solver '" + s + "' (dual | opper-arch | primal-cholesky)");
}

std::string to_string(SolverKind s) {
  switch (s) {
    case SolverKind::Dual: return "dual";
    case SolverKind::OpperArch: return "opper-arch";
    case SolverKind::PrimalCholesky: return "primal-cholesky";
  }
  return "unknown";
}

namespace {

GridAxis parse_axis(const io::Config& raw, const std::string& key) {
  GridAxis axis;
  axis.name = raw.get_string(key);
  if (raw.has(key + ".values")) {
    axis.values = raw.get_doubles(key + ".values");
  } else if (raw.has(key + ".range")) {
    const auto r = raw.get_doubles(key + ".range");
    if (r.size() != 3 || r[2] < 1 || r[2] != std::floor(r[2])) {
      throw ParseError("config", 0, key + ".range must be 'low, high, count' with integer count >= 1");
    }
    const int count = static_cast<int>(r[2]);
    for (int i = 0; i < count; ++i) {
      axis.values.push_back(count == 1 ? r[0] : r[0] + (r[1] - r[0]) * i / (count - 1));
    }
  } else {
    throw ParseError("config", 0, "grid axis '" + key + "' needs " + key + ".values or " + key + ".range");
  }
  return axis;
}

void require_hp(const Hyperparameters& hp, const std::optional<GridSpec>& grid,
                std::initializer_list<const char*> names) {
  for (const char* name : names) {
    const std::string n = name;
    const bool on_grid = grid && (grid->first.name == n || grid->first.name == "log_" + n ||
                                  grid->second.name == n || grid->second.name == "log_" + n);
    if (!on_grid && !hp.has(n)) throw ParseError("config", 0, "missing hyperparameter hp." + n + " (or hp.log_" + n + ")");
  }
}

std::string solver_file_tag(SolverKind s) {
  std::string tag = to_string(s);
  for (char& c : tag) {
    if (c == '-') c = '_';
  }
  return tag;
}

}  // namespace

RunConfig RunConfig::load(const CliOptions& cli, double default_train_fraction) {
  if (!cli.config) throw ParseError("command line", 0, "--config is required");
  RunConfig cfg;
  cfg.raw = io::Config::load(*cli.config);
  const io::Config& raw = cfg.raw;

  cfg.model = parse_model_kind(raw.get_string("model", "generic"));
  cfg.solver = parse_solver_kind(raw.get_string("solver", "dual"));
  if (raw.has("bench.solvers")) {
    for (const std::string& s : raw.get_strings("bench.solvers")) cfg.bench_solvers.push_back(parse_solver_kind(s));
  }

  SolverOptions& o = cfg.options;
  o.max_iterations = static_cast<int>(raw.get_int("solver.max_iterations", o.max_iterations));
  o.gradient_tolerance = raw.get_double("solver.gradient_tolerance", o.gradient_tolerance);
  o.initial_step = raw.get_double("solver.initial_step", o.initial_step);
  o.feasibility_margin = raw.get_double("solver.feasibility_margin", o.feasibility_margin);
  o.history = static_cast<int>(raw.get_int("solver.history", o.history));
  o.precondition = raw.get_bool("solver.precondition", o.precondition);
  o.validate();

  for (const auto& [name, value] : raw.with_prefix("hp.")) {
    (void)value;
    cfg.hp.set(name, raw.get_double("hp." + name));
  }
  cfg.hp.validate();

  if (raw.has("grid.hp1") || raw.has("grid.hp2")) {
    GridSpec grid{parse_axis(raw, "grid.hp1"), parse_axis(raw, "grid.hp2")};
    grid.validate();
    cfg.grid = std::move(grid);
  }

  cfg.seed = cli.seed ? *cli.seed : static_cast<std::uint64_t>(raw.get_int("seed", 0));
  cfg.mc_seed = static_cast<std::uint64_t>(raw.get_int("mc.seed", static_cast<long long>(cfg.seed)));
  cfg.mc_samples = static_cast<int>(raw.get_int("mc.samples", cfg.mc_samples));
  if (cfg.mc_samples < 1) throw ParseError("config", 0, "mc.samples must be >= 1");
  cfg.parallel = cli.parallel || raw.get_bool("parallel", false);
  cfg.train_fraction = raw.get_double("split.train_fraction", default_train_fraction);
  if (!(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0)) {
    throw ParseError("config", 0, "split.train_fraction must lie in (0, 1]");
  }
  cfg.out_dir = cli.out;

  for (const auto& [key, value] : raw.with_prefix("data.")) {
    (void)value;
    if (key == "num_nodes") continue;
    const fs::path p = raw.get_path("data." + key);
    if (!fs::exists(p)) throw std::runtime_error("data file not found: " + p.string());
  }

  switch (cfg.model) {
    case ModelKind::GmrfPoisson: require_hp(cfg.hp, cfg.grid, {"k_u", "k_v"}); break;
    case ModelKind::GpMulticlass: require_hp(cfg.hp, cfg.grid, {"s", "sigma"}); break;
    case ModelKind::Generic: break;
  }
  return cfg;
}

std::shared_ptr<ExperimentTask> load_task(const RunConfig& cfg) {
  const io::Config& raw = cfg.raw;
  switch (cfg.model) {
    case ModelKind::GmrfPoisson: {
      GmrfData data;
      data.edges = io::read_edges(raw.get_path("data.edges"));
      data.counts = io::read_int_column(raw.get_path("data.counts"));
      data.num_nodes = static_cast<int>(raw.get_int("data.num_nodes", static_cast<long long>(data.counts.size())));
      for (const Edge& e : data.edges) {
        if (e.a >= data.num_nodes || e.b >= data.num_nodes) {
          throw DimensionError("edge (" + std::to_string(e.a) + ", " + std::to_string(e.b) + ") outside " +
                               std::to_string(data.num_nodes) + " regions");
        }
      }
      Split split = train_test_split(data.num_nodes, cfg.train_fraction, cfg.seed);
      return std::make_shared<GmrfPoissonTask>(std::move(data), std::move(split));
    }
    case ModelKind::GpMulticlass: {
      ClassificationData data = raw.has("data.glass")
                                    ? io::read_glass(raw.get_path("data.glass"))
                                    : io::read_classification(raw.get_path("data.features"), raw.get_path("data.labels"));
      Split split = train_test_split(static_cast<int>(data.labels.size()), cfg.train_fraction, cfg.seed);
      return std::make_shared<GpClassificationTask>(std::move(data), std::move(split));
    }
    case ModelKind::Generic: return nullptr;
  }
  return nullptr;
}

LoadedModel load_model(const RunConfig& cfg) {
  if (auto task = load_task(cfg)) {
    LgmModel model = task->build_model(cfg.hp);
    return {std::move(task), std::move(model)};
  }
  const io::Config& raw = cfg.raw;
  std::optional<Prior> prior;
  if (raw.has("data.prior_precision")) {
    Mat q = io::read_matrix(raw.get_path("data.prior_precision"));
    const Index l = q.rows();
    Vec mean = raw.has("data.prior_mean") ? io::read_vector(raw.get_path("data.prior_mean")) : Vec::Zero(l);
    prior = Prior::from_precision(std::move(mean), q.sparseView());
  } else {
    Mat cov = io::read_matrix(raw.get_path("data.prior_cov"));
    const Index l = cov.rows();
    Vec mean = raw.has("data.prior_mean") ? io::read_vector(raw.get_path("data.prior_mean")) : Vec::Zero(l);
    prior = Prior::from_covariance(std::move(mean), std::move(cov));
  }
  Design design = raw.has("data.design") ? Design::dense(io::read_matrix(raw.get_path("data.design")))
                                         : Design::identity(prior->dim());
  std::vector<Site> sites = io::read_sites(raw.get_path("data.sites"));
  return {nullptr, LgmModel(std::move(*prior), std::move(design), std::move(sites))};
}

ToleranceHit first_within_tolerance(const Trace& trace, double offset, double reference, double rel_tol) {
  const double scale = std::max(std::abs(reference), 1.0);
  for (const TraceRecord& r : trace) {
    if (std::abs(r.objective + offset - reference) <= rel_tol * scale) return {r.iter, r.elapsed_sec};
  }
  return {};
}

namespace {

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
}

int exit_code(Termination t) { return t == Termination::Converged ? kExitOk : kExitNotConverged; }

void write_summary(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& entries) {
  io::atomic_write(path, [&](std::ostream& out) {
    for (const auto& [k, v] : entries) out << k << " = " << v << '\n';
  });
}

}  // namespace

int cmd_fit(const CliOptions& cli, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = RunConfig::load(cli, 1.0);
    LoadedModel lm = load_model(cfg);
    const LgmModel& model = lm.model;
    if (cfg.solver == SolverKind::PrimalCholesky && model.latent_dim() > CholeskyPrimalProblem::kMaxLatentDim) {
      throw DomainError("primal-cholesky refuses latent dimension " + std::to_string(model.latent_dim()) + " > " +
                        std::to_string(CholeskyPrimalProblem::kMaxLatentDim));
    }
    using io::format_double;
    std::vector<std::pair<std::string, std::string>> summary{{"solver", to_string(cfg.solver)}};
    Trace trace;
    Vec mean;
    Vec variance;
    Termination termination = Termination::IterationCap;

    if (cfg.solver == SolverKind::Dual) {
      FitResult fit = fit_dual(model, cfg.options);
      trace = fit.trace;
      mean = fit.posterior.mean;
      variance = fit.posterior.factor.latent_variances();
      termination = fit.termination;
      summary.insert(summary.end(), {{"termination", to_string(fit.termination)},
                                     {"iterations", std::to_string(fit.iterations)},
                                     {"objective", format_double(fit.objective)},
                                     {"dual_value", format_double(fit.objective + fit.objective_constant)},
                                     {"lower_bound", format_double(fit.lower_bound)},
                                     {"duality_gap", format_double(fit.duality_gap)},
                                     {"wall_sec", format_double(fit.wall_sec)}});
      if (lm.task && !lm.task->test_sites().empty()) {
        const Vec probs = mc_predict(*lm.task, model, fit.posterior, cfg.hp, cfg.mc_samples, cfg.mc_seed);
        summary.emplace_back("test_points", std::to_string(probs.size()));
        summary.emplace_back("pred_error", format_double(prediction_error(probs)));
      }
    } else {
      BaselineResult res = cfg.solver == SolverKind::OpperArch ? fit_opper_arch(model, cfg.options)
                                                               : fit_primal_cholesky(model, cfg.options);
      trace = res.trace;
      mean = res.mean;
      variance = res.latent_var;
      termination = res.termination;
      summary.insert(summary.end(), {{"termination", to_string(res.termination)},
                                     {"iterations", std::to_string(res.iterations)},
                                     {"objective", format_double(res.objective)},
                                     {"lower_bound", format_double(res.objective)},
                                     {"wall_sec", format_double(res.wall_sec)}});
    }

    io::atomic_write(cfg.out_dir / "trace.csv", [&](std::ostream& out) { write_trace_csv(out, trace); });
    io::atomic_write(cfg.out_dir / "posterior.csv",
                     [&](std::ostream& out) { io::write_posterior_csv(out, mean, variance); });
    write_summary(cfg.out_dir / "summary.txt", summary);
    for (const auto& [k, v] : summary) log << k << " = " << v << '\n';
    return exit_code(termination);
  });
}

int cmd_grid(const CliOptions& cli, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = RunConfig::load(cli, 0.8);
    if (!cfg.grid) throw ParseError("config", 0, "grid command needs grid.hp1 and grid.hp2");
    if (cfg.model == ModelKind::Generic) throw ParseError("config", 0, "grid command needs a model with held-out data");
    auto task = load_task(cfg);

    GridOptions opts;
    opts.solver = cfg.options;
    opts.base = cfg.hp;
    opts.mc_samples = cfg.mc_samples;
    opts.mc_seed = cfg.mc_seed;
    opts.parallel = cfg.parallel;
    GridResult result = grid_search(*task, *cfg.grid, opts);

    io::atomic_write(cfg.out_dir / "grid.csv", [&](std::ostream& out) { write_grid_csv(out, result); });
    for (const GridCell& c : result.cells) {
      if (c.failed) {
        err << "cell " << cfg.grid->first.name << '=' << c.hp1 << ", " << cfg.grid->second.name << '=' << c.hp2
            << " failed: " << c.error << '\n';
      }
    }
    if (auto best = result.argmin_neg_lower_bound()) {
      const GridCell& c = result.cells[*best];
      log << "argmin neg_lower_bound: " << cfg.grid->first.name << " = " << io::format_double(c.hp1) << ", "
          << cfg.grid->second.name << " = " << io::format_double(c.hp2)
          << ", neg_lower_bound = " << io::format_double(c.neg_lower_bound)
          << ", pred_error = " << io::format_double(c.pred_error) << '\n';
    }
    log << result.cells.size() << " cells, " << result.num_failed() << " failed\n";
    return result.num_failed() * 10 <= result.cells.size() ? kExitOk : kExitError;
  });
}

namespace {

struct BenchRun {
  SolverKind solver = SolverKind::Dual;
  bool ok = false;
  std::string error;
  Trace trace;
  double offset = 0.0;
  Termination termination = Termination::IterationCap;
  std::optional<double> exact_final;
};

BenchRun run_solver(SolverKind solver, const LgmModel& model, const SolverOptions& options) {
  BenchRun run;
  run.solver = solver;
  try {
    if (solver == SolverKind::Dual) {
      FitResult fit = fit_dual(model, options);
      run.trace = std::move(fit.trace);
      run.offset = fit.objective_constant;
      run.termination = fit.termination;
      run.exact_final = fit.objective + fit.objective_constant;
    } else {
      BaselineResult res = solver == SolverKind::OpperArch ? fit_opper_arch(model, options)
                                                           : fit_primal_cholesky(model, options);
      run.trace = std::move(res.trace);
      run.termination = res.termination;
    }
    run.ok = true;
  } catch (const std::exception& e) {
    run.error = e.what();
  }
  return run;
}

}  // namespace

int cmd_bench(const CliOptions& cli, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = RunConfig::load(cli, 1.0);
    if (cfg.bench_solvers.size() < 2) throw ParseError("config", 0, "bench.solvers must name at least two solvers");
    const double tol = cfg.raw.get_double("bench.tolerance", 1e-4);
    LoadedModel lm = load_model(cfg);

    std::vector<BenchRun> runs(cfg.bench_solvers.size());
    if (cfg.parallel) {
      std::vector<std::jthread> pool;
      for (std::size_t i = 0; i < runs.size(); ++i) {
        pool.emplace_back([&, i] { runs[i] = run_solver(cfg.bench_solvers[i], lm.model, cfg.options); });
      }
    } else {
      for (std::size_t i = 0; i < runs.size(); ++i) runs[i] = run_solver(cfg.bench_solvers[i], lm.model, cfg.options);
    }

    std::optional<double> reference;
    for (const BenchRun& r : runs) {
      if (r.ok && r.exact_final) {
        reference = r.exact_final;
        break;
      }
    }
    if (!reference) {
      BenchRun dual = run_solver(SolverKind::Dual, lm.model, cfg.options);
      if (!dual.ok) throw std::runtime_error("reference dual fit failed: " + dual.error);
      reference = dual.exact_final;
    }

    std::vector<std::string> rows;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const BenchRun& r = runs[i];
      const std::string name = to_string(r.solver);
      if (!r.ok) {
        err << "solver " << name << " failed: " << r.error << '\n';
        rows.push_back(name + ",-1,-1,failed");
        continue;
      }
      io::atomic_write(cfg.out_dir / ("trace_" + std::to_string(i) + "_" + solver_file_tag(r.solver) + ".csv"),
                       [&](std::ostream& out) { write_trace_csv(out, r.trace); });
      const ToleranceHit hit = first_within_tolerance(r.trace, r.offset, *reference, tol);
      rows.push_back(name + "," + std::to_string(hit.iteration) + "," + io::format_double(hit.elapsed_sec) + "," +
                     to_string(r.termination));
    }
    io::atomic_write(cfg.out_dir / "bench_summary.csv", [&](std::ostream& out) {
      out << "solver,iters_to_tol,sec_to_tol,status\n";
      for (const std::string& row : rows) out << row << '\n';
    });
    log << "reference optimum = " << io::format_double(*reference) << '\n';
    for (const std::string& row : rows) log << row << '\n';
    return kExitOk;
  });
}

int cmd_synth(const CliOptions& cli, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    io::Config raw;
    if (cli.config) raw = io::Config::load(*cli.config);
    const int side = static_cast<int>(raw.get_int("synth.grid_side", 20));
    const double k_u = raw.get_double("synth.k_u", 2.0);
    const double k_v = raw.get_double("synth.k_v", 20.0);
    const double offset = raw.get_double("synth.offset", 1.0);
    const std::uint64_t seed = cli.seed ? *cli.seed : static_cast<std::uint64_t>(raw.get_int("seed", 0));

    const GmrfData data = synth_gmrf_dataset(side, k_u, k_v, offset, seed);
    const fs::path& out_dir = cli.out;
    io::atomic_write(out_dir / "edges.csv", [&](std::ostream& out) {
      for (const Edge& e : data.edges) out << e.a << ',' << e.b << '\n';
    });
    io::atomic_write(out_dir / "counts.csv", [&](std::ostream& out) {
      for (int c : data.counts) out << c << '\n';
    });
    io::atomic_write(out_dir / "truth.csv", [&](std::ostream& out) {
      out << "index,u,v\n";
      for (Index i = 0; i < data.true_u.size(); ++i) {
        out << i << ',' << io::format_double(data.true_u(i)) << ',' << io::format_double(data.true_v(i)) << '\n';
      }
    });
    io::atomic_write(out_dir / "gmrf.cfg", [&](std::ostream& out) {
      out << "# synthetic " << side << "x" << side << " lattice, seed " << seed << "\n"
          << "model = gmrf-poisson\n"
          << "data.edges = edges.csv\n"
          << "data.counts = counts.csv\n"
          << "hp.k_u = " << io::format_double(k_u) << '\n'
          << "hp.k_v = " << io::format_double(k_v) << '\n'
          << "hp.offset = " << io::format_double(offset) << '\n'
          << "seed = " << seed << '\n';
    });
    log << "wrote " << data.num_nodes << " regions, " << data.edges.size() << " edges to " << out_dir.string() << '\n';
    return kExitOk;
  });
}

}  // namespace dualvi::cli
