#include "dualvi/dual.hpp"

#include "dualvi/errors.hpp"

#include <chrono>
#include <cmath>

namespace dualvi {

namespace {

double sum_conjugates(const LgmModel& model, const Vec& lambda) {
  double total = 0.0;
  for (std::size_t i = 0; i < model.sites().size(); ++i) {
    const Site& s = model.sites()[i];
    total += s.conjugate(lambda.segment(model.site_offset(i), s.dim()));
  }
  return total;
}

Vec stacked_conjugate_grad(const LgmModel& model, const Vec& lambda) {
  Vec out(lambda.size());
  for (std::size_t i = 0; i < model.sites().size(); ++i) {
    const Site& s = model.sites()[i];
    const Index off = model.site_offset(i);
    out.segment(off, s.dim()) = s.conjugate_grad(lambda.segment(off, s.dim()));
  }
  return out;
}

void require_feasible(const LgmModel& model, const Vec& lambda) {
  if (lambda.size() != model.num_rows()) throw DimensionError("lambda length does not match the design rows");
  if (!model.lambda_feasible(lambda)) throw InfeasibleError("lambda is outside the dual feasible set");
}

}  // namespace

DualState DualProblem::state(const Vec& lambda, bool with_gradient) const {
  require_feasible(model_, lambda);
  Vec alpha = model_.alpha(lambda);
  Vec st_alpha = model_.sigma_tilde_times(alpha);
  PrecisionFactor factor(model_, lambda);
  const double objective =
      0.5 * alpha.dot(st_alpha) - model_.mu_tilde().dot(alpha) - 0.5 * factor.log_det() + sum_conjugates(model_, lambda);

  DualState out{lambda, std::move(alpha), std::move(factor), objective, {}, {}};
  if (with_gradient) {
    out.site_var = out.factor.site_variances();
    out.gradient = model_.alpha_slope().cwiseProduct(st_alpha - model_.mu_tilde()) - 0.5 * out.site_var +
                   stacked_conjugate_grad(model_, lambda);
  }
  return out;
}

Evaluation DualProblem::evaluate(const Vec& lambda) const {
  DualState s = state(lambda, true);
  return {s.objective, std::move(s.gradient)};
}

double DualProblem::value(const Vec& lambda) const { return state(lambda, false).objective; }

double DualProblem::max_feasible_step(const Vec& lambda, const Vec& direction) const {
  return model_.max_feasible_step(lambda, direction);
}

std::function<Vec(const Vec&)> DualProblem::preconditioner(const Vec& lambda0) const {
  require_feasible(model_, lambda0);
  Vec d(lambda0.size());
  for (std::size_t i = 0; i < model_.sites().size(); ++i) {
    const Site& s = model_.sites()[i];
    const Index off = model_.site_offset(i);
    d.segment(off, s.dim()) = s.conjugate_hessian_diag(lambda0.segment(off, s.dim()));
  }
  PrecisionFactor factor(model_, d.cwiseInverse());
  Vec slope = model_.alpha_slope();
  return [factor = std::move(factor), slope = std::move(slope)](const Vec& v) -> Vec {
    return slope.cwiseProduct(factor.row_space_solve(slope.cwiseProduct(v)).col(0));
  };
}

PrecisionFactor assemble_a(const LgmModel& model, const Vec& lambda) { return PrecisionFactor(model, lambda); }

double dual_objective(const LgmModel& model, const Vec& lambda) { return DualProblem(model).value(lambda); }

Vec dual_gradient(const LgmModel& model, const Vec& lambda) { return DualProblem(model).evaluate(lambda).gradient; }

double dual_constant(const LgmModel& model) {
  return -0.5 * model.prior().log_det_cov() - model.sum_log_normalizers();
}

PosteriorGaussian recover_primal(const LgmModel& model, const Vec& lambda) {
  if (lambda.size() != model.num_rows()) throw DimensionError("lambda length does not match the design rows");
  Vec alpha = model.alpha(lambda);
  Vec mean = model.prior().mean() - Vec(model.prior().cov_times(model.design().transpose_times(alpha)));
  PrecisionFactor factor(model, lambda);
  auto [site_mean, site_var] = project_site_moments(model, mean, factor);
  return PosteriorGaussian{std::move(mean), lambda, std::move(factor), std::move(site_mean), std::move(site_var)};
}

double primal_lower_bound(const LgmModel& model, const PosteriorGaussian& posterior) {
  const Vec diff = posterior.mean - model.prior().mean();
  const double quad = diff.dot(Vec(model.prior().precision_times(diff)));
  // tr(Sigma^{-1} V) = L - lambda^T v_bar when V = A(lambda)^{-1}
  double bound =
      0.5 * (-posterior.factor.log_det_ratio() + posterior.lambda.dot(posterior.site_var) - quad);
  for (std::size_t i = 0; i < model.sites().size(); ++i) {
    const Site& s = model.sites()[i];
    const Index off = model.site_offset(i);
    bound -= s.value(posterior.site_mean.segment(off, s.dim()), posterior.site_var.segment(off, s.dim())) +
             s.log_normalizer();
  }
  return bound;
}

double duality_gap(const LgmModel& model, const Vec& lambda) {
  const double full_dual = dual_objective(model, lambda) + dual_constant(model);
  return std::abs(full_dual - primal_lower_bound(model, recover_primal(model, lambda)));
}

double duality_gap(const LgmModel& model, const FitResult& fit) {
  return std::abs(fit.objective + fit.objective_constant - primal_lower_bound(model, fit.posterior));
}

FitResult fit_dual(const LgmModel& model, const SolverOptions& options, const std::optional<Vec>& initial_lambda) {
  const auto start = std::chrono::steady_clock::now();
  Vec lambda0 = initial_lambda ? *initial_lambda : model.default_lambda();
  require_feasible(model, lambda0);

  DualProblem problem(model);
  MinimizeResult run = minimize_lbfgs(problem, lambda0, options);

  FitResult fit{run.x, recover_primal(model, run.x), 0.0, 0.0, 0.0, 0.0, 0, {}, Termination::IterationCap, 0.0};
  fit.objective = run.eval.value;
  fit.objective_constant = dual_constant(model);
  fit.lower_bound = primal_lower_bound(model, fit.posterior);
  fit.duality_gap = std::abs(fit.objective + fit.objective_constant - fit.lower_bound);
  fit.iterations = run.iterations;
  fit.trace = std::move(run.trace);
  fit.termination = run.termination;
  fit.wall_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return fit;
}

}  // namespace dualvi
