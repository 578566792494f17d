#pragma once

#include "dualvi/model.hpp"
#include "dualvi/optimizer.hpp"

#include <optional>

namespace dualvi {

/// Everything computed at one dual point.
struct DualState {
  Vec lambda;
  Vec alpha;
  PrecisionFactor factor;
  double objective = 0.0;
  Vec gradient;
  /// diag(W A^{-1} W^T); empty when the gradient was not requested.
  Vec site_var;
};

/// Reduced dual over lambda:
///   1/2 a^T St a - mt^T a - 1/2 log|A(lambda)| + sum_n f*_n(lambda_n),
/// with a = alpha(lambda) the affine site coupling, St = W Sigma W^T and
/// mt = W mu. Strictly convex on the product of the site domains.
class DualProblem : public BarrierProblem {
 public:
  explicit DualProblem(LgmModel model) : model_(std::move(model)) {}

  const LgmModel& model() const { return model_; }
  /// Throws InfeasibleError when lambda leaves the domain.
  DualState state(const Vec& lambda, bool with_gradient = true) const;

  Evaluation evaluate(const Vec& lambda) const override;
  double value(const Vec& lambda) const override;
  double max_feasible_step(const Vec& lambda, const Vec& direction) const override;
  /// (S St S + D)^{-1} with D the conjugate Hessian diagonal at lambda0 and S
  /// the alpha slopes; applied through a Woodbury solve with weights 1/D.
  std::function<Vec(const Vec&)> preconditioner(const Vec& lambda0) const override;

 private:
  LgmModel model_;
};

struct FitResult {
  Vec lambda;
  PosteriorGaussian posterior;
  /// Final reduced-dual value.
  double objective = 0.0;
  /// dual_objective + objective_constant is the full Lagrangian dual, which
  /// upper-bounds the primal lower bound and meets it at the optimum.
  double objective_constant = 0.0;
  double lower_bound = 0.0;
  double duality_gap = 0.0;
  int iterations = 0;
  Trace trace;
  Termination termination = Termination::IterationCap;
  double wall_sec = 0.0;
};

/// Cholesky factor of A(lambda) (dense-covariance models factor in row space;
/// see PrecisionFactor).
PrecisionFactor assemble_a(const LgmModel& model, const Vec& lambda);

double dual_objective(const LgmModel& model, const Vec& lambda);
Vec dual_gradient(const LgmModel& model, const Vec& lambda);

/// -1/2 log|Sigma| - sum of site log-normalizers: the additive constant
/// dropped from the reduced dual.
double dual_constant(const LgmModel& model);

/// m = mu - Sigma W^T alpha(lambda), V = A(lambda)^{-1}.
PosteriorGaussian recover_primal(const LgmModel& model, const Vec& lambda);

/// -KL(q || p) - sum_n [f_n(m_bar_n, v_bar_n) + c_n] for q = posterior. A
/// lower bound on log p(y) with every constant kept.
double primal_lower_bound(const LgmModel& model, const PosteriorGaussian& posterior);

/// Full dual minus the primal bound of the recovered posterior; nonnegative
/// by weak duality, zero at the optimum.
double duality_gap(const LgmModel& model, const Vec& lambda);
double duality_gap(const LgmModel& model, const FitResult& fit);

FitResult fit_dual(const LgmModel& model, const SolverOptions& options = {},
                   const std::optional<Vec>& initial_lambda = std::nullopt);

}  // namespace dualvi
