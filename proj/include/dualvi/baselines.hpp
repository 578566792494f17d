#pragma once

#include "dualvi/model.hpp"
#include "dualvi/optimizer.hpp"

namespace dualvi {

/// Result of a primal ascent. Trace objectives are the primal lower bound,
/// non-decreasing in the iteration index.
struct BaselineResult {
  Vec mean;
  /// Site precisions (Opper-Archambeau); empty for the Cholesky ascent.
  Vec lambda;
  /// Lower Cholesky factor of V (Cholesky ascent); empty for Opper-Archambeau.
  Mat chol_v;
  /// diag(V) at the final iterate.
  Vec latent_var;
  double objective = 0.0;
  int iterations = 0;
  Trace trace;
  Termination termination = Termination::IterationCap;
  double wall_sec = 0.0;
};

/// Primal bound as a function of (m, lambda) with V = A(lambda)^{-1}:
///   1/2 [-log|Sigma A| + lambda^T v_bar - (m-mu)^T Sigma^{-1} (m-mu)] - sum_n (f_n + c_n).
/// Non-concave in lambda. The domain is lambda > 0.
class OpperArchProblem : public BarrierProblem {
 public:
  explicit OpperArchProblem(LgmModel model) : model_(std::move(model)) {}

  /// x = [m; lambda]. Returns the negated bound and its gradient.
  Evaluation evaluate(const Vec& x) const override;
  double value(const Vec& x) const override;
  double max_feasible_step(const Vec& x, const Vec& direction) const override;

  Vec pack(const Vec& mean, const Vec& lambda) const;
  const LgmModel& model() const { return model_; }

 private:
  LgmModel model_;
};

/// Primal bound over (m, C) with V = C C^T and C lower triangular with a
/// positive diagonal. Jointly concave for convex site bounds; O(L^2)
/// parameters, so restricted to L <= kMaxLatentDim.
class CholeskyPrimalProblem : public BarrierProblem {
 public:
  static constexpr Index kMaxLatentDim = 50;

  explicit CholeskyPrimalProblem(LgmModel model);

  Evaluation evaluate(const Vec& x) const override;
  double max_feasible_step(const Vec& x, const Vec& direction) const override;

  Vec pack(const Vec& mean, const Mat& chol) const;
  Vec unpack_mean(const Vec& x) const { return x.head(model_.latent_dim()); }
  Mat unpack_chol(const Vec& x) const;
  const LgmModel& model() const { return model_; }

 private:
  LgmModel model_;
  Mat precision_;
};

/// Opper-Archambeau ascent over (m, lambda), started from m = mu and the
/// dual solver's default lambda.
BaselineResult fit_opper_arch(const LgmModel& model, const SolverOptions& options = {});

/// Direct ascent over (m, chol V) from the prior. Throws DomainError for
/// latent dimension above CholeskyPrimalProblem::kMaxLatentDim.
BaselineResult fit_primal_cholesky(const LgmModel& model, const SolverOptions& options = {});

}  // namespace dualvi
