#pragma once

#include <Eigen/Dense>

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace dualvi {

using Vec = Eigen::VectorXd;

struct SolverOptions {
  int max_iterations = 500;
  /// Stop when the infinity norm of the gradient drops to this value.
  double gradient_tolerance = 1e-6;
  /// Initial step delta_0 before the feasibility cap.
  double initial_step = 1.0;
  /// Fraction epsilon kept away from the domain boundary.
  double feasibility_margin = 1e-2;
  int history = 10;
  /// Use the problem's preconditioner, when it offers one, as the initial
  /// inverse Hessian.
  bool precondition = true;
  double armijo = 1e-4;
  double curvature = 0.9;
  /// Backtracking gives up below this step length.
  double min_step = 1e-15;

  /// Throws std::invalid_argument on out-of-range settings.
  void validate() const;
};

struct TraceRecord {
  int iter = 0;
  double elapsed_sec = 0.0;
  double objective = 0.0;
  double grad_inf_norm = 0.0;
};

using Trace = std::vector<TraceRecord>;

/// Stalled: the objective stopped changing beyond roundoff for several
/// iterations without a new low in the gradient norm, which is still above
/// tolerance.
enum class Termination { Converged, IterationCap, LineSearchFailure, Stalled };

std::string to_string(Termination t);

/// Writes `iter,elapsed_sec,objective,grad_inf_norm` with 17 significant digits.
void write_trace_csv(std::ostream& out, const Trace& trace);

struct Evaluation {
  double value = 0.0;
  Vec gradient;
};

/// Smooth objective on an open convex domain whose boundary is reachable only
/// through barrier terms. The optimizer never evaluates outside the domain:
/// every trial point is strictly inside max_feasible_step.
class BarrierProblem {
 public:
  virtual ~BarrierProblem() = default;
  virtual Evaluation evaluate(const Vec& x) const = 0;
  /// Value only; line-search trials use this. Defaults to evaluate().value.
  virtual double value(const Vec& x) const { return evaluate(x).value; }
  /// sup{delta > 0 : x + delta d stays in the closure of the domain}.
  virtual double max_feasible_step(const Vec& x, const Vec& direction) const = 0;
  /// Fixed symmetric positive definite approximation of the inverse Hessian
  /// built at the starting point; empty when the problem has none.
  virtual std::function<Vec(const Vec&)> preconditioner(const Vec& x0) const {
    (void)x0;
    return {};
  }
};

/// (1 - epsilon) * min(max_feasible_step, delta_0).
double initial_step_cap(const BarrierProblem& problem, const Vec& x, const Vec& direction, double initial_step,
                        double feasibility_margin);

struct LineSearchResult {
  bool accepted = false;
  double step = 0.0;
  Vec x;
  Evaluation eval;
  int evaluations = 0;
};

/// Feasibility-capped line search: start at initial_step_cap, halve until
/// the Armijo condition holds. When the first trial already satisfies Armijo
/// but not the curvature condition, the step is doubled while it stays under
/// the feasibility cap and keeps satisfying Armijo. A trial whose decrease is
/// within roundoff of the current value is also accepted when its directional
/// derivative passes the approximate Wolfe test.
LineSearchResult feasible_line_search(const BarrierProblem& problem, const Vec& x, const Evaluation& at_x,
                                      const Vec& direction, const SolverOptions& options);

struct MinimizeResult {
  Vec x;
  Evaluation eval;
  int iterations = 0;
  Termination termination = Termination::IterationCap;
  Trace trace;
};

/// Limited-memory BFGS on a barrier problem. Trace objectives are reported as
/// `trace_sign * value` so maximizers can record the quantity they ascend.
MinimizeResult minimize_lbfgs(const BarrierProblem& problem, const Vec& x0, const SolverOptions& options,
                              double trace_sign = 1.0);

}  // namespace dualvi
