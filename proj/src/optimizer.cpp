#include "dualvi/optimizer.hpp"

#include "dualvi/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace dualvi {

namespace {

constexpr int kMaxExpansions = 10;
// Relative size of objective differences treated as roundoff.
constexpr double kValueNoise = 1e-10;
// Consecutive iterations with a roundoff-sized change before giving up.
constexpr int kStallIterations = 5;

// Trial points may still trip an overflow guard or an indefinite
// factorization (baselines); those count as rejected trials.
bool try_value(const BarrierProblem& problem, const Vec& x, double& out) {
  try {
    out = problem.value(x);
  } catch (const std::domain_error&) {
    return false;
  } catch (const FactorizationError&) {
    return false;
  }
  return std::isfinite(out);
}

using Preconditioner = std::function<Vec(const Vec&)>;

Vec apply_precond(const Preconditioner& p, const Vec& v) { return p ? p(v) : v; }

struct CurvaturePair {
  Vec s;
  Vec y;
  double rho;
  /// s^T y / y^T H0 y, the scale of the initial inverse Hessian.
  double gamma;
};

Vec two_loop(const std::deque<CurvaturePair>& memory, const Vec& g, const Preconditioner& precond) {
  Vec q = -g;
  std::vector<double> a(memory.size());
  for (std::size_t i = memory.size(); i-- > 0;) {
    a[i] = memory[i].rho * memory[i].s.dot(q);
    q -= a[i] * memory[i].y;
  }
  q = memory.back().gamma * apply_precond(precond, q);
  for (std::size_t i = 0; i < memory.size(); ++i) {
    const double b = memory[i].rho * memory[i].y.dot(q);
    q += (a[i] - b) * memory[i].s;
  }
  return q;
}

}  // namespace

void SolverOptions::validate() const {
  if (max_iterations < 0) throw std::invalid_argument("max_iterations must be >= 0");
  if (!(gradient_tolerance > 0.0)) throw std::invalid_argument("gradient_tolerance must be > 0");
  if (!(initial_step > 0.0)) throw std::invalid_argument("initial_step must be > 0");
  if (!(feasibility_margin > 0.0 && feasibility_margin < 1.0)) {
    throw std::invalid_argument("feasibility_margin must lie in (0, 1)");
  }
  if (history < 1) throw std::invalid_argument("history must be >= 1");
  if (!(armijo > 0.0 && armijo < curvature && curvature < 1.0)) {
    throw std::invalid_argument("line search constants need 0 < armijo < curvature < 1");
  }
  if (!(min_step > 0.0)) throw std::invalid_argument("min_step must be > 0");
}

std::string to_string(Termination t) {
  switch (t) {
    case Termination::Converged: return "converged";
    case Termination::IterationCap: return "iteration_cap";
    case Termination::LineSearchFailure: return "line_search_failure";
    case Termination::Stalled: return "stalled";
  }
  return "unknown";
}

void write_trace_csv(std::ostream& out, const Trace& trace) {
  out << "iter,elapsed_sec,objective,grad_inf_norm\n";
  out << std::setprecision(17);
  for (const TraceRecord& r : trace) {
    out << r.iter << ',' << r.elapsed_sec << ',' << r.objective << ',' << r.grad_inf_norm << '\n';
  }
}

double initial_step_cap(const BarrierProblem& problem, const Vec& x, const Vec& direction, double initial_step,
                        double feasibility_margin) {
  const double boundary = problem.max_feasible_step(x, direction);
  return (1.0 - feasibility_margin) * std::min(boundary, initial_step);
}

LineSearchResult feasible_line_search(const BarrierProblem& problem, const Vec& x, const Evaluation& at_x,
                                      const Vec& direction, const SolverOptions& options) {
  LineSearchResult result;
  const double slope = at_x.gradient.dot(direction);
  if (!(slope < 0.0)) return result;

  const double boundary = problem.max_feasible_step(x, direction);
  const double ceiling = (1.0 - options.feasibility_margin) * boundary;
  double step = (1.0 - options.feasibility_margin) * std::min(boundary, options.initial_step);
  bool backtracked = false;
  bool evaluated = false;
  double trial_value = 0.0;
  const double noise = kValueNoise * std::max(1.0, std::abs(at_x.value));
  for (;;) {
    if (step < options.min_step) return result;
    ++result.evaluations;
    const Vec trial = x + step * direction;
    if (try_value(problem, trial, trial_value)) {
      if (trial_value <= at_x.value + options.armijo * step * slope) break;
      // Near the optimum of a stiff problem the decrease Armijo asks for is
      // below roundoff; fall back to the approximate Wolfe test (Hager-Zhang),
      // which trusts the directional derivative instead.
      if (trial_value <= at_x.value && at_x.value - trial_value <= noise) {
        Evaluation e = problem.evaluate(trial);
        if (e.gradient.dot(direction) <= (1.0 - 2.0 * options.armijo) * -slope) {
          result.eval = std::move(e);
          evaluated = true;
          backtracked = true;
          break;
        }
      }
    }
    step *= 0.5;
    backtracked = true;
  }

  result.accepted = true;
  result.step = step;
  result.x = x + step * direction;
  if (!evaluated) result.eval = problem.evaluate(result.x);

  if (!backtracked) {
    for (int i = 0; i < kMaxExpansions; ++i) {
      if (result.eval.gradient.dot(direction) >= options.curvature * slope) break;
      const double longer = std::min(2.0 * step, ceiling);
      if (!(longer > step)) break;
      ++result.evaluations;
      if (!try_value(problem, x + longer * direction, trial_value) ||
          trial_value > at_x.value + options.armijo * longer * slope || trial_value > result.eval.value) {
        break;
      }
      step = longer;
      result.step = step;
      result.x = x + step * direction;
      result.eval = problem.evaluate(result.x);
    }
  }
  return result;
}

MinimizeResult minimize_lbfgs(const BarrierProblem& problem, const Vec& x0, const SolverOptions& options,
                              double trace_sign) {
  options.validate();
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  MinimizeResult out;
  out.x = x0;
  out.eval = problem.evaluate(x0);
  auto record = [&](int iter) {
    const double gnorm = out.eval.gradient.size() ? out.eval.gradient.lpNorm<Eigen::Infinity>() : 0.0;
    out.trace.push_back({iter, elapsed(), trace_sign * out.eval.value, gnorm});
    return gnorm;
  };
  double gnorm = record(0);

  Preconditioner precond;
  if (options.precondition && out.x.size() > 0) precond = problem.preconditioner(x0);
  auto fallback_direction = [&] {
    return precond ? Vec(-precond(out.eval.gradient)) : Vec(-out.eval.gradient / gnorm);
  };

  std::deque<CurvaturePair> memory;
  int stalled = 0;
  double best_gnorm = gnorm;
  out.termination = Termination::IterationCap;
  for (int iter = 1; iter <= options.max_iterations; ++iter) {
    if (gnorm <= options.gradient_tolerance) break;

    Vec direction;
    if (!memory.empty()) {
      direction = two_loop(memory, out.eval.gradient, precond);
      if (!(direction.dot(out.eval.gradient) < 0.0)) {
        memory.clear();
      }
    }
    if (memory.empty()) direction = fallback_direction();

    LineSearchResult ls = feasible_line_search(problem, out.x, out.eval, direction, options);
    if (!ls.accepted && !memory.empty()) {
      // retry once along steepest descent with a fresh memory
      memory.clear();
      direction = fallback_direction();
      ls = feasible_line_search(problem, out.x, out.eval, direction, options);
    }
    if (!ls.accepted) {
      out.termination = Termination::LineSearchFailure;
      return out;
    }

    Vec s = ls.x - out.x;
    Vec y = ls.eval.gradient - out.eval.gradient;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (static_cast<int>(memory.size()) == options.history) memory.pop_front();
      const double yhy = y.dot(apply_precond(precond, y));
      memory.push_back({std::move(s), std::move(y), 1.0 / sy, sy / yhy});
    }
    const double change = std::abs(ls.eval.value - out.eval.value);
    const double ulp_scale = 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(out.eval.value));
    stalled = change <= ulp_scale ? stalled + 1 : 0;
    out.x = std::move(ls.x);
    out.eval = std::move(ls.eval);
    out.iterations = iter;
    gnorm = record(iter);
    // tiny value changes are fine while the gradient keeps shrinking
    if (gnorm < best_gnorm) {
      best_gnorm = gnorm;
      stalled = 0;
    }
    if (stalled >= kStallIterations && gnorm > options.gradient_tolerance) {
      out.termination = Termination::Stalled;
      return out;
    }
  }
  if (gnorm <= options.gradient_tolerance) out.termination = Termination::Converged;
  return out;
}

}  // namespace dualvi
