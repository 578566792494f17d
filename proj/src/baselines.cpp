#include "dualvi/baselines.hpp"

#include "dualvi/errors.hpp"

#include <chrono>
#include <cmath>
#include <limits>

namespace dualvi {

namespace {

struct SiteTerms {
  double value = 0.0;
  Vec grad_h;
  Vec grad_rho;
};

SiteTerms site_terms(const LgmModel& model, const Vec& site_mean, const Vec& site_var, bool with_grad) {
  SiteTerms t;
  if (with_grad) {
    t.grad_h.resize(model.num_rows());
    t.grad_rho.resize(model.num_rows());
  }
  for (std::size_t i = 0; i < model.sites().size(); ++i) {
    const Site& s = model.sites()[i];
    const Index off = model.site_offset(i);
    auto h = site_mean.segment(off, s.dim());
    auto rho = site_var.segment(off, s.dim());
    t.value += s.value(h, rho) + s.log_normalizer();
    if (with_grad) {
      auto [gh, grho] = s.grad(h, rho);
      t.grad_h.segment(off, s.dim()) = gh;
      t.grad_rho.segment(off, s.dim()) = grho;
    }
  }
  return t;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

// ---------------------------------------------------------------------------
// Opper-Archambeau

Vec OpperArchProblem::pack(const Vec& mean, const Vec& lambda) const {
  Vec x(mean.size() + lambda.size());
  x << mean, lambda;
  return x;
}

Evaluation OpperArchProblem::evaluate(const Vec& x) const {
  const Index l = model_.latent_dim();
  const Index n = model_.num_rows();
  const Vec mean = x.head(l);
  const Vec lambda = x.tail(n);
  if ((lambda.array() <= 0.0).any()) throw InfeasibleError("Opper-Archambeau needs lambda > 0");

  PrecisionFactor factor(model_, lambda);
  const Mat p = factor.site_covariance();
  const Vec site_var = p.diagonal();
  const Vec site_mean = model_.design().times(mean);
  const Vec diff = mean - model_.prior().mean();
  const Vec prec_diff = model_.prior().precision_times(diff);

  SiteTerms t = site_terms(model_, site_mean, site_var, true);
  const double bound = 0.5 * (-factor.log_det_ratio() + lambda.dot(site_var) - diff.dot(prec_diff)) - t.value;

  Vec grad_m = -prec_diff - Vec(model_.design().transpose_times(t.grad_h));
  Vec grad_lambda = p.cwiseProduct(p) * (t.grad_rho - 0.5 * lambda);
  return {-bound, -pack(grad_m, grad_lambda)};
}

double OpperArchProblem::value(const Vec& x) const {
  const Index l = model_.latent_dim();
  const Index n = model_.num_rows();
  const Vec mean = x.head(l);
  const Vec lambda = x.tail(n);
  if ((lambda.array() <= 0.0).any()) throw InfeasibleError("Opper-Archambeau needs lambda > 0");
  PrecisionFactor factor(model_, lambda);
  const Vec site_var = factor.site_variances();
  const Vec site_mean = model_.design().times(mean);
  const Vec diff = mean - model_.prior().mean();
  SiteTerms t = site_terms(model_, site_mean, site_var, false);
  const double quad = diff.dot(Vec(model_.prior().precision_times(diff)));
  return -(0.5 * (-factor.log_det_ratio() + lambda.dot(site_var) - quad) - t.value);
}

double OpperArchProblem::max_feasible_step(const Vec& x, const Vec& direction) const {
  const Index l = model_.latent_dim();
  double step = std::numeric_limits<double>::infinity();
  for (Index i = l; i < x.size(); ++i) {
    if (direction(i) < 0.0) step = std::min(step, x(i) / -direction(i));
  }
  return step;
}

BaselineResult fit_opper_arch(const LgmModel& model, const SolverOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  OpperArchProblem problem(model);
  MinimizeResult run = minimize_lbfgs(problem, problem.pack(model.prior().mean(), model.default_lambda()), options, -1.0);

  BaselineResult out;
  out.mean = run.x.head(model.latent_dim());
  out.lambda = run.x.tail(model.num_rows());
  out.latent_var = PrecisionFactor(model, out.lambda).latent_variances();
  out.objective = -run.eval.value;
  out.iterations = run.iterations;
  out.trace = std::move(run.trace);
  out.termination = run.termination;
  out.wall_sec = seconds_since(start);
  return out;
}

// ---------------------------------------------------------------------------
// Cholesky-factor primal

CholeskyPrimalProblem::CholeskyPrimalProblem(LgmModel model) : model_(std::move(model)) {
  if (model_.latent_dim() > kMaxLatentDim) {
    throw DomainError("Cholesky primal ascent needs O(L^2) parameters; refusing L = " +
                      std::to_string(model_.latent_dim()) + " > " + std::to_string(kMaxLatentDim));
  }
  precision_ = model_.prior().dense_precision();
  precision_ = 0.5 * (precision_ + precision_.transpose());
}

Vec CholeskyPrimalProblem::pack(const Vec& mean, const Mat& chol) const {
  const Index l = model_.latent_dim();
  Vec x(l + l * (l + 1) / 2);
  x.head(l) = mean;
  Index k = l;
  for (Index j = 0; j < l; ++j) {
    for (Index i = j; i < l; ++i) x(k++) = chol(i, j);
  }
  return x;
}

Mat CholeskyPrimalProblem::unpack_chol(const Vec& x) const {
  const Index l = model_.latent_dim();
  Mat c = Mat::Zero(l, l);
  Index k = l;
  for (Index j = 0; j < l; ++j) {
    for (Index i = j; i < l; ++i) c(i, j) = x(k++);
  }
  return c;
}

Evaluation CholeskyPrimalProblem::evaluate(const Vec& x) const {
  const Index l = model_.latent_dim();
  const Vec mean = unpack_mean(x);
  const Mat c = unpack_chol(x);
  if ((c.diagonal().array() <= 0.0).any()) throw InfeasibleError("Cholesky factor needs a positive diagonal");

  const Mat w = model_.design().to_dense();
  const Mat wc = w * c;
  const Vec site_var = wc.rowwise().squaredNorm();
  const Vec site_mean = w * mean;
  const Vec diff = mean - model_.prior().mean();
  const Vec prec_diff = precision_ * diff;
  const Mat prec_c = precision_ * c;

  SiteTerms t = site_terms(model_, site_mean, site_var, true);
  const double log_det_v = 2.0 * c.diagonal().array().log().sum();
  const double bound = 0.5 * (log_det_v - model_.prior().log_det_cov() - (c.array() * prec_c.array()).sum() -
                              diff.dot(prec_diff) + static_cast<double>(l)) -
                       t.value;

  Vec grad_m = -prec_diff - w.transpose() * t.grad_h;
  Mat grad_c = -prec_c - 2.0 * w.transpose() * (t.grad_rho.asDiagonal() * wc);
  grad_c.diagonal() += c.diagonal().cwiseInverse();
  return {-bound, -pack(grad_m, grad_c)};
}

double CholeskyPrimalProblem::max_feasible_step(const Vec& x, const Vec& direction) const {
  const Index l = model_.latent_dim();
  double step = std::numeric_limits<double>::infinity();
  Index k = l;
  for (Index j = 0; j < l; ++j) {
    if (direction(k) < 0.0) step = std::min(step, x(k) / -direction(k));
    k += l - j;
  }
  return step;
}

BaselineResult fit_primal_cholesky(const LgmModel& model, const SolverOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  CholeskyPrimalProblem problem(model);
  MinimizeResult run =
      minimize_lbfgs(problem, problem.pack(model.prior().mean(), model.prior().cov_cholesky()), options, -1.0);

  BaselineResult out;
  out.mean = problem.unpack_mean(run.x);
  out.chol_v = problem.unpack_chol(run.x);
  out.latent_var = out.chol_v.rowwise().squaredNorm();
  out.objective = -run.eval.value;
  out.iterations = run.iterations;
  out.trace = std::move(run.trace);
  out.termination = run.termination;
  out.wall_sec = seconds_since(start);
  return out;
}

}  // namespace dualvi
