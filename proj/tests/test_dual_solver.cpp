#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dualvi/dual.hpp"
#include "dualvi/errors.hpp"
#include "dualvi/tasks.hpp"
#include "support/oracles.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

using namespace dualvi;
namespace dt = dualvi::testing;

namespace {

LgmModel scalar_poisson() {
  return LgmModel(Prior::from_covariance(Vec::Zero(1), Mat::Identity(1, 1)), Design::identity(1), {Site::poisson(1)});
}

Vec v1(double a) { return Vec::Constant(1, a); }

const std::vector<SiteKind> kMixed{SiteKind::Poisson, SiteKind::BernoulliLogit, SiteKind::MultiLogit,
                                   SiteKind::StochasticVolatility};
const std::vector<SiteKind> kLogConcave{SiteKind::Poisson, SiteKind::BernoulliLogit, SiteKind::MultiLogit};

dt::InstanceSpec mixed_spec(std::mt19937_64& rng, const std::vector<SiteKind>& pool, int max_rows,
                            bool identity) {
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  dt::InstanceSpec spec;
  int rows = 0;
  const int target = std::uniform_int_distribution<int>(2, max_rows)(rng);
  while (true) {
    SiteKind k = pool[pick(rng)];
    const int d = k == SiteKind::MultiLogit ? 2 : 1;
    if (rows + d > target) break;
    spec.kinds.push_back(k);
    rows += d;
  }
  if (spec.kinds.empty()) spec.kinds.push_back(SiteKind::Poisson), rows = 1;
  spec.identity_design = identity;
  spec.latent_dim = identity ? rows : std::uniform_int_distribution<int>(1, 6)(rng);
  return spec;
}

// Checks feasibility of every point the optimizer asks about.
class RecordingProblem : public BarrierProblem {
 public:
  explicit RecordingProblem(const LgmModel& m) : inner_(m), model_(m) {}
  Evaluation evaluate(const Vec& x) const override {
    record(x);
    return inner_.evaluate(x);
  }
  double value(const Vec& x) const override {
    record(x);
    return inner_.value(x);
  }
  double max_feasible_step(const Vec& x, const Vec& d) const override { return inner_.max_feasible_step(x, d); }
  mutable int evaluations = 0;
  mutable int infeasible = 0;

 private:
  void record(const Vec& x) const {
    ++evaluations;
    if (!model_.lambda_feasible(x)) ++infeasible;
  }
  DualProblem inner_;
  LgmModel model_;
};

}  // namespace

TEST_CASE("scalar dual objective and gradient by hand") {
  const LgmModel m = scalar_poisson();
  CHECK(dual_objective(m, v1(1.0)) == doctest::Approx(-1.346574).epsilon(1e-6));
  CHECK(dual_objective(m, v1(2.0)) == doctest::Approx(0.5 - 0.5 * std::log(3.0) + 2.0 * (std::log(2.0) - 1.0)).epsilon(1e-12));
  CHECK(dual_gradient(m, v1(1.0))(0) == doctest::Approx(-0.25).epsilon(1e-12));
  CHECK(dual_gradient(m, v1(1e-10))(0) < -20.0);
  CHECK_THROWS_AS(dual_objective(m, v1(0.0)), InfeasibleError);
  CHECK_THROWS_AS(dual_objective(m, Vec::Ones(2)), DimensionError);
}

TEST_CASE("assembled precision") {
  LgmModel m(Prior::from_covariance(Vec::Zero(2), Mat::Identity(2, 2)), Design::identity(2),
             {Site::poisson(1), Site::poisson(1)});
  const Mat l = assemble_a(m, (Vec(2) << 1.0, 3.0).finished()).dense_lower();
  CHECK(l(0, 0) == doctest::Approx(std::sqrt(2.0)));
  CHECK(l(1, 1) == doctest::Approx(2.0));
  CHECK(l(1, 0) == doctest::Approx(0.0));

  std::mt19937_64 rng(2);
  Mat cov = dt::random_spd(rng, 2);
  LgmModel p(Prior::from_covariance(Vec::Zero(2), cov), Design::identity(2), {Site::poisson(1), Site::poisson(1)});
  const Mat l0 = assemble_a(p, Vec::Zero(2)).dense_lower();
  CHECK((l0 * l0.transpose() - cov.inverse()).norm() <= 1e-10);
}

TEST_CASE("reduced dual matches the dense definition") {
  std::mt19937_64 rng(101);
  for (int rep = 0; rep < 30; ++rep) {
    const LgmModel m = dt::random_instance(rng, mixed_spec(rng, kMixed, 8, rep % 2 == 0));
    const Vec lambda = dt::random_feasible_lambda(rng, m);
    const double oracle = dt::dense_reduced_dual(m, lambda);
    CHECK(std::abs(dual_objective(m, lambda) - oracle) <= 1e-10 * std::max(1.0, std::abs(oracle)));
  }
  std::vector<Edge> edges{{0, 1}, {1, 2}, {2, 0}};
  GmrfParams params;
  params.k_u = 1.5;
  params.k_v = 3.0;
  const LgmModel g = build_gmrf_model(3, edges, params, {2, 0, 4});
  const Vec lambda = (Vec(3) << 0.5, 1.5, 2.5).finished();
  const double oracle = dt::dense_reduced_dual(g, lambda);
  CHECK(std::abs(dual_objective(g, lambda) - oracle) <= 1e-8 * std::max(1.0, std::abs(oracle)));
}

TEST_CASE("dual gradient matches central differences") {
  std::mt19937_64 rng(202);
  for (int rep = 0; rep < 20; ++rep) {
    const LgmModel m = dt::random_instance(rng, mixed_spec(rng, kMixed, 12, rep % 3 == 0));
    const Vec lambda = dt::random_feasible_lambda(rng, m);
    const Vec g = dual_gradient(m, lambda);
    for (Index i = 0; i < lambda.size(); ++i) {
      const double h = 1e-6 * (1.0 + std::abs(lambda(i)));
      Vec up = lambda, down = lambda;
      up(i) += h;
      down(i) -= h;
      const double fd = (dual_objective(m, up) - dual_objective(m, down)) / (2.0 * h);
      CHECK(std::abs(g(i) - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("dual is strictly convex") {
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> unit(0.05, 0.95);
  for (int rep = 0; rep < 30; ++rep) {
    const LgmModel m = dt::random_instance(rng, mixed_spec(rng, kMixed, 8, true));
    const Vec a = dt::random_feasible_lambda(rng, m);
    const Vec b = dt::random_feasible_lambda(rng, m);
    const double t = unit(rng);
    const double mid = dual_objective(m, t * a + (1 - t) * b);
    CHECK(mid < t * dual_objective(m, a) + (1 - t) * dual_objective(m, b) - 1e-12);
  }
}

TEST_CASE("initial step cap") {
  LgmModel two(Prior::from_covariance(Vec::Zero(2), Mat::Identity(2, 2)), Design::identity(2),
               {Site::poisson(1), Site::poisson(1)});
  DualProblem p(two);
  const Vec lambda = (Vec(2) << 0.5, 2.0).finished();
  CHECK(initial_step_cap(p, lambda, -Vec::Ones(2), 1.0, 0.01) == doctest::Approx(0.495));
  // no binding constraint: only the margin applies
  CHECK(initial_step_cap(p, lambda, Vec::Ones(2), 1.0, 0.01) == doctest::Approx(0.99));

  LgmModel bern(Prior::from_covariance(Vec::Zero(1), Mat::Identity(1, 1)), Design::identity(1), {Site::bernoulli(1)});
  CHECK(initial_step_cap(DualProblem(bern), v1(0.9), v1(1.0), 1.0, 0.01) == doctest::Approx(0.099));
}

TEST_CASE("line search stays feasible and decreases") {
  LgmModel bern(Prior::from_covariance(Vec::Zero(1), Mat::Identity(1, 1)), Design::identity(1), {Site::bernoulli(1)});
  DualProblem p(bern);
  const Vec x = v1(0.9);
  const Evaluation at = p.evaluate(x);
  const Vec d = -at.gradient;
  const LineSearchResult r = feasible_line_search(p, x, at, d, SolverOptions{});
  REQUIRE(r.accepted);
  CHECK(bern.lambda_feasible(r.x));
  CHECK(r.eval.value <= at.value + 1e-4 * r.step * at.gradient.dot(d));
}

TEST_CASE("solver options validation") {
  SolverOptions o;
  CHECK_NOTHROW(o.validate());
  o.feasibility_margin = 1.0;
  CHECK_THROWS(o.validate());
  o = SolverOptions{};
  o.gradient_tolerance = 0.0;
  CHECK_THROWS(o.validate());
  o = SolverOptions{};
  o.max_iterations = -1;
  CHECK_THROWS(o.validate());
}

TEST_CASE("scalar instance reaches the bisection optimum") {
  const LgmModel m = scalar_poisson();
  const auto ref = dt::scalar_poisson_optimum();
  CHECK(ref.lambda == doctest::Approx(1.1213).epsilon(1e-4));
  const FitResult fit = fit_dual(m);
  CHECK(fit.termination == Termination::Converged);
  CHECK(fit.lambda(0) == doctest::Approx(ref.lambda).epsilon(1e-6));
  CHECK(fit.posterior.mean(0) == doctest::Approx(ref.mean).epsilon(1e-6));
  CHECK(fit.posterior.factor.latent_variances()(0) == doctest::Approx(ref.variance).epsilon(1e-6));
  CHECK(fit.duality_gap <= 1e-8);
  CHECK(duality_gap(m, fit) <= 1e-8);
  CHECK(duality_gap(m, fit.lambda) <= 1e-8);
}

TEST_CASE("primal recovery") {
  const LgmModel m = scalar_poisson();
  const PosteriorGaussian at_y = recover_primal(m, v1(1.0));
  CHECK(at_y.mean(0) == doctest::Approx(0.0));
  CHECK(at_y.site_var(0) == doctest::Approx(0.5));

  LgmModel two(Prior::from_covariance(Vec::Zero(1), Mat::Identity(1, 1)), Design::identity(1), {Site::poisson(2)});
  const PosteriorGaussian near_zero = recover_primal(two, v1(1e-12));
  CHECK(near_zero.mean(0) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(near_zero.site_var(0) == doctest::Approx(1.0).epsilon(1e-9));

  std::mt19937_64 rng(17);
  const LgmModel r = dt::random_instance(rng, mixed_spec(rng, kLogConcave, 6, false));
  const PosteriorGaussian q = recover_primal(r, dt::random_feasible_lambda(rng, r));
  CHECK((q.site_mean - r.design().times(q.mean)).norm() <= 1e-12);
  CHECK((q.site_var.array() > 0.0).all());
}

TEST_CASE("primal lower bound") {
  const LgmModel m = scalar_poisson();
  PrecisionFactor prior_factor(m, Vec::Zero(1));
  auto [sm, sv] = project_site_moments(m, Vec::Zero(1), prior_factor);
  const PosteriorGaussian at_prior{Vec::Zero(1), Vec::Zero(1), prior_factor, sm, sv};
  CHECK(primal_lower_bound(m, at_prior) == doctest::Approx(-std::exp(0.5)).epsilon(1e-12));

  std::mt19937_64 rng(44);
  for (int rep = 0; rep < 10; ++rep) {
    const LgmModel r = dt::random_instance(rng, mixed_spec(rng, kMixed, 6, rep % 2 == 0));
    const PosteriorGaussian q = recover_primal(r, dt::random_feasible_lambda(rng, r));
    const Mat v = q.factor.dense_lower();
    const Mat cov = (v * v.transpose()).inverse();
    CHECK(primal_lower_bound(r, q) == doctest::Approx(dt::dense_elbo(r, q.mean, cov)).epsilon(1e-9));
  }
}

TEST_CASE("strong duality and stationarity on random log-concave instances") {
  std::mt19937_64 rng(505);
  for (int rep = 0; rep < 10; ++rep) {
    const LgmModel m = dt::random_instance(rng, mixed_spec(rng, kLogConcave, 8, rep % 2 == 0));
    const FitResult fit = fit_dual(m);
    CHECK(fit.termination == Termination::Converged);
    CHECK(fit.duality_gap <= 1e-6);
    CHECK(fit.lower_bound <= fit.objective + fit.objective_constant + 1e-12);
    // Sigma^{-1} (m - mu) + W^T alpha = 0
    const Vec resid = m.prior().precision_times(fit.posterior.mean - m.prior().mean()) +
                      m.design().transpose_times(m.alpha(fit.lambda));
    CHECK(resid.lpNorm<Eigen::Infinity>() <= 1e-8);
    for (std::size_t i = 1; i < fit.trace.size(); ++i) CHECK(fit.trace[i].objective <= fit.trace[i - 1].objective);
    CHECK(fit.trace.front().iter == 0);
  }
}

TEST_CASE("weak duality holds away from the optimum") {
  std::mt19937_64 rng(606);
  for (int rep = 0; rep < 20; ++rep) {
    const LgmModel m = dt::random_instance(rng, mixed_spec(rng, kMixed, 8, rep % 2 == 0));
    const Vec lambda = dt::random_feasible_lambda(rng, m);
    const double full = dual_objective(m, lambda) + dual_constant(m);
    CHECK(full >= primal_lower_bound(m, recover_primal(m, lambda)) - 1e-10);
  }
}

TEST_CASE("early stopping leaves a visible gap") {
  std::vector<Site> sites;
  for (int c : {0, 4, 7, 1, 9, 3, 0, 6}) sites.push_back(Site::poisson(c));
  std::mt19937_64 rng(7);
  LgmModel m(Prior::from_covariance(Vec::Zero(8), dt::random_spd(rng, 8)), Design::identity(8), sites);
  SolverOptions one;
  one.max_iterations = 1;
  const FitResult fit = fit_dual(m, one);
  CHECK(fit.termination == Termination::IterationCap);
  CHECK(fit.iterations == 1);
  CHECK(fit.trace.size() == 2);
  CHECK(fit.duality_gap > 1e-3);
}

TEST_CASE("iterates never leave the feasible set") {
  std::mt19937_64 rng(707);
  for (int rep = 0; rep < 10; ++rep) {
    const LgmModel m = dt::random_instance(rng, mixed_spec(rng, kMixed, 10, false));
    RecordingProblem p(m);
    const MinimizeResult r = minimize_lbfgs(p, m.default_lambda(), SolverOptions{});
    CHECK(p.evaluations > 0);
    CHECK(p.infeasible == 0);
    CHECK(m.lambda_feasible(r.x));
  }
}

TEST_CASE("warm start and explicit initialization") {
  const LgmModel m = scalar_poisson();
  const FitResult warm = fit_dual(m, SolverOptions{}, v1(1.12));
  CHECK(warm.lambda(0) == doctest::Approx(dt::scalar_poisson_optimum().lambda).epsilon(1e-6));
  CHECK_THROWS_AS(fit_dual(m, SolverOptions{}, v1(-1.0)), InfeasibleError);
}

TEST_CASE("model without sites returns the prior") {
  std::mt19937_64 rng(1);
  const Mat cov = dt::random_spd(rng, 3);
  const Vec mu = (Vec(3) << 0.1, -0.2, 0.3).finished();
  LgmModel m(Prior::from_covariance(mu, cov), Design::dense(Mat(0, 3)), {});
  const FitResult fit = fit_dual(m);
  CHECK(fit.iterations == 0);
  CHECK(fit.termination == Termination::Converged);
  CHECK(fit.posterior.mean == mu);
  CHECK((fit.posterior.factor.latent_variances() - Vec(cov.diagonal())).norm() <= 1e-12);
  CHECK(fit.duality_gap == 0.0);
}

TEST_CASE("trace csv format") {
  const FitResult fit = fit_dual(scalar_poisson());
  std::ostringstream out;
  write_trace_csv(out, fit.trace);
  std::istringstream in(out.str());
  std::string header;
  std::getline(in, header);
  CHECK(header == "iter,elapsed_sec,objective,grad_inf_norm");
  CHECK(to_string(Termination::Converged) == "converged");
}

TEST_CASE("dual preconditioner is symmetric positive definite") {
  std::mt19937_64 rng(91);
  for (bool identity : {true, false}) {
    dt::InstanceSpec spec;
    spec.kinds = {SiteKind::Poisson, SiteKind::BernoulliLogit, SiteKind::MultiLogit, SiteKind::StochasticVolatility};
    spec.latent_dim = identity ? 5 : 3;
    spec.identity_design = identity;
    const LgmModel m = dt::random_instance(rng, spec);
    const DualProblem p(m);
    const auto precond = p.preconditioner(m.default_lambda());
    REQUIRE(precond);
    const Index n = m.num_rows();
    Mat dense(n, n);
    for (Index j = 0; j < n; ++j) dense.col(j) = precond(Vec::Unit(n, j));
    CHECK((dense - dense.transpose()).norm() <= 1e-10 * dense.norm());
    CHECK(Eigen::SelfAdjointEigenSolver<Mat>(dense).eigenvalues().minCoeff() > 0.0);
  }
}

TEST_CASE("stiff intrinsic GMRF converges at the default jitter") {
  const GmrfData data = synth_gmrf_dataset(6, 2.0, 20.0, 1.0, 3);
  GmrfParams params;
  params.k_u = 2.0;
  params.k_v = 20.0;
  params.offset = 1.0;
  const LgmModel m = build_gmrf_model(data.num_nodes, data.edges, params, data.counts);
  const FitResult fit = fit_dual(m);
  CHECK(fit.termination == Termination::Converged);
  CHECK(fit.iterations <= 40);
  CHECK(std::abs(fit.duality_gap) <= 1e-6);

  SolverOptions plain;
  plain.precondition = false;
  plain.max_iterations = 100;
  const FitResult slow = fit_dual(m, plain);
  CHECK(slow.lower_bound <= fit.lower_bound + 1e-9);
  for (std::size_t i = 1; i < slow.trace.size(); ++i) CHECK(slow.trace[i].objective <= slow.trace[i - 1].objective);
}

namespace {

// Value flat to roundoff, gradient stuck above any tolerance.
class FlatProblem : public BarrierProblem {
 public:
  Evaluation evaluate(const Vec& x) const override { return {1e8, Vec::Constant(x.size(), 1e-3)}; }
  double max_feasible_step(const Vec&, const Vec&) const override { return std::numeric_limits<double>::infinity(); }
};

}  // namespace

TEST_CASE("optimizer reports a stall instead of running to the cap") {
  const MinimizeResult r = minimize_lbfgs(FlatProblem(), Vec::Zero(2), SolverOptions{});
  CHECK(r.termination == Termination::Stalled);
  CHECK(r.iterations < 10);
  CHECK(to_string(r.termination) == "stalled");
}
