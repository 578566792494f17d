#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dualvi/errors.hpp"
#include "dualvi/sites.hpp"
#include "support/oracles.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

using namespace dualvi;
using dualvi::testing::central_difference;
using dualvi::testing::numeric_conjugate;

namespace {

Vec v1(double a) { return Vec::Constant(1, a); }
Vec v2(double a, double b) { return (Vec(2) << a, b).finished(); }

bool close_rel(double a, double b, double tol) { return std::abs(a - b) <= tol * std::max(1.0, std::abs(b)); }

const SiteKind kAllKinds[] = {SiteKind::Poisson, SiteKind::BernoulliLogit, SiteKind::MultiLogit,
                              SiteKind::StochasticVolatility};

}  // namespace

TEST_CASE("bound values") {
  CHECK(Site::poisson(1).value(v1(0), v1(2)) == doctest::Approx(std::exp(1.0)).epsilon(1e-12));
  CHECK(Site::bernoulli(1).value(v1(0), v1(0)) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(Site::multi_logit(3, 0).value(v2(0, 0), v2(0, 0)) == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(Site::stoch_vol(1).value(v1(0), v1(0)) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("multi-logit observation is one-hot with the last class as reference") {
  CHECK(Site::multi_logit(3, 0).observation() == v2(1, 0));
  CHECK(Site::multi_logit(3, 1).observation() == v2(0, 1));
  CHECK(Site::multi_logit(3, 2).observation() == v2(0, 0));
  CHECK(Site::multi_logit(3, 2).label() == 2);
  CHECK(Site::multi_logit(4, 1).dim() == 3);
}

TEST_CASE("bound gradients at hand-checked points") {
  auto [gh, gr] = Site::poisson(1).grad(v1(0), v1(0));
  CHECK(gh(0) == doctest::Approx(0.0));
  CHECK(gr(0) == doctest::Approx(0.5));
  auto [bh, br] = Site::bernoulli(0).grad(v1(0), v1(0));
  CHECK(bh(0) == doctest::Approx(0.5));
  CHECK(br(0) == doctest::Approx(0.25));
}

TEST_CASE("bound gradients match central differences") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal;
  for (SiteKind kind : kAllKinds) {
    for (int rep = 0; rep < 100; ++rep) {
      const Site s = dualvi::testing::random_site(rng, kind);
      const int d = s.dim();
      Vec x(2 * d);
      for (Index i = 0; i < x.size(); ++i) x(i) = normal(rng);
      auto f = [&](const Vec& p) { return s.value(p.head(d), p.tail(d)); };
      const Vec fd = central_difference(f, x, 1e-5);
      auto [gh, gr] = s.grad(x.head(d), x.tail(d));
      for (int k = 0; k < d; ++k) {
        CHECK(close_rel(gh(k), fd(k), 1e-6));
        CHECK(close_rel(gr(k), fd(d + k), 1e-6));
      }
    }
  }
}

TEST_CASE("conjugate values") {
  CHECK(Site::poisson(0).conjugate(v1(1)) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(std::abs(Site::poisson(0).conjugate(v1(std::numbers::e))) < 1e-12);
  CHECK(Site::bernoulli(1).conjugate(v1(0.5)) == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
  CHECK(Site::stoch_vol(2).conjugate(v1(2)) == doctest::Approx(-2.0).epsilon(1e-12));
  CHECK(Site::multi_logit(3, 0).conjugate(v2(1.0 / 3, 1.0 / 3)) == doctest::Approx(-std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("conjugate gradients") {
  CHECK(std::abs(Site::poisson(2).conjugate_grad(v1(1))(0)) < 1e-15);
  CHECK(std::abs(Site::bernoulli(0).conjugate_grad(v1(0.5))(0)) < 1e-15);
  CHECK(Site::multi_logit(3, 1).conjugate_grad(v2(1.0 / 3, 1.0 / 3)).lpNorm<Eigen::Infinity>() < 1e-12);

  std::mt19937_64 rng(5);
  for (SiteKind kind : kAllKinds) {
    for (int rep = 0; rep < 100; ++rep) {
      const Site s = dualvi::testing::random_site(rng, kind);
      const LgmModel m(Prior::from_covariance(Vec::Zero(s.dim()), Mat::Identity(s.dim(), s.dim())),
                       Design::identity(s.dim()), {s});
      const Vec lambda = dualvi::testing::random_feasible_lambda(rng, m);
      auto f = [&](const Vec& l) { return s.conjugate(l); };
      const Vec fd = central_difference(f, lambda, 1e-7);
      const Vec g = s.conjugate_grad(lambda);
      for (int k = 0; k < s.dim(); ++k) CHECK(close_rel(g(k), fd(k), 1e-6));
    }
  }
}

TEST_CASE("alpha coupling") {
  CHECK(Site::poisson(3).alpha(v1(1))(0) == doctest::Approx(-2.0));
  CHECK(Site::stoch_vol(1.5).alpha(v1(0.2))(0) == doctest::Approx(0.3));
  const Vec a = Site::multi_logit(3, 0).alpha(v2(0.4, 0.1));
  CHECK(a(0) == doctest::Approx(-0.6));
  CHECK(a(1) == doctest::Approx(0.1));
  CHECK(Site::stoch_vol(1.5).alpha_slope() == -1.0);
  CHECK(Site::bernoulli(1).alpha_slope() == 1.0);
}

TEST_CASE("max feasible step") {
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(Site::poisson(1).max_feasible_step(v1(0.5), v1(-1)) == doctest::Approx(0.5));
  CHECK(Site::poisson(1).max_feasible_step(v1(0.5), v1(1)) == inf);
  CHECK(Site::bernoulli(1).max_feasible_step(v1(0.5), v1(2)) == doctest::Approx(0.25));
  CHECK(Site::bernoulli(1).max_feasible_step(v1(0.5), v1(-1)) == doctest::Approx(0.5));
  CHECK(Site::multi_logit(3, 0).max_feasible_step(v2(0.3, 0.4), v2(0.1, 0.1)) == doctest::Approx(1.5));
  CHECK(Site::multi_logit(3, 0).max_feasible_step(v2(0.3, 0.4), v2(-0.1, 0.0)) == doctest::Approx(3.0));
}

TEST_CASE("domain membership and errors") {
  CHECK(Site::poisson(1).contains(v1(0.1)));
  CHECK_FALSE(Site::poisson(1).contains(v1(0.0)));
  CHECK_FALSE(Site::bernoulli(1).contains(v1(1.0)));
  CHECK_FALSE(Site::multi_logit(3, 0).contains(v2(0.5, 0.5)));
  CHECK_FALSE(Site::multi_logit(3, 0).contains(v2(-0.1, 0.5)));
  CHECK_THROWS_AS(Site::poisson(1).conjugate(v1(0.0)), InfeasibleError);
  CHECK_THROWS_AS(Site::bernoulli(0).conjugate(v1(1.2)), InfeasibleError);
  CHECK_THROWS_AS(Site::multi_logit(3, 0).conjugate(v2(0.6, 0.6)), InfeasibleError);
  CHECK_THROWS_AS(Site::stoch_vol(0.0), DomainError);
  CHECK_THROWS_AS(Site::poisson(-1), DomainError);
  CHECK_THROWS_AS(Site::bernoulli(2), DomainError);
  CHECK_THROWS_AS(Site::multi_logit(3, 3), DomainError);
  CHECK_THROWS_AS(Site::poisson(1).value(v2(0, 0), v2(0, 0)), DimensionError);
  CHECK_THROWS_AS(Site::poisson(1).value(v1(800), v1(0)), DomainError);
}

TEST_CASE("overflow-safe log-sum-exp") {
  CHECK(Site::bernoulli(0).value(v1(1000), v1(0)) == doctest::Approx(1000.0));
  CHECK(Site::multi_logit(3, 2).value(v2(900, 899), v2(0, 0)) ==
        doctest::Approx(900.0 + std::log1p(std::exp(-1.0))).epsilon(1e-12));
}

TEST_CASE("numeric conjugate oracle spot values") {
  auto check = [](const Site& s, const Vec& lambda, double expected) {
    const auto o = numeric_conjugate(s, lambda);
    CHECK(o.converged);
    CHECK(std::abs(o.value - expected) <= 1e-5);
  };
  check(Site::poisson(2), v1(1.0), -1.0);
  check(Site::bernoulli(1), v1(0.5), -std::log(2.0));
  check(Site::stoch_vol(1), v1(0.5), -0.5);
  check(Site::multi_logit(3, 0), v2(1.0 / 3, 1.0 / 3), -std::log(3.0));
}

TEST_CASE("conjugate pairing and envelope identity on random feasible points") {
  std::mt19937_64 rng(17);
  for (SiteKind kind : kAllKinds) {
    for (int rep = 0; rep < 12; ++rep) {
      const Site s = dualvi::testing::random_site(rng, kind);
      const LgmModel m(Prior::from_covariance(Vec::Zero(s.dim()), Mat::Identity(s.dim(), s.dim())),
                       Design::identity(s.dim()), {s});
      const Vec lambda = dualvi::testing::random_feasible_lambda(rng, m);
      const auto o = numeric_conjugate(s, lambda);
      REQUIRE(o.converged);
      CHECK(std::abs(o.value - s.conjugate(lambda)) <= 1e-5);
      auto [gh, gr] = s.grad(o.h, o.rho);
      // stationarity of alpha h + lambda rho / 2 - f
      CHECK((gr - 0.5 * lambda).lpNorm<Eigen::Infinity>() <= 1e-4);
      CHECK((gh - s.alpha(lambda)).lpNorm<Eigen::Infinity>() <= 1e-4);
    }
  }
}

TEST_CASE("convexity probes") {
  std::mt19937_64 rng(23);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (SiteKind kind : kAllKinds) {
    for (int rep = 0; rep < 50; ++rep) {
      const Site s = dualvi::testing::random_site(rng, kind);
      const int d = s.dim();
      Vec a(2 * d), b(2 * d);
      for (Index i = 0; i < a.size(); ++i) {
        a(i) = normal(rng);
        b(i) = normal(rng);
      }
      const double t = unit(rng);
      auto f = [&](const Vec& p) { return s.value(p.head(d), p.tail(d)); };
      CHECK(f(t * a + (1 - t) * b) <= t * f(a) + (1 - t) * f(b) + 1e-10);

      const LgmModel m(Prior::from_covariance(Vec::Zero(d), Mat::Identity(d, d)), Design::identity(d), {s});
      const Vec la = dualvi::testing::random_feasible_lambda(rng, m);
      const Vec lb = dualvi::testing::random_feasible_lambda(rng, m);
      CHECK(s.conjugate(t * la + (1 - t) * lb) <= t * s.conjugate(la) + (1 - t) * s.conjugate(lb) + 1e-10);
    }
  }
}

TEST_CASE("conjugate gradient blows up toward the boundary") {
  double prev = 0.0;
  for (double eps : {1e-1, 1e-3, 1e-6, 1e-9}) {
    const double g = std::abs(Site::poisson(1).conjugate_grad(v1(eps))(0));
    CHECK(g > prev);
    prev = g;
  }
  prev = 0.0;
  for (double eps : {1e-1, 1e-3, 1e-6, 1e-9}) {
    const double g = std::abs(Site::bernoulli(1).conjugate_grad(v1(1.0 - eps))(0));
    CHECK(g > prev);
    prev = g;
  }
  prev = 0.0;
  for (double eps : {1e-1, 1e-3, 1e-6, 1e-9}) {
    const double g = Site::multi_logit(3, 0).conjugate_grad(v2(0.5, 0.5 - eps)).lpNorm<Eigen::Infinity>();
    CHECK(g > prev);
    prev = g;
  }
}

TEST_CASE("exact likelihoods") {
  CHECK(Site::poisson(2).log_likelihood(v1(0.0)) == doctest::Approx(-1.0 - std::log(2.0)));
  CHECK(Site::bernoulli(1).log_likelihood(v1(0.0)) == doctest::Approx(-std::log(2.0)));
  CHECK(Site::stoch_vol(1).log_likelihood(v1(0.0)) == doctest::Approx(-0.5 * std::log(2 * std::numbers::pi) - 0.5));
  CHECK(Site::multi_logit(3, 2).log_likelihood(v2(0, 0)) == doctest::Approx(-std::log(3.0)));
}

TEST_CASE("conjugate Hessian diagonal matches finite differences") {
  std::mt19937_64 rng(77);
  for (SiteKind kind : {SiteKind::Poisson, SiteKind::BernoulliLogit, SiteKind::MultiLogit,
                        SiteKind::StochasticVolatility}) {
    for (int rep = 0; rep < 20; ++rep) {
      const Site site = testing::random_site(rng, kind);
      LgmModel one(Prior::from_covariance(Vec::Zero(site.dim()), Mat::Identity(site.dim(), site.dim())),
                   Design::identity(site.dim()), {site});
      const Vec lambda = testing::random_feasible_lambda(rng, one);
      const Vec h = site.conjugate_hessian_diag(lambda);
      for (Index k = 0; k < lambda.size(); ++k) {
        const double step = 1e-6 * lambda(k);
        Vec up = lambda, down = lambda;
        up(k) += step;
        down(k) -= step;
        const double fd = (site.conjugate_grad(up)(k) - site.conjugate_grad(down)(k)) / (2 * step);
        CHECK(h(k) == doctest::Approx(fd).epsilon(1e-5));
        CHECK(h(k) > 0.0);
      }
    }
  }
}
