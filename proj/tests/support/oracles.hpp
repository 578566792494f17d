#pragma once

// Independent reference computations used by the unit and acceptance tests.
// Nothing here calls the dual solver; the oracles work from the primal
// definitions with dense linear algebra, finite differences and quadrature.

#include "dualvi/model.hpp"

#include <filesystem>
#include <functional>
#include <random>
#include <vector>

namespace dualvi::testing {

struct ConjugateOracle {
  double value = 0.0;
  /// False when the damped Newton ascent did not reach a stationary point.
  bool converged = false;
  /// Maximizer found.
  Vec h;
  Vec rho;
};

/// sup over (h, rho) of alpha^T h + lambda^T rho / 2 - f(h, rho), with
/// alpha = site.alpha(lambda), by damped Newton on finite-difference
/// derivatives of site.value.
ConjugateOracle numeric_conjugate(const Site& site, const Vec& lambda);

/// Central differences of a scalar function.
Vec central_difference(const std::function<double(const Vec&)>& fn, const Vec& x, double step);

/// Scalar Poisson model z ~ N(0, 1), y = 1: root of the primal stationarity
/// conditions m = 1 - lambda, V = 1 / (1 + lambda), lambda = exp(m + V/2).
struct ScalarOptimum {
  double lambda;
  double mean;
  double variance;
};
ScalarOptimum scalar_poisson_optimum();

/// Reduced dual built densely from its definition: Sigma^{-1} and A(lambda)
/// are formed explicitly.
double dense_reduced_dual(const LgmModel& model, const Vec& lambda);

/// Primal bound for an arbitrary Gaussian N(m, V), all constants kept.
double dense_elbo(const LgmModel& model, const Vec& mean, const Mat& cov);

/// log p(y) for a model with one latent variable, by adaptive quadrature.
double log_evidence_1d(const LgmModel& model);

/// E[p(y | eta)] under eta ~ N(mean, var), by adaptive quadrature.
double predictive_1d(const Site& site, double mean, double var);

struct InstanceSpec {
  int latent_dim = 3;
  std::vector<SiteKind> kinds;
  /// Identity design requires the site dimensions to add up to latent_dim.
  bool identity_design = true;
  int num_classes = 3;
};

Site random_site(std::mt19937_64& rng, SiteKind kind, int num_classes = 3);
Mat random_spd(std::mt19937_64& rng, int n);
LgmModel random_instance(std::mt19937_64& rng, const InstanceSpec& spec);
/// Interior point of every site's dual domain.
Vec random_feasible_lambda(std::mt19937_64& rng, const LgmModel& model);

/// Fresh empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& tag);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace dualvi::testing
