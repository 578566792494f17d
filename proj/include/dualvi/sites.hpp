#pragma once

#include <Eigen/Dense>

#include <string>
#include <utility>

namespace dualvi {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using VecRef = Eigen::Ref<const Eigen::VectorXd>;

enum class SiteKind { Poisson, BernoulliLogit, MultiLogit, StochasticVolatility };

std::string to_string(SiteKind kind);

/// One likelihood factor p(y | eta) of a latent Gaussian model, together with
/// its convex bound f(h, rho) on E_q[-log p(y | eta)] and the Fenchel
/// conjugate of that bound restricted to the affine coupling alpha(lambda).
///
/// Scalar kinds have dimension 1. A multi-logit site over K classes has
/// dimension K-1; the last class is the reference (its linear predictor is 0)
/// and the observation is stored as a one-hot vector of length K-1 that is all
/// zeros for the reference class.
///
/// Feasible sets (open):
///   Poisson, StochasticVolatility: lambda > 0
///   BernoulliLogit:                0 < lambda < 1
///   MultiLogit:                    lambda_k > 0, sum_k lambda_k < 1
class Site {
 public:
  static Site poisson(int count);
  static Site bernoulli(int label);
  /// `label` in [0, num_classes); label num_classes-1 is the reference class.
  static Site multi_logit(int num_classes, int label);
  static Site stoch_vol(double y);

  SiteKind kind() const { return kind_; }
  int dim() const { return static_cast<int>(y_.size()); }
  const Vec& observation() const { return y_; }
  /// Class index for multi-logit sites, the integer observation otherwise.
  int label() const;
  int num_classes() const { return dim() + 1; }

  /// Bound f(h, rho). Rho is unrestricted.
  double value(const VecRef& h, const VecRef& rho) const;
  /// (df/dh, df/drho).
  std::pair<Vec, Vec> grad(const VecRef& h, const VecRef& rho) const;

  /// Constant c with E_q[-log p(y | eta)] <= f(h, rho) + c (the likelihood
  /// normalizer dropped from the table form of f, e.g. log y! for Poisson).
  double log_normalizer() const;

  /// Exact log p(y | eta).
  double log_likelihood(const VecRef& eta) const;

  bool contains(const VecRef& lambda) const;
  /// f*(lambda). Throws InfeasibleError outside the open domain.
  double conjugate(const VecRef& lambda) const;
  Vec conjugate_grad(const VecRef& lambda) const;
  /// Diagonal of the conjugate's Hessian.
  Vec conjugate_hessian_diag(const VecRef& lambda) const;

  /// alpha = slope * lambda + intercept.
  Vec alpha(const VecRef& lambda) const;
  double alpha_slope() const { return kind_ == SiteKind::StochasticVolatility ? -1.0 : 1.0; }

  /// sup{delta > 0 : lambda + delta d in closure(S)}; +inf when unbounded.
  double max_feasible_step(const VecRef& lambda, const VecRef& direction) const;

  /// Interior starting point used by the solvers.
  Vec default_lambda() const;

 private:
  Site(SiteKind kind, Vec y) : kind_(kind), y_(std::move(y)) {}
  void check_dims(const VecRef& a, const char* what) const;

  SiteKind kind_;
  Vec y_;
};

/// log(1 + sum_k exp(v_k)), max-shifted.
double log1p_sum_exp(const VecRef& v);
/// softmax over (v, 0): entries exp(v_k) / (1 + sum exp(v)).
Vec reference_softmax(const VecRef& v);
double log1p_exp(double x);
double sigmoid(double x);

}  // namespace dualvi
