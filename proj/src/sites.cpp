#include "dualvi/sites.hpp"

#include "dualvi/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace dualvi {

namespace {

constexpr double kMaxExponent = 700.0;

double checked_exp(double x) {
  if (x > kMaxExponent) {
    throw DomainError("exponent " + std::to_string(x) + " overflows the site bound");
  }
  return std::exp(x);
}

}  // namespace

std::string to_string(SiteKind kind) {
  switch (kind) {
    case SiteKind::Poisson: return "poisson";
    case SiteKind::BernoulliLogit: return "bernoulli";
    case SiteKind::MultiLogit: return "multilogit";
    case SiteKind::StochasticVolatility: return "stochvol";
  }
  return "unknown";
}

double log1p_exp(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log1p_sum_exp(const VecRef& v) {
  const double shift = std::max(0.0, v.size() ? v.maxCoeff() : 0.0);
  return shift + std::log(std::exp(-shift) + (v.array() - shift).exp().sum());
}

Vec reference_softmax(const VecRef& v) {
  const double shift = std::max(0.0, v.size() ? v.maxCoeff() : 0.0);
  Vec e = (v.array() - shift).exp();
  return e / (std::exp(-shift) + e.sum());
}

Site Site::poisson(int count) {
  if (count < 0) throw DomainError("Poisson count must be >= 0");
  return Site(SiteKind::Poisson, Vec::Constant(1, count));
}

Site Site::bernoulli(int label) {
  if (label != 0 && label != 1) throw DomainError("Bernoulli observation must be 0 or 1");
  return Site(SiteKind::BernoulliLogit, Vec::Constant(1, label));
}

Site Site::multi_logit(int num_classes, int label) {
  if (num_classes < 2) throw DomainError("multi-logit site needs at least 2 classes");
  if (label < 0 || label >= num_classes) {
    throw DomainError("class label " + std::to_string(label) + " outside [0, " +
                      std::to_string(num_classes) + ")");
  }
  Vec y = Vec::Zero(num_classes - 1);
  if (label < num_classes - 1) y(label) = 1.0;
  return Site(SiteKind::MultiLogit, std::move(y));
}

Site Site::stoch_vol(double y) {
  if (y == 0.0 || !std::isfinite(y)) {
    throw DomainError("stochastic-volatility observation must be finite and non-zero");
  }
  return Site(SiteKind::StochasticVolatility, Vec::Constant(1, y));
}

int Site::label() const {
  if (kind_ == SiteKind::MultiLogit) {
    for (Eigen::Index k = 0; k < y_.size(); ++k) {
      if (y_(k) == 1.0) return static_cast<int>(k);
    }
    return static_cast<int>(y_.size());
  }
  return static_cast<int>(y_(0));
}

void Site::check_dims(const VecRef& a, const char* what) const {
  if (a.size() != y_.size()) {
    throw DimensionError(std::string(what) + " has length " + std::to_string(a.size()) + ", site " +
                         to_string(kind_) + " expects " + std::to_string(y_.size()));
  }
}

double Site::value(const VecRef& h, const VecRef& rho) const {
  check_dims(h, "h");
  check_dims(rho, "rho");
  switch (kind_) {
    case SiteKind::Poisson: return -y_(0) * h(0) + checked_exp(h(0) + 0.5 * rho(0));
    case SiteKind::BernoulliLogit: return -y_(0) * h(0) + log1p_exp(h(0) + 0.5 * rho(0));
    case SiteKind::MultiLogit: return -y_.dot(h) + log1p_sum_exp(h + 0.5 * rho);
    case SiteKind::StochasticVolatility:
      return 0.5 * h(0) + 0.5 * y_(0) * y_(0) * checked_exp(-h(0) + 0.5 * rho(0));
  }
  return 0.0;
}

std::pair<Vec, Vec> Site::grad(const VecRef& h, const VecRef& rho) const {
  check_dims(h, "h");
  check_dims(rho, "rho");
  switch (kind_) {
    case SiteKind::Poisson: {
      const double e = checked_exp(h(0) + 0.5 * rho(0));
      return {Vec::Constant(1, e - y_(0)), Vec::Constant(1, 0.5 * e)};
    }
    case SiteKind::BernoulliLogit: {
      const double p = sigmoid(h(0) + 0.5 * rho(0));
      return {Vec::Constant(1, p - y_(0)), Vec::Constant(1, 0.5 * p)};
    }
    case SiteKind::MultiLogit: {
      Vec p = reference_softmax(h + 0.5 * rho);
      return {p - y_, 0.5 * p};
    }
    case SiteKind::StochasticVolatility: {
      const double e = y_(0) * y_(0) * checked_exp(-h(0) + 0.5 * rho(0));
      return {Vec::Constant(1, 0.5 - 0.5 * e), Vec::Constant(1, 0.25 * e)};
    }
  }
  return {};
}

double Site::log_normalizer() const {
  switch (kind_) {
    case SiteKind::Poisson: return std::lgamma(y_(0) + 1.0);
    case SiteKind::StochasticVolatility: return 0.5 * std::log(2.0 * std::numbers::pi);
    default: return 0.0;
  }
}

double Site::log_likelihood(const VecRef& eta) const {
  check_dims(eta, "eta");
  switch (kind_) {
    case SiteKind::Poisson: return y_(0) * eta(0) - std::exp(eta(0)) - std::lgamma(y_(0) + 1.0);
    case SiteKind::BernoulliLogit: return y_(0) * eta(0) - log1p_exp(eta(0));
    case SiteKind::MultiLogit: return y_.dot(eta) - log1p_sum_exp(eta);
    case SiteKind::StochasticVolatility:
      return -0.5 * std::log(2.0 * std::numbers::pi) - 0.5 * eta(0) -
             0.5 * y_(0) * y_(0) * std::exp(-eta(0));
  }
  return 0.0;
}

bool Site::contains(const VecRef& lambda) const {
  if (lambda.size() != y_.size()) return false;
  if (!lambda.allFinite() || (lambda.array() <= 0.0).any()) return false;
  switch (kind_) {
    case SiteKind::BernoulliLogit: return lambda(0) < 1.0;
    case SiteKind::MultiLogit: return lambda.sum() < 1.0;
    default: return true;
  }
}

double Site::conjugate(const VecRef& lambda) const {
  check_dims(lambda, "lambda");
  if (!contains(lambda)) throw InfeasibleError("lambda outside the domain of the " + to_string(kind_) + " conjugate");
  switch (kind_) {
    case SiteKind::Poisson: return lambda(0) * (std::log(lambda(0)) - 1.0);
    case SiteKind::BernoulliLogit: {
      const double l = lambda(0);
      return l * std::log(l) + (1.0 - l) * std::log1p(-l);
    }
    case SiteKind::MultiLogit: {
      const double t = lambda.sum();
      return (lambda.array() * lambda.array().log()).sum() + (1.0 - t) * std::log1p(-t);
    }
    case SiteKind::StochasticVolatility: {
      const double l = lambda(0);
      return l * std::log(2.0 * l / (y_(0) * y_(0))) - l;
    }
  }
  return 0.0;
}

Vec Site::conjugate_grad(const VecRef& lambda) const {
  check_dims(lambda, "lambda");
  if (!contains(lambda)) throw InfeasibleError("lambda outside the domain of the " + to_string(kind_) + " conjugate");
  switch (kind_) {
    case SiteKind::Poisson: return Vec::Constant(1, std::log(lambda(0)));
    case SiteKind::BernoulliLogit:
      return Vec::Constant(1, std::log(lambda(0)) - std::log1p(-lambda(0)));
    case SiteKind::MultiLogit: return lambda.array().log() - std::log1p(-lambda.sum());
    case SiteKind::StochasticVolatility:
      return Vec::Constant(1, std::log(2.0 * lambda(0) / (y_(0) * y_(0))));
  }
  return {};
}

Vec Site::conjugate_hessian_diag(const VecRef& lambda) const {
  check_dims(lambda, "lambda");
  if (!contains(lambda)) throw InfeasibleError("lambda outside the domain of the " + to_string(kind_) + " conjugate");
  switch (kind_) {
    case SiteKind::Poisson:
    case SiteKind::StochasticVolatility: return lambda.cwiseInverse();
    case SiteKind::BernoulliLogit: return Vec::Constant(1, 1.0 / lambda(0) + 1.0 / (1.0 - lambda(0)));
    case SiteKind::MultiLogit: return lambda.cwiseInverse().array() + 1.0 / (1.0 - lambda.sum());
  }
  return {};
}

Vec Site::alpha(const VecRef& lambda) const {
  check_dims(lambda, "lambda");
  if (kind_ == SiteKind::StochasticVolatility) return Vec::Constant(1, 0.5 - lambda(0));
  return lambda - y_;
}

double Site::max_feasible_step(const VecRef& lambda, const VecRef& direction) const {
  check_dims(lambda, "lambda");
  check_dims(direction, "direction");
  double step = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < lambda.size(); ++k) {
    if (direction(k) < 0.0) step = std::min(step, lambda(k) / -direction(k));
  }
  if (kind_ == SiteKind::BernoulliLogit && direction(0) > 0.0) {
    step = std::min(step, (1.0 - lambda(0)) / direction(0));
  }
  if (kind_ == SiteKind::MultiLogit) {
    const double dt = direction.sum();
    if (dt > 0.0) step = std::min(step, (1.0 - lambda.sum()) / dt);
  }
  return step;
}

Vec Site::default_lambda() const {
  switch (kind_) {
    case SiteKind::BernoulliLogit: return Vec::Constant(1, 0.5);
    case SiteKind::MultiLogit: return Vec::Constant(dim(), 1.0 / (2.0 * dim()));
    default: return Vec::Constant(1, 1.0);
  }
}

}  // namespace dualvi
