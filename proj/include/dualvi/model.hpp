#pragma once

#include "dualvi/sites.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace dualvi {

using SpMat = Eigen::SparseMatrix<double>;
using Index = Eigen::Index;

/// Gaussian prior N(mu, Sigma), stored either as a dense covariance or as a
/// sparse precision matrix. Both forms are factorized once at construction.
/// Copies share the immutable factorization.
class Prior {
 public:
  static Prior from_covariance(Vec mean, Mat covariance);
  static Prior from_precision(Vec mean, SpMat precision);

  Index dim() const;
  bool is_sparse() const;
  const Vec& mean() const;

  /// log|Sigma|.
  double log_det_cov() const;
  /// Sigma * x.
  Mat cov_times(const Mat& x) const;
  /// Sigma^{-1} * x.
  Mat precision_times(const Mat& x) const;
  Vec cov_diagonal() const;

  Mat dense_covariance() const;
  Mat dense_precision() const;
  /// Dense input covariance (throws for sparse priors).
  const Mat& covariance() const;
  /// Sparse input precision (throws for dense priors).
  const SpMat& precision() const;
  /// The stored matrix (Sigma when dense, Q when sparse) rebuilt from its
  /// Cholesky factor, in the original ordering.
  Mat reconstruct_from_factor() const;
  /// Diagonal of the Cholesky factor of the stored matrix (fill-reducing
  /// order when sparse).
  Vec factor_pivots() const;
  /// Lower Cholesky factor of Sigma, dense. Intended for small models.
  Mat cov_cholesky() const;

 private:
  struct Data;
  explicit Prior(std::shared_ptr<const Data> data) : data_(std::move(data)) {}
  std::shared_ptr<const Data> data_;
};

/// Design matrix W mapping latent z (length L) to the stacked site
/// predictors eta = W z (length N_rows).
class Design {
 public:
  static Design identity(Index n);
  static Design dense(Mat w);
  static Design sparse(SpMat w);

  Index rows() const;
  Index cols() const;
  bool is_identity() const;

  Mat times(const Mat& x) const;            // W x
  Mat transpose_times(const Mat& y) const;  // W^T y
  SpMat to_sparse() const;
  Mat to_dense() const;

 private:
  struct Identity {
    Index n;
  };
  using Storage = std::variant<Identity, Mat, SpMat>;
  explicit Design(Storage s) : storage_(std::make_shared<const Storage>(std::move(s))) {}
  std::shared_ptr<const Storage> storage_;
};

/// Latent Gaussian model: z ~ N(mu, Sigma), eta = W z, sites claim
/// consecutive row blocks of eta. Immutable; copies share state.
class LgmModel {
 public:
  LgmModel(Prior prior, Design design, std::vector<Site> sites);

  const Prior& prior() const { return data_->prior; }
  const Design& design() const { return data_->design; }
  const std::vector<Site>& sites() const { return data_->sites; }
  Index latent_dim() const { return data_->prior.dim(); }
  Index num_rows() const { return data_->design.rows(); }
  Index site_offset(std::size_t i) const { return data_->offsets[i]; }

  /// mu_tilde = W mu.
  const Vec& mu_tilde() const { return data_->mu_tilde; }
  /// Sigma_tilde = W Sigma W^T when materialized.
  bool has_dense_sigma_tilde() const { return data_->sigma_tilde.has_value(); }
  const Mat& sigma_tilde() const;
  /// Sigma_tilde * x, materialized or as W (Sigma (W^T x)).
  Vec sigma_tilde_times(const Vec& x) const;

  Vec default_lambda() const;
  bool lambda_feasible(const Vec& lambda) const;
  /// Stacked alpha(lambda) over all sites.
  Vec alpha(const Vec& lambda) const;
  /// Diagonal of d alpha / d lambda.
  Vec alpha_slope() const;
  double max_feasible_step(const Vec& lambda, const Vec& direction) const;
  double sum_log_normalizers() const;

  /// Row count above which Sigma_tilde of a sparse-precision model is kept
  /// as an operator.
  static constexpr Index kDenseSigmaTildeLimit = 4096;

 private:
  struct Data {
    Prior prior;
    Design design;
    std::vector<Site> sites;
    std::vector<Index> offsets;
    Vec mu_tilde;
    std::optional<Mat> sigma_tilde;
  };
  std::shared_ptr<const Data> data_;
};

/// Factorization of the posterior precision A(lambda) = Sigma^{-1} + W^T diag(lambda) W.
///
/// Dense-covariance models factor B = I + S Sigma_tilde S with S = diag(sqrt(lambda))
/// in row space, so Sigma^{-1} is never formed; log|A| = log|B| - log|Sigma|.
/// Sparse-precision models factor A directly with a sparse Cholesky under an
/// AMD fill-reducing ordering.
class PrecisionFactor {
 public:
  PrecisionFactor(const LgmModel& model, const Vec& lambda);

  const Vec& lambda() const;
  /// log|A(lambda)|.
  double log_det() const;
  /// log|Sigma A(lambda)| = log|I + Sigma W^T diag(lambda) W|.
  double log_det_ratio() const;
  /// A^{-1} x.
  Vec solve(const Vec& x) const;
  /// diag(W A^{-1} W^T).
  Vec site_variances() const;
  /// W A^{-1} W^T.
  Mat site_covariance() const;
  /// diag(A^{-1}).
  Vec latent_variances() const;
  /// Lower Cholesky factor of A assembled densely. Small models only.
  Mat dense_lower() const;
  /// (Lambda^{-1} + Sigma_tilde)^{-1} applied to x, i.e. S B^{-1} S x.
  Mat row_space_solve(const Mat& x) const;

 private:
  struct Data;
  std::shared_ptr<const Data> data_;
};

/// Gaussian posterior N(m, V) with V = A(lambda)^{-1} held implicitly.
struct PosteriorGaussian {
  Vec mean;
  Vec lambda;
  PrecisionFactor factor;
  Vec site_mean;
  Vec site_var;
};

/// m_bar = W m, v_bar = diag(W A^{-1} W^T).
std::pair<Vec, Vec> project_site_moments(const LgmModel& model, const Vec& mean, const PrecisionFactor& factor);

/// Named positive hyperparameters. `log_<name>` entries stand in for `<name>`.
class Hyperparameters {
 public:
  Hyperparameters() = default;
  Hyperparameters(std::initializer_list<std::pair<const std::string, double>> init) : values_(init) {}

  void set(const std::string& name, double value) { values_[name] = value; }
  bool has(const std::string& name) const;
  /// Value of `name`, or exp(log_name) when only the log form is present.
  double get(const std::string& name) const;
  double get_or(const std::string& name, double fallback) const;
  const std::map<std::string, double>& values() const { return values_; }
  /// Throws DomainError when a recognized hyperparameter violates its bound.
  void validate() const;

 private:
  std::map<std::string, double> values_;
};

/// Packs feature vectors into the rows of a matrix; ragged input throws
/// DimensionError.
Mat feature_matrix(const std::vector<std::vector<double>>& rows);

/// Squared-exponential kernel sigma^2 exp(-0.5 |x_i - x_j|^2 / s) between rows.
Mat se_kernel(const Mat& inputs, double s, double sigma);
/// Cross-covariance between rows of `a` and rows of `b`.
Mat se_kernel(const Mat& a, const Mat& b, double s, double sigma);

/// Block-diagonal prior with `num_classes` copies of `base_cov`, zero mean.
Prior build_block_prior(const Mat& base_cov, int num_classes);

struct Edge {
  int a;
  int b;
};

struct GmrfParams {
  double k_u = 1.0;
  double k_v = 1.0;
  /// Added to the u-block diagonal; defaults to 1e-6 * k_u.
  std::optional<double> jitter;
  double offset = 0.0;

  double effective_jitter() const { return jitter.value_or(1e-6 * k_u); }
};

/// Graph Laplacian of an undirected graph on `num_nodes` nodes.
SpMat graph_laplacian(int num_nodes, const std::vector<Edge>& edges);

/// Poisson latent GMRF: z = [u; v], prior precision
/// blkdiag(k_u Lap + jitter I, k_v I), eta = offset + u + v. Sites are placed
/// at `observed` regions (all regions when empty).
LgmModel build_gmrf_model(int num_nodes, const std::vector<Edge>& edges, const GmrfParams& params,
                          const std::vector<int>& counts, const std::vector<int>& observed = {});

}  // namespace dualvi
