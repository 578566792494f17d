#include "dualvi/model.hpp"

#include "dualvi/errors.hpp"

#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <limits>

namespace dualvi {

namespace {

using SparseLLT = Eigen::SimplicialLLT<SpMat, Eigen::Lower, Eigen::AMDOrdering<int>>;

// Columns per block when solving against many right-hand sides.
constexpr Index kSolveChunk = 256;

// A pivot this small relative to the largest diagonal entry means the matrix
// is singular up to rounding (e.g. an intrinsic GMRF without jitter).
constexpr double kPivotFloor = 1e-13;

void check_pivots(const Vec& diag_l, double max_diag, const char* what) {
  if (diag_l.size() == 0) return;
  const double min_pivot = diag_l.minCoeff();
  if (!(min_pivot > 0.0) || min_pivot * min_pivot < kPivotFloor * max_diag) {
    throw FactorizationError(std::string(what) + " is not numerically positive definite");
  }
}

Eigen::LLT<Mat> dense_llt(const Mat& m, const char* what) {
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) {
    throw FactorizationError(std::string(what) + " is not positive definite");
  }
  const double max_diag = m.size() ? m.diagonal().maxCoeff() : 0.0;
  check_pivots(llt.matrixLLT().diagonal(), max_diag, what);
  return llt;
}

void sparse_factorize(SparseLLT& llt, const SpMat& m, const char* what) {
  llt.compute(m);
  if (llt.info() != Eigen::Success) {
    throw FactorizationError(std::string(what) + " is not positive definite");
  }
  Vec diag_l = SpMat(llt.matrixL()).diagonal();
  const double max_diag = m.size() ? Vec(m.diagonal()).maxCoeff() : 0.0;
  check_pivots(diag_l, max_diag, what);
}

double log_det_from_lower(const Vec& diag_l) { return 2.0 * diag_l.array().log().sum(); }

}  // namespace

// ---------------------------------------------------------------------------
// Prior

struct Prior::Data {
  Vec mean;
  bool sparse = false;
  Mat cov;
  Eigen::LLT<Mat> cov_llt;
  SpMat precision;
  SparseLLT prec_llt;
  double log_det_cov = 0.0;
};

Prior Prior::from_covariance(Vec mean, Mat covariance) {
  if (covariance.rows() != covariance.cols() || covariance.rows() != mean.size()) {
    throw DimensionError("prior covariance must be square and match the mean length");
  }
  if (mean.size() < 1) throw DimensionError("prior dimension must be >= 1");
  auto d = std::make_shared<Data>();
  d->mean = std::move(mean);
  d->cov = std::move(covariance);
  d->cov_llt = dense_llt(d->cov, "prior covariance");
  d->log_det_cov = log_det_from_lower(d->cov_llt.matrixLLT().diagonal());
  return Prior(std::move(d));
}

Prior Prior::from_precision(Vec mean, SpMat precision) {
  if (precision.rows() != precision.cols() || precision.rows() != mean.size()) {
    throw DimensionError("prior precision must be square and match the mean length");
  }
  if (mean.size() < 1) throw DimensionError("prior dimension must be >= 1");
  auto d = std::make_shared<Data>();
  d->mean = std::move(mean);
  d->sparse = true;
  d->precision = std::move(precision);
  d->precision.makeCompressed();
  sparse_factorize(d->prec_llt, d->precision, "prior precision");
  d->log_det_cov = -log_det_from_lower(Vec(SpMat(d->prec_llt.matrixL()).diagonal()));
  return Prior(std::move(d));
}

Index Prior::dim() const { return data_->mean.size(); }
bool Prior::is_sparse() const { return data_->sparse; }
const Vec& Prior::mean() const { return data_->mean; }
double Prior::log_det_cov() const { return data_->log_det_cov; }

Mat Prior::cov_times(const Mat& x) const {
  if (data_->sparse) return data_->prec_llt.solve(x);
  return data_->cov * x;
}

Mat Prior::precision_times(const Mat& x) const {
  if (data_->sparse) return data_->precision * x;
  return data_->cov_llt.solve(x);
}

Vec Prior::cov_diagonal() const {
  if (!data_->sparse) return data_->cov.diagonal();
  Vec out(dim());
  for (Index start = 0; start < dim(); start += kSolveChunk) {
    const Index width = std::min(kSolveChunk, dim() - start);
    Mat rhs = Mat::Zero(dim(), width);
    for (Index j = 0; j < width; ++j) rhs(start + j, j) = 1.0;
    Mat cols = data_->prec_llt.solve(rhs);
    for (Index j = 0; j < width; ++j) out(start + j) = cols(start + j, j);
  }
  return out;
}

Mat Prior::dense_covariance() const {
  if (!data_->sparse) return data_->cov;
  return data_->prec_llt.solve(Mat::Identity(dim(), dim()));
}

Mat Prior::dense_precision() const {
  if (data_->sparse) return Mat(data_->precision);
  return data_->cov_llt.solve(Mat::Identity(dim(), dim()));
}

const Mat& Prior::covariance() const {
  if (data_->sparse) throw std::logic_error("prior is stored as a sparse precision");
  return data_->cov;
}

const SpMat& Prior::precision() const {
  if (!data_->sparse) throw std::logic_error("prior is stored as a dense covariance");
  return data_->precision;
}

Mat Prior::reconstruct_from_factor() const {
  if (!data_->sparse) {
    Mat l = data_->cov_llt.matrixL();
    return l * l.transpose();
  }
  Mat l = SpMat(data_->prec_llt.matrixL());
  Mat llt = l * l.transpose();
  return data_->prec_llt.permutationPinv() * llt * data_->prec_llt.permutationP();
}

Vec Prior::factor_pivots() const {
  if (!data_->sparse) return data_->cov_llt.matrixLLT().diagonal();
  return SpMat(data_->prec_llt.matrixL()).diagonal();
}

Mat Prior::cov_cholesky() const {
  if (!data_->sparse) return data_->cov_llt.matrixL();
  return dense_llt(dense_covariance(), "prior covariance").matrixL();
}

// ---------------------------------------------------------------------------
// Design

Design Design::identity(Index n) { return Design(Identity{n}); }
Design Design::dense(Mat w) { return Design(std::move(w)); }
Design Design::sparse(SpMat w) {
  w.makeCompressed();
  return Design(std::move(w));
}

Index Design::rows() const {
  return std::visit(
      [](const auto& w) -> Index {
        if constexpr (std::is_same_v<std::decay_t<decltype(w)>, Identity>) {
          return w.n;
        } else {
          return w.rows();
        }
      },
      *storage_);
}

Index Design::cols() const {
  return std::visit(
      [](const auto& w) -> Index {
        if constexpr (std::is_same_v<std::decay_t<decltype(w)>, Identity>) {
          return w.n;
        } else {
          return w.cols();
        }
      },
      *storage_);
}

bool Design::is_identity() const { return std::holds_alternative<Identity>(*storage_); }

Mat Design::times(const Mat& x) const {
  if (x.rows() != cols()) throw DimensionError("W x: operand has wrong row count");
  if (is_identity()) return x;
  if (const auto* w = std::get_if<Mat>(storage_.get())) return *w * x;
  return std::get<SpMat>(*storage_) * x;
}

Mat Design::transpose_times(const Mat& y) const {
  if (y.rows() != rows()) throw DimensionError("W^T y: operand has wrong row count");
  if (is_identity()) return y;
  if (const auto* w = std::get_if<Mat>(storage_.get())) return w->transpose() * y;
  return std::get<SpMat>(*storage_).transpose() * y;
}

SpMat Design::to_sparse() const {
  if (is_identity()) {
    SpMat id(rows(), cols());
    id.setIdentity();
    return id;
  }
  if (const auto* w = std::get_if<Mat>(storage_.get())) return w->sparseView();
  return std::get<SpMat>(*storage_);
}

Mat Design::to_dense() const {
  if (is_identity()) return Mat::Identity(rows(), cols());
  if (const auto* w = std::get_if<Mat>(storage_.get())) return *w;
  return Mat(std::get<SpMat>(*storage_));
}

// ---------------------------------------------------------------------------
// LgmModel

LgmModel::LgmModel(Prior prior, Design design, std::vector<Site> sites) {
  if (design.cols() != prior.dim()) {
    throw DimensionError("design has " + std::to_string(design.cols()) + " columns, prior dimension is " +
                         std::to_string(prior.dim()));
  }
  std::vector<Index> offsets;
  offsets.reserve(sites.size());
  Index rows = 0;
  for (const Site& s : sites) {
    offsets.push_back(rows);
    rows += s.dim();
  }
  if (rows != design.rows()) {
    throw DimensionError("sites claim " + std::to_string(rows) + " rows, design has " +
                         std::to_string(design.rows()));
  }
  Vec mu_tilde = design.times(prior.mean());

  std::optional<Mat> sigma_tilde;
  if (!prior.is_sparse()) {
    Mat w_sigma = design.times(prior.covariance());
    Mat st = design.times(w_sigma.transpose());
    sigma_tilde = 0.5 * (st + st.transpose());
  } else if (design.rows() <= kDenseSigmaTildeLimit) {
    Mat w_t = design.transpose_times(Mat::Identity(design.rows(), design.rows()));
    Mat st = design.times(prior.cov_times(w_t));
    sigma_tilde = 0.5 * (st + st.transpose());
  }
  data_ = std::make_shared<const Data>(Data{std::move(prior), std::move(design), std::move(sites),
                                            std::move(offsets), std::move(mu_tilde), std::move(sigma_tilde)});
}

const Mat& LgmModel::sigma_tilde() const {
  if (!data_->sigma_tilde) throw std::logic_error("Sigma_tilde is not materialized for this model");
  return *data_->sigma_tilde;
}

Vec LgmModel::sigma_tilde_times(const Vec& x) const {
  // Sparse priors go through the solve: the materialized entries scale like
  // 1/jitter and the product loses digits to cancellation.
  if (data_->sigma_tilde && !prior().is_sparse()) return *data_->sigma_tilde * x;
  return design().times(prior().cov_times(design().transpose_times(x)));
}

Vec LgmModel::default_lambda() const {
  Vec out(num_rows());
  for (std::size_t i = 0; i < sites().size(); ++i) {
    const Site& s = sites()[i];
    out.segment(site_offset(i), s.dim()) = s.default_lambda();
  }
  return out;
}

bool LgmModel::lambda_feasible(const Vec& lambda) const {
  if (lambda.size() != num_rows()) return false;
  for (std::size_t i = 0; i < sites().size(); ++i) {
    const Site& s = sites()[i];
    if (!s.contains(lambda.segment(site_offset(i), s.dim()))) return false;
  }
  return true;
}

Vec LgmModel::alpha(const Vec& lambda) const {
  if (lambda.size() != num_rows()) throw DimensionError("lambda length does not match the design rows");
  Vec out(num_rows());
  for (std::size_t i = 0; i < sites().size(); ++i) {
    const Site& s = sites()[i];
    out.segment(site_offset(i), s.dim()) = s.alpha(lambda.segment(site_offset(i), s.dim()));
  }
  return out;
}

Vec LgmModel::alpha_slope() const {
  Vec out(num_rows());
  for (std::size_t i = 0; i < sites().size(); ++i) {
    const Site& s = sites()[i];
    out.segment(site_offset(i), s.dim()).setConstant(s.alpha_slope());
  }
  return out;
}

double LgmModel::max_feasible_step(const Vec& lambda, const Vec& direction) const {
  double step = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < sites().size(); ++i) {
    const Site& s = sites()[i];
    step = std::min(step, s.max_feasible_step(lambda.segment(site_offset(i), s.dim()),
                                              direction.segment(site_offset(i), s.dim())));
  }
  return step;
}

double LgmModel::sum_log_normalizers() const {
  double total = 0.0;
  for (const Site& s : sites()) total += s.log_normalizer();
  return total;
}

// ---------------------------------------------------------------------------
// PrecisionFactor

struct PrecisionFactor::Data {
  Data(LgmModel m, Vec l) : model(std::move(m)), lambda(std::move(l)) {}

  LgmModel model;
  Vec lambda;
  bool sparse = false;
  // dense-covariance route
  Vec sqrt_lambda;
  Eigen::LLT<Mat> b_llt;
  // sparse-precision route
  SparseLLT a_llt;
  double log_det_a = 0.0;
  double log_det_ratio = 0.0;

  // L^{-1} P rhs for the sparse route.
  Mat sparse_half_solve(const Mat& rhs) const {
    Mat permuted = a_llt.permutationP() * rhs;
    return a_llt.matrixL().solve(permuted);
  }
};

PrecisionFactor::PrecisionFactor(const LgmModel& model, const Vec& lambda) {
  if (lambda.size() != model.num_rows()) throw DimensionError("lambda length does not match the design rows");
  if ((lambda.array() < 0.0).any()) throw InfeasibleError("A(lambda) requires lambda >= 0");
  auto d = std::make_shared<Data>(model, lambda);
  const Prior& prior = model.prior();
  if (!prior.is_sparse()) {
    d->sqrt_lambda = lambda.array().sqrt();
    const Vec& s = d->sqrt_lambda;
    Mat b = s.asDiagonal() * model.sigma_tilde() * s.asDiagonal();
    b.diagonal().array() += 1.0;
    d->b_llt = dense_llt(b, "I + S Sigma_tilde S");
    d->log_det_ratio = log_det_from_lower(d->b_llt.matrixLLT().diagonal());
    d->log_det_a = d->log_det_ratio - prior.log_det_cov();
  } else {
    d->sparse = true;
    SpMat w = model.design().to_sparse();
    SpMat a = prior.precision() + SpMat(w.transpose() * lambda.asDiagonal() * w);
    sparse_factorize(d->a_llt, a, "A(lambda)");
    d->log_det_a = log_det_from_lower(Vec(SpMat(d->a_llt.matrixL()).diagonal()));
    d->log_det_ratio = d->log_det_a + prior.log_det_cov();
  }
  data_ = std::move(d);
}

const Vec& PrecisionFactor::lambda() const { return data_->lambda; }
double PrecisionFactor::log_det() const { return data_->log_det_a; }
double PrecisionFactor::log_det_ratio() const { return data_->log_det_ratio; }

Vec PrecisionFactor::solve(const Vec& x) const {
  const Data& d = *data_;
  if (d.sparse) return d.a_llt.solve(x);
  const LgmModel& m = d.model;
  Vec sigma_x = m.prior().cov_times(x);
  Vec inner = row_space_solve(m.design().times(sigma_x));
  return sigma_x - m.prior().cov_times(m.design().transpose_times(inner));
}

Mat PrecisionFactor::row_space_solve(const Mat& x) const {
  const Data& d = *data_;
  if (!d.sparse) {
    Mat scaled = d.sqrt_lambda.asDiagonal() * x;
    return d.sqrt_lambda.asDiagonal() * d.b_llt.solve(scaled);
  }
  // Woodbury: (L^{-1} + St)^{-1} = L - L W A^{-1} W^T L
  const Design& w = d.model.design();
  Mat lx = d.lambda.asDiagonal() * x;
  Mat corr = w.times(Mat(d.a_llt.solve(w.transpose_times(lx))));
  return lx - d.lambda.asDiagonal() * corr;
}

Vec PrecisionFactor::site_variances() const {
  const Data& d = *data_;
  const LgmModel& m = d.model;
  const Index n = m.num_rows();
  if (!d.sparse) {
    const Mat& st = m.sigma_tilde();
    Mat x = d.b_llt.matrixL().solve(d.sqrt_lambda.asDiagonal() * st);
    return st.diagonal() - x.colwise().squaredNorm().transpose();
  }
  Vec out(n);
  for (Index start = 0; start < n; start += kSolveChunk) {
    const Index width = std::min(kSolveChunk, n - start);
    Mat e = Mat::Zero(n, width);
    for (Index j = 0; j < width; ++j) e(start + j, j) = 1.0;
    Mat y = d.sparse_half_solve(m.design().transpose_times(e));
    out.segment(start, width) = y.colwise().squaredNorm().transpose();
  }
  return out;
}

Mat PrecisionFactor::site_covariance() const {
  const Data& d = *data_;
  const LgmModel& m = d.model;
  if (!d.sparse) {
    const Mat& st = m.sigma_tilde();
    Mat x = d.b_llt.matrixL().solve(d.sqrt_lambda.asDiagonal() * st);
    Mat p = st;
    p.noalias() -= x.transpose() * x;
    return p;
  }
  const Index n = m.num_rows();
  Mat y = d.sparse_half_solve(m.design().transpose_times(Mat::Identity(n, n)));
  return y.transpose() * y;
}

Vec PrecisionFactor::latent_variances() const {
  const Data& d = *data_;
  const LgmModel& m = d.model;
  const Index l = m.latent_dim();
  if (!d.sparse) {
    const Mat& sigma = m.prior().covariance();
    Mat w_sigma = m.design().times(sigma);
    Mat x = d.b_llt.matrixL().solve(d.sqrt_lambda.asDiagonal() * w_sigma);
    return sigma.diagonal() - x.colwise().squaredNorm().transpose();
  }
  Vec out(l);
  for (Index start = 0; start < l; start += kSolveChunk) {
    const Index width = std::min(kSolveChunk, l - start);
    Mat e = Mat::Zero(l, width);
    for (Index j = 0; j < width; ++j) e(start + j, j) = 1.0;
    Mat y = d.sparse_half_solve(e);
    out.segment(start, width) = y.colwise().squaredNorm().transpose();
  }
  return out;
}

Mat PrecisionFactor::dense_lower() const {
  const Data& d = *data_;
  const LgmModel& m = d.model;
  Mat w = m.design().to_dense();
  Mat a = m.prior().dense_precision() + w.transpose() * d.lambda.asDiagonal() * w;
  a = 0.5 * (a + a.transpose());
  return dense_llt(a, "A(lambda)").matrixL();
}

std::pair<Vec, Vec> project_site_moments(const LgmModel& model, const Vec& mean, const PrecisionFactor& factor) {
  if (mean.size() != model.latent_dim()) throw DimensionError("posterior mean length does not match the model");
  if (factor.lambda().size() != model.num_rows()) throw DimensionError("stale precision factor for this model");
  return {model.design().times(mean), factor.site_variances()};
}

// ---------------------------------------------------------------------------
// Hyperparameters

bool Hyperparameters::has(const std::string& name) const {
  return values_.count(name) || values_.count("log_" + name);
}

double Hyperparameters::get(const std::string& name) const {
  if (auto it = values_.find(name); it != values_.end()) return it->second;
  if (auto it = values_.find("log_" + name); it != values_.end()) return std::exp(it->second);
  throw std::out_of_range("hyperparameter '" + name + "' is not set");
}

double Hyperparameters::get_or(const std::string& name, double fallback) const {
  return has(name) ? get(name) : fallback;
}

void Hyperparameters::validate() const {
  for (const char* name : {"s", "sigma", "k_u", "k_v"}) {
    if (has(name) && !(get(name) > 0.0)) throw DomainError(std::string("hyperparameter ") + name + " must be > 0");
  }
  if (has("jitter") && !(get("jitter") >= 0.0)) throw DomainError("hyperparameter jitter must be >= 0");
}

// ---------------------------------------------------------------------------
// Builders

Mat feature_matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return Mat(0, 0);
  const std::size_t width = rows.front().size();
  Mat out(static_cast<Index>(rows.size()), static_cast<Index>(width));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != width) {
      throw DimensionError("feature vector " + std::to_string(i) + " has length " + std::to_string(rows[i].size()) +
                           ", expected " + std::to_string(width));
    }
    for (std::size_t j = 0; j < width; ++j) out(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  }
  return out;
}

Mat se_kernel(const Mat& a, const Mat& b, double s, double sigma) {
  if (!(s > 0.0) || !(sigma > 0.0)) throw DomainError("SE kernel needs s > 0 and sigma > 0");
  if (a.cols() != b.cols()) throw DimensionError("SE kernel inputs have different feature lengths");
  Mat k(a.rows(), b.rows());
  const double scale = sigma * sigma;
  for (Index j = 0; j < b.rows(); ++j) {
    for (Index i = 0; i < a.rows(); ++i) {
      k(i, j) = scale * std::exp(-0.5 * (a.row(i) - b.row(j)).squaredNorm() / s);
    }
  }
  return k;
}

Mat se_kernel(const Mat& inputs, double s, double sigma) {
  Mat k = se_kernel(inputs, inputs, s, sigma);
  k.diagonal().setConstant(sigma * sigma);
  return k;
}

Prior build_block_prior(const Mat& base_cov, int num_classes) {
  if (num_classes < 1) throw DomainError("block prior needs at least one class");
  const Index n = base_cov.rows();
  if (base_cov.cols() != n) throw DimensionError("base covariance must be square");
  Mat cov = Mat::Zero(n * num_classes, n * num_classes);
  for (int k = 0; k < num_classes; ++k) cov.block(k * n, k * n, n, n) = base_cov;
  return Prior::from_covariance(Vec::Zero(n * num_classes), std::move(cov));
}

SpMat graph_laplacian(int num_nodes, const std::vector<Edge>& edges) {
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(4 * edges.size());
  for (const Edge& e : edges) {
    if (e.a < 0 || e.b < 0 || e.a >= num_nodes || e.b >= num_nodes) {
      throw DimensionError("edge (" + std::to_string(e.a) + "," + std::to_string(e.b) + ") outside the graph");
    }
    if (e.a == e.b) continue;
    trips.emplace_back(e.a, e.a, 1.0);
    trips.emplace_back(e.b, e.b, 1.0);
    trips.emplace_back(e.a, e.b, -1.0);
    trips.emplace_back(e.b, e.a, -1.0);
  }
  SpMat lap(num_nodes, num_nodes);
  lap.setFromTriplets(trips.begin(), trips.end());
  return lap;
}

LgmModel build_gmrf_model(int num_nodes, const std::vector<Edge>& edges, const GmrfParams& params,
                          const std::vector<int>& counts, const std::vector<int>& observed) {
  if (num_nodes < 1) throw DimensionError("GMRF needs at least one region");
  if (!(params.k_u > 0.0) || !(params.k_v > 0.0)) throw DomainError("GMRF needs k_u > 0 and k_v > 0");
  const double jitter = params.effective_jitter();
  if (!(jitter >= 0.0)) throw DomainError("GMRF jitter must be >= 0");
  if (counts.size() != static_cast<std::size_t>(num_nodes)) {
    throw DimensionError("counts has " + std::to_string(counts.size()) + " entries for " +
                         std::to_string(num_nodes) + " regions");
  }

  const Index n = num_nodes;
  SpMat lap = graph_laplacian(num_nodes, edges);
  std::vector<Eigen::Triplet<double>> trips;
  for (Index j = 0; j < lap.outerSize(); ++j) {
    for (SpMat::InnerIterator it(lap, j); it; ++it) trips.emplace_back(it.row(), it.col(), params.k_u * it.value());
  }
  for (Index i = 0; i < n; ++i) {
    if (jitter > 0.0) trips.emplace_back(i, i, jitter);
    trips.emplace_back(n + i, n + i, params.k_v);
  }
  SpMat q(2 * n, 2 * n);
  q.setFromTriplets(trips.begin(), trips.end());

  Vec mean = Vec::Zero(2 * n);
  mean.head(n).setConstant(params.offset);

  std::vector<int> rows = observed;
  if (rows.empty()) {
    rows.resize(num_nodes);
    for (int i = 0; i < num_nodes; ++i) rows[i] = i;
  }
  std::vector<Eigen::Triplet<double>> w_trips;
  std::vector<Site> sites;
  sites.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int region = rows[r];
    if (region < 0 || region >= num_nodes) throw DimensionError("observed region index out of range");
    w_trips.emplace_back(static_cast<Index>(r), region, 1.0);
    w_trips.emplace_back(static_cast<Index>(r), n + region, 1.0);
    sites.push_back(Site::poisson(counts[region]));
  }
  SpMat w(static_cast<Index>(rows.size()), 2 * n);
  w.setFromTriplets(w_trips.begin(), w_trips.end());

  return LgmModel(Prior::from_precision(std::move(mean), std::move(q)), Design::sparse(std::move(w)),
                  std::move(sites));
}

}  // namespace dualvi
