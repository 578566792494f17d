#include "dualvi/tasks.hpp"

#include "dualvi/errors.hpp"

#include <Eigen/SparseCholesky>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <ostream>
#include <random>
#include <thread>

namespace dualvi {

namespace {

constexpr double kMinVariance = 1e-12;
constexpr double kMinProbability = 1e-12;

std::mt19937_64 point_stream(std::uint64_t seed, std::size_t point) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(point), static_cast<std::uint32_t>(point >> 32)};
  return std::mt19937_64(seq);
}

// Square root factor of a predictive covariance; tiny or negative
// eigenvalues from cancellation are clamped.
Mat sampling_factor(const Mat& cov) {
  if (cov.rows() == 1) {
    double var = cov(0, 0);
    if (var < kMinVariance) {
      if (var < 0.0) std::cerr << "warning: predictive variance " << var << " clamped to " << kMinVariance << '\n';
      var = kMinVariance;
    }
    return Mat::Constant(1, 1, std::sqrt(var));
  }
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() == Eigen::Success && llt.matrixLLT().diagonal().minCoeff() > std::sqrt(kMinVariance)) {
    return llt.matrixL();
  }
  Eigen::SelfAdjointEigenSolver<Mat> eig(cov);
  Vec values = eig.eigenvalues();
  if (values.minCoeff() < 0.0) {
    std::cerr << "warning: predictive covariance not positive definite; eigenvalues clamped to " << kMinVariance
              << '\n';
  }
  values = values.cwiseMax(kMinVariance);
  return eig.eigenvectors() * values.cwiseSqrt().asDiagonal();
}

template <typename Fn>
void for_each_cell(std::size_t count, bool parallel, Fn&& fn) {
  const unsigned workers = parallel ? std::max(1u, std::thread::hardware_concurrency()) : 1u;
  if (workers <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (unsigned w = 0; w < std::min<std::size_t>(workers, count); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) fn(i);
    });
  }
}

}  // namespace

Split train_test_split(int n, double train_fraction, std::uint64_t seed) {
  if (n < 0) throw DimensionError("split size must be >= 0");
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw DomainError("train fraction must lie in (0, 1]");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * n));
  Split s;
  s.train.assign(order.begin(), order.begin() + n_train);
  s.test.assign(order.begin() + n_train, order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

Vec mc_predictive_probabilities(const PredictiveGaussian& pred, const std::vector<Site>& test_sites, int num_samples,
                                std::uint64_t seed) {
  if (num_samples < 1) throw DomainError("num_samples must be >= 1");
  if (pred.means.size() != test_sites.size()) throw DimensionError("one predictive block per test site required");
  Vec probs(static_cast<Index>(test_sites.size()));
  for (std::size_t t = 0; t < test_sites.size(); ++t) {
    const Vec& mean = pred.means[t];
    const Mat root = sampling_factor(pred.covs[t]);
    auto rng = point_stream(seed, t);
    std::normal_distribution<double> normal;
    Vec z(mean.size());
    double total = 0.0;
    for (int i = 0; i < num_samples; ++i) {
      for (Index k = 0; k < z.size(); ++k) z(k) = normal(rng);
      total += std::exp(test_sites[t].log_likelihood(mean + root * z));
    }
    probs(static_cast<Index>(t)) = total / num_samples;
  }
  return probs;
}

Mat mc_class_probabilities(const PredictiveGaussian& pred, int num_classes, int num_samples, std::uint64_t seed) {
  if (num_samples < 1) throw DomainError("num_samples must be >= 1");
  const auto count = static_cast<Index>(pred.means.size());
  Mat probs = Mat::Zero(count, num_classes);
  for (Index t = 0; t < count; ++t) {
    const Vec& mean = pred.means[t];
    if (mean.size() != num_classes - 1) throw DimensionError("predictive block must have num_classes - 1 entries");
    const Mat root = sampling_factor(pred.covs[t]);
    auto rng = point_stream(seed, static_cast<std::size_t>(t));
    std::normal_distribution<double> normal;
    Vec z(mean.size());
    Vec acc = Vec::Zero(num_classes);
    for (int i = 0; i < num_samples; ++i) {
      for (Index k = 0; k < z.size(); ++k) z(k) = normal(rng);
      Vec p = reference_softmax(mean + root * z);
      acc.head(num_classes - 1) += p;
      acc(num_classes - 1) += 1.0 - p.sum();
    }
    probs.row(t) = acc.transpose() / acc.sum();
  }
  return probs;
}

double prediction_error(const Vec& predictive_probs) {
  if (predictive_probs.size() == 0) return 0.0;
  double total = 0.0;
  for (Index t = 0; t < predictive_probs.size(); ++t) {
    total -= std::log2(std::max(predictive_probs(t), kMinProbability));
  }
  return total / static_cast<double>(predictive_probs.size());
}

double prediction_error(const Mat& class_probs, const std::vector<int>& held_out_labels) {
  if (static_cast<std::size_t>(class_probs.rows()) != held_out_labels.size()) {
    throw DimensionError("one probability row per held-out label required");
  }
  Vec picked(class_probs.rows());
  for (Index t = 0; t < class_probs.rows(); ++t) picked(t) = class_probs(t, held_out_labels[t]);
  return prediction_error(picked);
}

Vec mc_predict(const ExperimentTask& task, const LgmModel& model, const PosteriorGaussian& posterior,
               const Hyperparameters& hp, int num_samples, std::uint64_t seed) {
  return mc_predictive_probabilities(task.predictive(model, posterior, hp), task.test_sites(), num_samples, seed);
}

// ---------------------------------------------------------------------------
// GP classification

GpClassificationTask::GpClassificationTask(ClassificationData data, Split split)
    : data_(std::move(data)), split_(std::move(split)) {
  if (data_.num_classes < 2) throw DomainError("classification needs at least 2 classes");
  if (static_cast<std::size_t>(data_.features.rows()) != data_.labels.size()) {
    throw DimensionError("features and labels disagree on the number of examples");
  }
  for (int y : data_.labels) {
    if (y < 0 || y >= data_.num_classes) throw DomainError("label outside [0, num_classes)");
  }
  if (split_.train.empty()) throw DimensionError("training split is empty");
  train_x_.resize(static_cast<Index>(split_.train.size()), data_.features.cols());
  for (std::size_t i = 0; i < split_.train.size(); ++i) train_x_.row(static_cast<Index>(i)) = data_.features.row(split_.train[i]);
  test_x_.resize(static_cast<Index>(split_.test.size()), data_.features.cols());
  for (std::size_t i = 0; i < split_.test.size(); ++i) test_x_.row(static_cast<Index>(i)) = data_.features.row(split_.test[i]);
}

namespace {

double gp_jitter(const Hyperparameters& hp) {
  const double sigma = hp.get("sigma");
  return hp.values().count("jitter") ? hp.get("jitter") : 1e-6 * sigma * sigma;
}

}  // namespace

LgmModel GpClassificationTask::build_model(const Hyperparameters& hp) const {
  hp.validate();
  const double s = hp.get("s");
  const double sigma = hp.get("sigma");
  const int k = data_.num_classes;
  const auto n = train_x_.rows();

  Mat base = se_kernel(train_x_, s, sigma);
  base.diagonal().array() += gp_jitter(hp);
  Prior prior = build_block_prior(base, k);

  std::vector<Eigen::Triplet<double>> trips;
  std::vector<Site> sites;
  sites.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    for (int c = 0; c < k - 1; ++c) {
      const Index row = i * (k - 1) + c;
      trips.emplace_back(row, c * n + i, 1.0);
      trips.emplace_back(row, (k - 1) * n + i, -1.0);
    }
    sites.push_back(Site::multi_logit(k, data_.labels[split_.train[static_cast<std::size_t>(i)]]));
  }
  SpMat w(n * (k - 1), n * k);
  w.setFromTriplets(trips.begin(), trips.end());
  return LgmModel(std::move(prior), Design::sparse(std::move(w)), std::move(sites));
}

PredictiveGaussian GpClassificationTask::predictive(const LgmModel& model, const PosteriorGaussian& posterior,
                                                    const Hyperparameters& hp) const {
  const double s = hp.get("s");
  const double sigma = hp.get("sigma");
  const int k = data_.num_classes;
  const Index n = train_x_.rows();
  const Index t_count = test_x_.rows();

  const Mat cross = se_kernel(test_x_, train_x_, s, sigma);  // T x n
  const Vec u = model.design().transpose_times(model.alpha(posterior.lambda));

  // latent column (t, c) holds k(x_t, X_train) in block c
  Mat g = Mat::Zero(model.latent_dim(), k * t_count);
  for (Index t = 0; t < t_count; ++t) {
    for (int c = 0; c < k; ++c) g.block(c * n, t * k + c, n, 1) = cross.row(t).transpose();
  }
  const Mat wg = model.design().times(g);
  const Mat r = posterior.factor.row_space_solve(wg);

  const double prior_var = sigma * sigma + gp_jitter(hp);
  Mat diff = Mat::Zero(k - 1, k);
  diff.leftCols(k - 1).setIdentity();
  diff.col(k - 1).setConstant(-1.0);

  PredictiveGaussian out;
  out.means.reserve(static_cast<std::size_t>(t_count));
  out.covs.reserve(static_cast<std::size_t>(t_count));
  for (Index t = 0; t < t_count; ++t) {
    Vec f_mean(k);
    for (int c = 0; c < k; ++c) f_mean(c) = -cross.row(t).dot(u.segment(c * n, n));
    Mat f_cov = prior_var * Mat::Identity(k, k) - wg.middleCols(t * k, k).transpose() * r.middleCols(t * k, k);
    f_cov = 0.5 * (f_cov + f_cov.transpose());
    out.means.push_back(diff * f_mean);
    out.covs.push_back(diff * f_cov * diff.transpose());
  }
  return out;
}

std::vector<Site> GpClassificationTask::test_sites() const {
  std::vector<Site> sites;
  sites.reserve(split_.test.size());
  for (int idx : split_.test) sites.push_back(Site::multi_logit(data_.num_classes, data_.labels[idx]));
  return sites;
}

Mat GpClassificationTask::class_probabilities(const LgmModel& model, const PosteriorGaussian& posterior,
                                              const Hyperparameters& hp, int num_samples, std::uint64_t seed) const {
  return mc_class_probabilities(predictive(model, posterior, hp), data_.num_classes, num_samples, seed);
}

// ---------------------------------------------------------------------------
// GMRF

GmrfParams gmrf_params(const Hyperparameters& hp) {
  hp.validate();
  GmrfParams p;
  p.k_u = hp.get("k_u");
  p.k_v = hp.get("k_v");
  if (hp.values().count("jitter")) p.jitter = hp.get("jitter");
  p.offset = hp.values().count("offset") ? hp.get("offset") : 0.0;
  return p;
}

GmrfPoissonTask::GmrfPoissonTask(GmrfData data, Split split) : data_(std::move(data)), split_(std::move(split)) {
  if (data_.counts.size() != static_cast<std::size_t>(data_.num_nodes)) {
    throw DimensionError("one count per region required");
  }
  if (split_.train.empty()) throw DimensionError("training split is empty");
}

LgmModel GmrfPoissonTask::build_model(const Hyperparameters& hp) const {
  return build_gmrf_model(data_.num_nodes, data_.edges, gmrf_params(hp), data_.counts, split_.train);
}

PredictiveGaussian GmrfPoissonTask::predictive(const LgmModel& model, const PosteriorGaussian& posterior,
                                               const Hyperparameters&) const {
  const Index n = data_.num_nodes;
  PredictiveGaussian out;
  for (int region : split_.test) {
    Vec w = Vec::Zero(model.latent_dim());
    w(region) = 1.0;
    w(n + region) = 1.0;
    out.means.push_back(Vec::Constant(1, w.dot(posterior.mean)));
    out.covs.push_back(Mat::Constant(1, 1, w.dot(posterior.factor.solve(w))));
  }
  return out;
}

std::vector<Site> GmrfPoissonTask::test_sites() const {
  std::vector<Site> sites;
  sites.reserve(split_.test.size());
  for (int region : split_.test) sites.push_back(Site::poisson(data_.counts[region]));
  return sites;
}

// ---------------------------------------------------------------------------
// Grid search

void GridSpec::validate() const {
  for (const GridAxis* axis : {&first, &second}) {
    if (axis->name.empty()) throw DomainError("grid axis needs a hyperparameter name");
    if (axis->values.empty()) throw DomainError("grid axis '" + axis->name + "' has no values");
  }
}

std::optional<std::size_t> GridResult::argmin_neg_lower_bound() const {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i].failed) continue;
    if (!best || cells[i].neg_lower_bound < cells[*best].neg_lower_bound) best = i;
  }
  return best;
}

std::optional<std::size_t> GridResult::argmin_pred_error() const {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (cells[i].failed) continue;
    if (!best || cells[i].pred_error < cells[*best].pred_error) best = i;
  }
  return best;
}

std::size_t GridResult::num_failed() const {
  return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const GridCell& c) { return c.failed; }));
}

void write_grid_csv(std::ostream& out, const GridResult& result) {
  out << "hp1,hp2,neg_lower_bound,pred_error,iters,wall_sec,failed\n";
  out << std::setprecision(17);
  for (const GridCell& c : result.cells) {
    out << c.hp1 << ',' << c.hp2 << ',' << c.neg_lower_bound << ',' << c.pred_error << ',' << c.iters << ','
        << c.wall_sec << ',' << (c.failed ? 1 : 0) << '\n';
  }
}

GridResult grid_search(const ExperimentTask& task, const GridSpec& grid, const GridOptions& options) {
  grid.validate();
  GridResult result{grid, std::vector<GridCell>(grid.size())};
  const std::size_t cols = grid.second.values.size();

  for_each_cell(grid.size(), options.parallel, [&](std::size_t idx) {
    GridCell& cell = result.cells[idx];
    cell.hp1 = grid.first.values[idx / cols];
    cell.hp2 = grid.second.values[idx % cols];
    const auto start = std::chrono::steady_clock::now();
    try {
      Hyperparameters hp = options.base;
      hp.set(grid.first.name, cell.hp1);
      hp.set(grid.second.name, cell.hp2);
      LgmModel model = task.build_model(hp);
      FitResult fit = fit_dual(model, options.solver);
      cell.neg_lower_bound = -fit.lower_bound;
      cell.iters = fit.iterations;
      cell.pred_error =
          prediction_error(mc_predict(task, model, fit.posterior, hp, options.mc_samples, options.mc_seed));
    } catch (const std::exception& e) {
      cell.failed = true;
      cell.error = e.what();
    }
    cell.wall_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  });
  return result;
}

// ---------------------------------------------------------------------------
// Synthetic GMRF data

std::vector<Edge> lattice_edges(int side) {
  std::vector<Edge> edges;
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      const int i = r * side + c;
      if (c + 1 < side) edges.push_back({i, i + 1});
      if (r + 1 < side) edges.push_back({i, i + side});
    }
  }
  return edges;
}

GmrfData synth_gmrf_dataset(int grid_side, double k_u, double k_v, double offset, std::uint64_t seed) {
  if (grid_side < 2) throw DomainError("grid_side must be >= 2");
  if (!(k_u > 0.0) || !(k_v > 0.0)) throw DomainError("k_u and k_v must be > 0");
  GmrfData data;
  data.num_nodes = grid_side * grid_side;
  data.edges = lattice_edges(grid_side);
  const Index n = data.num_nodes;

  SpMat q = k_u * graph_laplacian(data.num_nodes, data.edges);
  for (Index i = 0; i < n; ++i) q.coeffRef(i, i) += 1e-6 * k_u;
  Eigen::SimplicialLLT<SpMat, Eigen::Lower, Eigen::AMDOrdering<int>> llt(q);
  if (llt.info() != Eigen::Success) throw FactorizationError("lattice GMRF precision is not positive definite");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Vec z(n);
  for (Index i = 0; i < n; ++i) z(i) = normal(rng);
  Vec y = llt.matrixU().solve(z);
  data.true_u = llt.permutationPinv() * y;
  data.true_u.array() -= data.true_u.mean();

  data.true_v.resize(n);
  const double sd_v = 1.0 / std::sqrt(k_v);
  for (Index i = 0; i < n; ++i) data.true_v(i) = sd_v * normal(rng);

  data.counts.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    std::poisson_distribution<int> poisson(std::exp(offset + data.true_u(i) + data.true_v(i)));
    data.counts[static_cast<std::size_t>(i)] = poisson(rng);
  }
  return data;
}

}  // namespace dualvi
