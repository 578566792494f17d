#pragma once

#include "dualvi/dual.hpp"
#include "dualvi/model.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace dualvi {

struct ClassificationData {
  Mat features;  // one example per row
  std::vector<int> labels;  // 0 .. num_classes-1
  int num_classes = 0;
};

struct GmrfData {
  int num_nodes = 0;
  std::vector<Edge> edges;
  std::vector<int> counts;
  /// Ground-truth latents when the data is synthetic; empty otherwise.
  Vec true_u;
  Vec true_v;
};

struct Split {
  std::vector<int> train;
  std::vector<int> test;
};

/// Deterministic shuffle of 0..n-1; the first round(fraction * n) indices
/// train. Both parts are returned sorted.
Split train_test_split(int n, double train_fraction, std::uint64_t seed);

/// Gaussian over the linear predictors of held-out points, one block per point.
struct PredictiveGaussian {
  std::vector<Vec> means;
  std::vector<Mat> covs;
};

/// Monte-Carlo estimate of p(y_t | data) for each test site under its exact
/// likelihood. Each point draws from its own stream seeded by (seed, t), so
/// results do not depend on evaluation order.
Vec mc_predictive_probabilities(const PredictiveGaussian& pred, const std::vector<Site>& test_sites, int num_samples,
                                std::uint64_t seed);

/// Multi-logit class probabilities (reference class last); rows sum to one.
Mat mc_class_probabilities(const PredictiveGaussian& pred, int num_classes, int num_samples, std::uint64_t seed);

/// Mean of -log2 p over points, with p clamped below at 1e-12.
double prediction_error(const Vec& predictive_probs);
/// Same, picking p = class_probs(t, label_t).
double prediction_error(const Mat& class_probs, const std::vector<int>& held_out_labels);

/// A dataset together with its split and the recipe that turns
/// hyperparameters into a model over the training part.
class ExperimentTask {
 public:
  virtual ~ExperimentTask() = default;
  virtual LgmModel build_model(const Hyperparameters& hp) const = 0;
  virtual PredictiveGaussian predictive(const LgmModel& model, const PosteriorGaussian& posterior,
                                        const Hyperparameters& hp) const = 0;
  virtual std::vector<Site> test_sites() const = 0;
};

/// Predictive probabilities of the held-out observations.
Vec mc_predict(const ExperimentTask& task, const LgmModel& model, const PosteriorGaussian& posterior,
               const Hyperparameters& hp, int num_samples, std::uint64_t seed);

/// K-way GP classification: K independent zero-mean GPs with a shared SE
/// kernel; site n sees the K-1 differences z_k(x_n) - z_K(x_n). Hyperparameters
/// s, sigma (or log_s, log_sigma) and optional jitter (default 1e-6 sigma^2).
class GpClassificationTask : public ExperimentTask {
 public:
  GpClassificationTask(ClassificationData data, Split split);

  LgmModel build_model(const Hyperparameters& hp) const override;
  PredictiveGaussian predictive(const LgmModel& model, const PosteriorGaussian& posterior,
                                const Hyperparameters& hp) const override;
  std::vector<Site> test_sites() const override;

  const ClassificationData& data() const { return data_; }
  const Split& split() const { return split_; }
  Mat class_probabilities(const LgmModel& model, const PosteriorGaussian& posterior, const Hyperparameters& hp,
                          int num_samples, std::uint64_t seed) const;

 private:
  ClassificationData data_;
  Split split_;
  Mat train_x_;
  Mat test_x_;
};

/// Poisson GMRF disease-mapping model with held-out regions. Hyperparameters
/// k_u, k_v, optional jitter and offset.
class GmrfPoissonTask : public ExperimentTask {
 public:
  GmrfPoissonTask(GmrfData data, Split split);

  LgmModel build_model(const Hyperparameters& hp) const override;
  PredictiveGaussian predictive(const LgmModel& model, const PosteriorGaussian& posterior,
                                const Hyperparameters& hp) const override;
  std::vector<Site> test_sites() const override;

  const GmrfData& data() const { return data_; }
  const Split& split() const { return split_; }

 private:
  GmrfData data_;
  Split split_;
};

GmrfParams gmrf_params(const Hyperparameters& hp);

struct GridAxis {
  std::string name;
  std::vector<double> values;
};

struct GridSpec {
  GridAxis first;
  GridAxis second;
  std::size_t size() const { return first.values.size() * second.values.size(); }
  void validate() const;
};

struct GridCell {
  double hp1 = 0.0;
  double hp2 = 0.0;
  double neg_lower_bound = 0.0;
  double pred_error = 0.0;
  int iters = 0;
  double wall_sec = 0.0;
  bool failed = false;
  std::string error;
};

struct GridResult {
  GridSpec spec;
  /// Row-major over (first, second).
  std::vector<GridCell> cells;

  const GridCell& at(std::size_t i, std::size_t j) const { return cells[i * spec.second.values.size() + j]; }
  /// Cell with the smallest negative lower bound among successful fits.
  std::optional<std::size_t> argmin_neg_lower_bound() const;
  std::optional<std::size_t> argmin_pred_error() const;
  std::size_t num_failed() const;
};

/// Header `hp1,hp2,neg_lower_bound,pred_error,iters,wall_sec,failed`.
void write_grid_csv(std::ostream& out, const GridResult& result);

struct GridOptions {
  SolverOptions solver;
  Hyperparameters base;
  int mc_samples = 2000;
  std::uint64_t mc_seed = 0;
  bool parallel = false;
};

/// Fits the dual at every grid point. A failing cell is recorded, never fatal.
GridResult grid_search(const ExperimentTask& task, const GridSpec& grid, const GridOptions& options);

/// Edges of a side x side 4-neighbour lattice; node (r, c) has index r*side + c.
std::vector<Edge> lattice_edges(int side);

/// Samples u from the first-order intrinsic GMRF (jittered, then centred to
/// sum zero), v ~ N(0, I / k_v) and counts ~ Poisson(exp(offset + u + v)).
GmrfData synth_gmrf_dataset(int grid_side, double k_u, double k_v, double offset, std::uint64_t seed);

}  // namespace dualvi
