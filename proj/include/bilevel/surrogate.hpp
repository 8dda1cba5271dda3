#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bilevel/dataset.hpp"
#include "json.hpp"

namespace bilevel {

enum class Activation { Silu };

/// Three-layer feed-forward network: y = w2 . silu(W1 x + b1) + b2.
///
/// The output layer is the identity so that every input derivative of the
/// network has a closed form; the KKT stationarity rows differentiate it.
struct ShallowNet {
  Eigen::MatrixXd W1;  // hidden x input
  Eigen::VectorXd b1;  // hidden
  Eigen::VectorXd w2;  // hidden (the single output row)
  double b2 = 0.0;
  Activation activation = Activation::Silu;

  Eigen::Index inputs() const { return W1.cols(); }
  Eigen::Index hidden() const { return W1.rows(); }
  /// Sum of absolute values over all parameters.
  double l1_norm() const;
  /// Throws SchemaError on inconsistent shapes or non-finite parameters.
  void validate() const;
};

/// SiLU z*s(z) and its derivatives of any order (order 0 is the function).
double silu_eval(double z, int order);

double forward(const ShallowNet& net, const Eigen::VectorXd& x);
/// Row-wise forward pass; X holds one sample per row.
Eigen::VectorXd forward_batch(const ShallowNet& net, const Eigen::MatrixXd& X);

/// Mean squared error plus lambda1 times the L1 norm of every parameter.
double loss(const ShallowNet& net, const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda1);
/// Same, reading inputs as every non-target column of `batch`.
double loss(const ShallowNet& net, const DataMatrix& batch, double lambda1);

Eigen::VectorXd input_gradient(const ShallowNet& net, const Eigen::VectorXd& x);
Eigen::MatrixXd input_hessian(const ShallowNet& net, const Eigen::VectorXd& x);

/// A mixed input partial of the network with its own gradient and Hessian.
///
/// `directions` lists input positions (with repetition), so {0} is d/dx0 and
/// {0, 0} is d^2/dx0^2. An empty list is the network output itself.
struct NetPartial {
  double value = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;
};
NetPartial net_partial(const ShallowNet& net, const Eigen::VectorXd& x, std::span<const int> directions,
                       int derivative_order = 2);

struct TrainConfig {
  double learning_rate = 1e-2;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  int max_epochs = 5000;
  int patience = 200;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double validation_rmse = 0.0;
};

struct SplitMetrics {
  MetricsReport train;
  MetricsReport validation;
  MetricsReport test;
};

/// A trained surrogate together with everything needed to evaluate it on
/// physical-unit inputs.
struct TrainedModel {
  ShallowNet net;
  std::vector<std::string> input_names;
  std::string target_name;
  ScalingSpec input_scaling;
  ScalingSpec output_scaling;
  SplitMetrics metrics;  // physical units
  TrainConfig config;
  int best_epoch = 0;
  std::vector<EpochRecord> history;

  Eigen::Index inputs() const { return net.inputs(); }
  /// Physical inputs to physical output.
  double predict(const Eigen::VectorXd& x_phys) const;
  Eigen::VectorXd predict_batch(const Eigen::MatrixXd& X_phys) const;
  Eigen::VectorXd scale_inputs(const Eigen::VectorXd& x_phys) const;
  double output_min() const { return output_scaling.ranges.at(0).min; }
  double output_range() const { return output_scaling.ranges.at(0).max - output_scaling.ranges.at(0).min; }
  /// Lowest validation RMSE seen during training, in scaled target units.
  double best_validation_rmse() const;
};

/// Full-batch Adam (decoupled weight decay lambda2) on the L1-regularized MSE,
/// early-stopped on validation RMSE. The training split fixes both scalings.
/// Inputs are every non-target column; splits must carry the same schema.
TrainedModel train(const DataSplits& splits, const TrainConfig& config, int hidden);

nlohmann::json to_json(const TrainedModel& model);
TrainedModel model_from_json(const nlohmann::json& j);
void save_model(const std::filesystem::path& path, const TrainedModel& model);
TrainedModel load_model(const std::filesystem::path& path);

struct LogRange {
  double lo = 0.0;
  double hi = 0.0;
};

struct HyperSearchSpace {
  int hidden_min = 2;
  int hidden_max = 16;
  LogRange learning_rate{1e-5, 1e-1};
  LogRange lambda1{1e-7, 1e-1};
  LogRange lambda2{1e-7, 1e-1};
  int trials = 50;
  int max_epochs = 5000;
  int patience = 200;
  /// When positive, every trial first trains for this many epochs and only
  /// the `finalists` best by validation RMSE get the full budget.
  int screen_epochs = 0;
  int finalists = 5;

  void validate() const;
};

struct TrialCandidate {
  int hidden = 2;
  TrainConfig config;
};

struct TrialRecord {
  int trial = 0;
  int hidden = 0;
  TrainConfig config;
  bool diverged = false;
  std::string error;
  double validation_rmse = 0.0;  // scaled units, best epoch
  int epochs = 0;
  bool finalist = true;  // false when dropped after screening
  double screening_rmse = 0.0;
};

struct HyperSearchResult {
  TrialCandidate best;
  TrainedModel best_model;
  std::vector<TrialRecord> trials;
};

/// Random search over the space: hidden uniform-integer, rates log-uniform.
HyperSearchResult hyper_search(const HyperSearchSpace& space, const DataSplits& splits, std::uint64_t seed,
                               int threads = 1);
/// Trains each candidate and keeps the one with the lowest validation RMSE.
HyperSearchResult evaluate_trials(const std::vector<TrialCandidate>& candidates, const DataSplits& splits,
                                  int threads = 1);

nlohmann::json to_json(const TrialRecord& record);

}  // namespace bilevel
