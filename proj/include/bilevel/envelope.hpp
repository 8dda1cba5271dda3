#pragma once

#include <Eigen/Dense>
#include <vector>

#include "bilevel/dataset.hpp"
#include "json.hpp"

namespace bilevel {

/// Data-validity ellipsoid (y - mean)^T inv_cov (y - mean) <= tau^2.
struct MahalanobisEnvelope {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;  // after any ridge
  Eigen::MatrixXd inv_cov;
  double tau = 0.0;
  double percentile = 95.0;
  bool regularized = false;
  /// Training distances in ascending order; lets the radius be re-read at
  /// another percentile without refitting.
  std::vector<double> sorted_distances;

  Eigen::Index dim() const { return mean.size(); }
  double distance_sq(const Eigen::VectorXd& y) const;
  double distance(const Eigen::VectorXd& y) const;
  /// 2 inv_cov (y - mean)
  Eigen::VectorXd gradient(const Eigen::VectorXd& y) const;
  bool contains(const Eigen::VectorXd& y, double slack = 0.0) const;
  /// Same ellipsoid shape, radius taken at percentile p of the stored distances.
  MahalanobisEnvelope at_percentile(double p) const;
  void validate() const;
};

/// Nearest-rank percentile of a sorted sample: the ceil(p/100 * n)-th value.
double nearest_rank(const std::vector<double>& sorted, double p);

/// Mean, sample covariance (ridge-regularized when near singular) and the
/// percentile radius of the rows of `data`.
MahalanobisEnvelope mahalanobis_fit(const Eigen::MatrixXd& data, double percentile);
MahalanobisEnvelope mahalanobis_fit(const DataMatrix& data, double percentile);
double mahalanobis_distance_sq(const MahalanobisEnvelope& env, const Eigen::VectorXd& y);

nlohmann::json to_json(const MahalanobisEnvelope& env);
MahalanobisEnvelope envelope_from_json(const nlohmann::json& j);

}  // namespace bilevel
