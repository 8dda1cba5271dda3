#include "bilevel/envelope.hpp"

#include <algorithm>
#include <cmath>

#include "bilevel/error.hpp"

namespace bilevel {

namespace {

void check_dim(const MahalanobisEnvelope& env, const Eigen::VectorXd& y) {
  if (y.size() != env.dim())
    throw SchemaError("envelope has dimension " + std::to_string(env.dim()) + ", point has " +
                      std::to_string(y.size()));
}

void check_percentile(double p) {
  if (!(p > 0.0 && p < 100.0)) throw UsageError("percentile must lie in (0, 100)");
}

}  // namespace

double MahalanobisEnvelope::distance_sq(const Eigen::VectorXd& y) const {
  check_dim(*this, y);
  const Eigen::VectorXd d = y - mean;
  return d.dot(inv_cov * d);
}

double MahalanobisEnvelope::distance(const Eigen::VectorXd& y) const { return std::sqrt(distance_sq(y)); }

Eigen::VectorXd MahalanobisEnvelope::gradient(const Eigen::VectorXd& y) const {
  check_dim(*this, y);
  return 2.0 * inv_cov * (y - mean);
}

bool MahalanobisEnvelope::contains(const Eigen::VectorXd& y, double slack) const {
  return distance_sq(y) <= tau * tau + slack;
}

MahalanobisEnvelope MahalanobisEnvelope::at_percentile(double p) const {
  check_percentile(p);
  if (sorted_distances.empty()) throw UsageError("envelope carries no training distances");
  MahalanobisEnvelope out = *this;
  out.percentile = p;
  out.tau = nearest_rank(sorted_distances, p);
  return out;
}

void MahalanobisEnvelope::validate() const {
  const auto n = mean.size();
  if (n == 0) throw SchemaError("envelope has no dimensions");
  if (inv_cov.rows() != n || inv_cov.cols() != n) throw SchemaError("envelope inverse covariance has wrong shape");
  if (!mean.allFinite() || !inv_cov.allFinite()) throw SchemaError("envelope contains non-finite values");
  if ((inv_cov - inv_cov.transpose()).cwiseAbs().maxCoeff() > 1e-9 * (1.0 + inv_cov.cwiseAbs().maxCoeff()))
    throw SchemaError("envelope inverse covariance is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inv_cov);
  if (es.eigenvalues().minCoeff() <= 0.0) throw SchemaError("envelope inverse covariance is not positive definite");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw SchemaError("envelope radius must be positive");
  check_percentile(percentile);
}

double nearest_rank(const std::vector<double>& sorted, double p) {
  check_percentile(p);
  if (sorted.empty()) throw UsageError("nearest_rank of an empty sample");
  const auto n = static_cast<double>(sorted.size());
  auto k = static_cast<std::size_t>(std::ceil(p / 100.0 * n - 1e-9));
  k = std::clamp<std::size_t>(k, 1, sorted.size());
  return sorted[k - 1];
}

MahalanobisEnvelope mahalanobis_fit(const Eigen::MatrixXd& data, double percentile) {
  check_percentile(percentile);
  const auto n = data.rows();
  const auto d = data.cols();
  if (d == 0) throw SchemaError("envelope fit needs at least one column");
  if (n <= d) throw SchemaError("envelope fit needs more rows (" + std::to_string(n) + ") than columns (" +
                                std::to_string(d) + ")");
  if (!data.allFinite()) throw SchemaError("envelope fit data contains non-finite values");

  MahalanobisEnvelope env;
  env.percentile = percentile;
  env.mean = data.colwise().mean().transpose();
  const Eigen::MatrixXd centered = data.rowwise() - env.mean.transpose();
  env.covariance = centered.transpose() * centered / static_cast<double>(n - 1);

  const double scale = env.covariance.trace() / static_cast<double>(d);
  if (!(scale > 0.0)) throw NumericalError("envelope fit: every column is constant");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(env.covariance);
  if (es.eigenvalues().minCoeff() < 1e-10 * scale) {
    env.covariance.diagonal().array() += 1e-8 * scale;
    env.regularized = true;
  }
  Eigen::LLT<Eigen::MatrixXd> llt(env.covariance);
  if (llt.info() != Eigen::Success) throw NumericalError("envelope covariance is singular after regularization");
  env.inv_cov = llt.solve(Eigen::MatrixXd::Identity(d, d));
  env.inv_cov = 0.5 * (env.inv_cov + env.inv_cov.transpose());

  env.sorted_distances.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd c = centered.row(i).transpose();
    env.sorted_distances[static_cast<std::size_t>(i)] = std::sqrt(std::max(0.0, c.dot(env.inv_cov * c)));
  }
  std::sort(env.sorted_distances.begin(), env.sorted_distances.end());
  env.tau = nearest_rank(env.sorted_distances, percentile);
  if (!(env.tau > 0.0)) throw NumericalError("envelope radius is zero");
  return env;
}

MahalanobisEnvelope mahalanobis_fit(const DataMatrix& data, double percentile) {
  return mahalanobis_fit(data.values(), percentile);
}

double mahalanobis_distance_sq(const MahalanobisEnvelope& env, const Eigen::VectorXd& y) { return env.distance_sq(y); }

nlohmann::json to_json(const MahalanobisEnvelope& env) {
  const auto d = env.dim();
  std::vector<double> inv;
  std::vector<double> cov;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) {
      inv.push_back(env.inv_cov(i, j));
      cov.push_back(env.covariance(i, j));
    }
  return {{"dim", d},
          {"mean", std::vector<double>(env.mean.data(), env.mean.data() + d)},
          {"inverse_covariance", inv},
          {"covariance", cov},
          {"tau", env.tau},
          {"percentile", env.percentile},
          {"regularized", env.regularized},
          {"sorted_distances", env.sorted_distances}};
}

MahalanobisEnvelope envelope_from_json(const nlohmann::json& j) {
  try {
    MahalanobisEnvelope env;
    const auto mean = j.at("mean").get<std::vector<double>>();
    const auto d = static_cast<Eigen::Index>(mean.size());
    env.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), d);
    const auto inv = j.at("inverse_covariance").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(inv.size()) != d * d) throw SchemaError("envelope inverse covariance size mismatch");
    env.inv_cov = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(inv.data(), d, d);
    if (j.contains("covariance")) {
      const auto cov = j.at("covariance").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(cov.size()) != d * d) throw SchemaError("envelope covariance size mismatch");
      env.covariance = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(cov.data(), d, d);
    } else {
      env.covariance = env.inv_cov.inverse();
    }
    env.tau = j.at("tau").get<double>();
    env.percentile = j.at("percentile").get<double>();
    env.regularized = j.value("regularized", false);
    env.sorted_distances = j.value("sorted_distances", std::vector<double>{});
    env.validate();
    return env;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("invalid envelope JSON: ") + e.what());
  }
}

}  // namespace bilevel
