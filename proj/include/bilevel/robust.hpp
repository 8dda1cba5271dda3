#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "bilevel/envelope.hpp"
#include "bilevel/nlpsolver.hpp"
#include "bilevel/reformulate.hpp"
#include "bilevel/surrogate.hpp"

namespace bilevel {

/// Largest Mahalanobis ball of perturbations around a design point that
/// keeps the efficiency model above a target.
///
/// All vectors live in the model's scaled input space; the envelope must be
/// fitted there. Its radius bounds the design point and its covariance
/// shapes the perturbation set.
struct RobustProblem {
  std::shared_ptr<const TrainedModel> te_model;
  MahalanobisEnvelope envelope;
  double te_target = 0.0;  // physical units of the model output
  /// Upper bound on the radius as a multiple of the envelope radius.
  double rho_cap_factor = 3.0;

  double rho_cap() const { return rho_cap_factor * envelope.tau; }

  int dim() const { return static_cast<int>(envelope.dim()); }
  void validate() const;
};

/// Variables x (scaled design point), rho, delta, lambda; 2 * dim + 2 in all.
/// rho is capped at rho_cap() and each delta_i at rho_cap() * sqrt(cov_ii).
///
/// max rho s.t. x inside the envelope, target - f(x + delta) <= 0, and the
/// adversary's KKT system for min f(x + delta) over
/// delta^T inv_cov delta <= rho^2 (stationarity, primal feasibility,
/// complementarity, lambda >= 0).
SingleLevelNLP robust_reformulate(const RobustProblem& rp);

struct AdversaryResult {
  Eigen::VectorXd delta;
  double te_min = 0.0;
};

/// Projected gradient descent on w with delta = L w, |w| <= rho
/// (covariance = L L^T), from `starts` seeded starts; keeps the lowest value.
AdversaryResult adversary_resolve(const TrainedModel& model, const Eigen::MatrixXd& covariance,
                                  const Eigen::VectorXd& x, double rho, std::uint64_t seed, int starts = 32);

struct RobustSolution {
  SolveStatus status = SolveStatus::Infeasible;
  Eigen::VectorXd x;      // scaled design point
  Eigen::VectorXd delta;  // worst-case perturbation from the KKT point
  double rho = 0.0;
  double lambda = 0.0;
  double te_nominal = 0.0;
  /// Efficiency at x + delta as returned by the reformulation.
  double te_worst_kkt = 0.0;
  /// Lower of the KKT value and the independent adversary's value.
  double te_worst = 0.0;
  /// The independent adversary found nothing below target - tol.
  bool adversary_confirms = false;
  /// Largest radius the adversary confirms (equals rho when it confirms).
  double rho_certified = 0.0;
  double cpu_seconds = 0.0;
  std::string diagnostics;
  SolutionReport report;
};

/// Multistart solve of the reformulation followed by an independent adversary check.
RobustSolution solve_robust(const RobustProblem& rp, const SolverConfig& cfg);

struct PerturbationStudy {
  int requested = 0;
  int kept = 0;
  double te_mean = 0.0;
  double te_min = 0.0;
  double te_max = 0.0;
  double fraction_above_target = 0.0;
  Eigen::MatrixXd deltas;  // kept samples, one per row (scaled)
  Eigen::VectorXd te;      // model output at x + delta
};

/// delta = rho * u * L n / |n| with n standard normal and u ~ U(0, 1); samples
/// whose x + delta leaves the envelope at `filter_percentile` are dropped.
/// Throws NumericalError when every sample is dropped.
PerturbationStudy perturbation_study(const RobustProblem& rp, const Eigen::VectorXd& x, double rho, int n,
                                     double filter_percentile, std::uint64_t seed);

struct OperatingRange {
  std::string name;
  double nominal = 0.0;  // physical units
  double worst = 0.0;    // physical units at x + delta
  double lo() const { return std::min(nominal, worst); }
  double hi() const { return std::max(nominal, worst); }
};

/// Per input: the nominal value and its worst-case perturbed value in physical units.
std::vector<OperatingRange> operating_ranges(const RobustSolution& sol, const ScalingSpec& scaling);
std::vector<OperatingRange> operating_ranges(const RobustSolution& sol, const TrainedModel& model);

nlohmann::json to_json(const RobustSolution& sol, const TrainedModel& model);

}  // namespace bilevel
