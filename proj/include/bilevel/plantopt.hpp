#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "bilevel/dataset.hpp"
#include "bilevel/envelope.hpp"
#include "bilevel/nlpsolver.hpp"
#include "bilevel/problem.hpp"
#include "bilevel/surrogate.hpp"

namespace bilevel {

struct PlantVariable {
  std::string name;
  std::string unit;
  double lo = 0.0;
  double hi = 1.0;
};

/// Operating variables of a plant-like system and how the synthetic data relate them.
struct PlantSpec {
  std::string name;
  std::vector<PlantVariable> variables;
  /// Variables the Power model reads; THR reads all of them.
  std::vector<int> upper_subset;
  /// Correlation of the latent Gaussian inputs.
  Eigen::MatrixXd correlation;
  /// Also emit a thermal-efficiency column (percent).
  bool with_efficiency = false;

  int lower_dim() const { return static_cast<int>(variables.size()); }
  std::vector<std::string> names() const;
  std::vector<std::string> upper_names() const;
  void validate() const;
};

/// Eight coal-style variables; Power excludes RHST and CV.
PlantSpec coal_plant_spec();
/// Nine gas-turbine-style variables; Power excludes FGTI, FGT and PHGOT; adds TE.
PlantSpec gas_plant_spec();
/// "plant-coal-synth" or "plant-gas-synth".
PlantSpec plant_spec(const std::string& name);

/// Correlated Gaussian operating points truncated to the physical bounds,
/// with Power, THR (and TE) responses. Columns: variables, Power, THR[, TE].
DataMatrix synth_plant_data(const PlantSpec& spec, Eigen::Index n, std::uint64_t seed);

/// max Power over the shared subset, follower min THR over all variables
/// inside the envelope and the [0, 1] box.
///
/// The joint vector is the THR model's scaled input space. Both objectives
/// are the models' scaled outputs; the envelope must be fitted in the same
/// scaled space.
BilevelProblem build_plant_bilevel(std::shared_ptr<const TrainedModel> power, std::shared_ptr<const TrainedModel> thr,
                                   const MahalanobisEnvelope& env, const PlantSpec& spec);

/// Envelope of `data` expressed in the THR model's scaled input space.
MahalanobisEnvelope plant_envelope(const TrainedModel& thr, const DataMatrix& data, const PlantSpec& spec,
                                   double percentile);

/// Residuals of the follower's smoothed KKT system evaluated directly from
/// the network and envelope, without the expression layer.
struct PlantKktCheck {
  double box_violation = 0.0;
  double multiplier_violation = 0.0;
  double envelope_violation = 0.0;
  double envelope_complementarity = 0.0;
  double fb_residual = 0.0;
  double stationarity = 0.0;
  double max_violation() const;
};
PlantKktCheck check_plant_point(const TrainedModel& thr, const MahalanobisEnvelope& env, const SingleLevelNLP& nlp,
                                const Eigen::VectorXd& point, const KKTOptions& opts = {});

struct TauSweepRow {
  double percentile = 0.0;
  double tau = 0.0;
  double thr = 0.0;    // physical units
  double power = 0.0;  // physical units
  SolveStatus status = SolveStatus::Infeasible;
  double cpu_seconds = 0.0;
  double primal_infeasibility = 0.0;
  double stationarity_residual = 0.0;
  PlantKktCheck check;
  Eigen::VectorXd scaled_point;    // joint vector
  Eigen::VectorXd physical_point;  // operating variables only
  SolutionReport report;
};

std::vector<TauSweepRow> tau_sweep(std::shared_ptr<const TrainedModel> power, std::shared_ptr<const TrainedModel> thr,
                                   const DataMatrix& data, const PlantSpec& spec,
                                   const std::vector<double>& percentiles, const SolverConfig& cfg);

/// percentile,tau,THR,Power,status,cpu_seconds,primal_infeasibility,stationarity_residual
std::string tau_sweep_csv(const std::vector<TauSweepRow>& rows);
nlohmann::json to_json(const TauSweepRow& row, const std::vector<std::string>& names);

}  // namespace bilevel
