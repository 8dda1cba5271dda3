#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bilevel/reformulate.hpp"
#include "json.hpp"

namespace bilevel {

struct SolverConfig {
  double feasibility_tol = 1e-6;
  double optimality_tol = 1e-6;
  int max_outer = 100;
  int max_inner = 200;
  double penalty_init = 10.0;
  double penalty_growth = 10.0;
  double penalty_max = 1e10;
  int starts = 1;
  std::uint64_t seed = 0;
  double time_limit = 60.0;  // CPU seconds per solve
  int threads = 1;

  void validate() const;
};

struct TraceRecord {
  int iteration = 0;
  double objective = 0.0;
  double infeasibility = 0.0;
  double step_norm = 0.0;
  double penalty = 0.0;
};

enum class SolveStatus { Optimal, Infeasible, IterationLimit, TimeLimit };
const char* to_string(SolveStatus s);

struct SolutionReport {
  std::vector<std::string> names;
  Eigen::VectorXd point;
  double objective = 0.0;
  SolveStatus status = SolveStatus::Infeasible;
  double primal_infeasibility = 0.0;
  double stationarity_residual = 0.0;
  double cpu_seconds = 0.0;
  std::vector<TraceRecord> trace;
  Eigen::VectorXd start_point;
  LicqResult licq;
  int outer_iterations = 0;
  int inner_iterations = 0;
  /// Multiplier estimates for the NLP's own rows.
  Eigen::VectorXd equality_multipliers;
  Eigen::VectorXd inequality_multipliers;
  std::string message;

  double value(const std::string& name) const;
};

/// CPU time consumed by the calling thread, in seconds.
double thread_cpu_seconds();

/// Augmented Lagrangian (PHR) with projected Newton inner solves.
///
/// The start is projected onto the variable bounds. Throws NumericalError
/// when the objective is not finite at the projected start.
SolutionReport solve(const SingleLevelNLP& nlp, const Eigen::VectorXd& start, const SolverConfig& cfg);

/// First start: the preferred start, or the box centre with multipliers at
/// zero; the rest Latin hypercube over the primal box with the first start's
/// multipliers. Every start is clamped to the bounds.
std::vector<Eigen::VectorXd> start_points(const SingleLevelNLP& nlp, const SolverConfig& cfg);

struct MultistartResult {
  SolutionReport best;
  std::vector<SolutionReport> all;
};

/// Best Optimal report by objective; otherwise the least infeasible one.
MultistartResult multistart_solve(const SingleLevelNLP& nlp, const SolverConfig& cfg);

enum class Feasibility { Feasible, Infeasible };
Feasibility classify_feasibility(const SolutionReport& report, double tol = 1e-6);

nlohmann::json to_json(const SolutionReport& report);
/// iteration,objective,infeasibility,step_norm,penalty
std::string trace_csv(const SolutionReport& report);
void write_trace_csv(const std::filesystem::path& path, const SolutionReport& report);

}  // namespace bilevel
