#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bilevel/envelope.hpp"
#include "bilevel/expression.hpp"
#include "bilevel/surrogate.hpp"

namespace bilevel {

enum class Role { Upper, Lower };
enum class Sense { Minimize, Maximize };

const char* to_string(Sense s);

struct Variable {
  std::string name;
  Role role = Role::Lower;
  double lo = 0.0;
  double hi = 0.0;
};

/// A labelled constraint row: `expr <= 0` or `expr == 0` depending on the list.
struct Constraint {
  std::string label;
  Expression expr;
};

/// Mahalanobis validity constraint on a subset of the lower variables.
struct EnvelopeConstraint {
  MahalanobisEnvelope envelope;
  std::vector<int> vars;
};

/// Optimistic bi-level program over one joint variable vector.
///
/// Variables are indexed in `variables` order; upper variables are fixed
/// parameters of the follower, lower variables are the follower's decisions.
/// All expressions refer to variables by that index.
struct BilevelProblem {
  std::string name;
  std::vector<Variable> variables;

  Expression upper_objective;
  Sense sense = Sense::Minimize;
  std::vector<Constraint> upper_inequalities;
  std::vector<Constraint> upper_equalities;

  Expression lower_objective;
  std::vector<Constraint> lower_inequalities;
  std::vector<Constraint> lower_equalities;
  std::optional<EnvelopeConstraint> envelope;

  /// Lower variables the upper objective reads (empty means derive from the objective support).
  std::vector<int> shared_map;

  std::vector<int> upper_indices() const;
  std::vector<int> lower_indices() const;
  std::vector<std::string> names() const;
  int index_of(const std::string& name) const;
  /// Lower variables read by the upper objective.
  std::vector<int> shared_indices() const;
  /// Throws SchemaError on bad indices, non-finite boxes or an empty lower level.
  void validate() const;
};

/// cc, cnc or ncnc with analytic objectives.
BilevelProblem build_benchmark(const std::string& name);

/// Benchmark with both objectives replaced by trained models; constraints stay analytic.
/// Model inputs are matched to problem variables by column name.
BilevelProblem build_benchmark_surrogate(const std::string& name, std::shared_ptr<const TrainedModel> upper,
                                         std::shared_ptr<const TrainedModel> lower);

/// Bounds of the named benchmark in variable order (x first, then y).
std::vector<Bounds> benchmark_bounds(const std::string& name);
/// Sampled benchmark data with columns x, y, F, f.
DataMatrix benchmark_data(const std::string& name, Eigen::Index n, std::uint64_t seed);

/// Model expression whose inputs are looked up by name among the problem variables.
Expression model_on_variables(std::shared_ptr<const TrainedModel> model, const std::vector<Variable>& variables,
                              bool scaled_output = false);

struct OracleSolution {
  Eigen::VectorXd x_star;
  Eigen::VectorXd y_star;
  Eigen::VectorXd point;  // joint vector
  double F_star = 0.0;
  double f_star = 0.0;
  int grid_resolution = 0;
};

/// Grid enumeration of a problem with one upper and one lower variable.
OracleSolution brute_force_bilevel_oracle(const BilevelProblem& p, int resolution, int threads = 1);

/// True when no grid point of the lower variable is feasible with strictly
/// smaller lower objective at the upper value of `point`.
bool oracle_lower_optimal(const BilevelProblem& p, const Eigen::VectorXd& point, int resolution);

/// Resolves `(surrogate "file" var...)` references in problem files.
using ModelLoader = std::function<std::shared_ptr<const TrainedModel>(const std::string&)>;

/// Prefix expression over named variables, e.g. `(+ (^ (- x 3) 2) (* 2 y))`.
Expression parse_expression(const std::string& text, const std::vector<std::string>& names,
                            const ModelLoader& loader = {});

/// JSON problem file; surrogate paths resolve relative to the file.
BilevelProblem problem_from_json(const nlohmann::json& j, const ModelLoader& loader = {});
BilevelProblem load_problem(const std::filesystem::path& path);

}  // namespace bilevel
