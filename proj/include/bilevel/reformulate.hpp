#pragma once

#include <Eigen/Dense>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "bilevel/envelope.hpp"
#include "bilevel/expression.hpp"
#include "bilevel/problem.hpp"

namespace bilevel {

/// a + b - sqrt(a^2 + b^2); zero exactly on the complementarity set.
double fb(double a, double b);
/// sqrt(a^2 + b^2 + eps) - a - b; smooth, roots satisfy a, b > 0 and ab = eps/2.
double fb_perturbed(double a, double b, double eps);
/// Partial derivatives of fb_perturbed with respect to (a, b).
Eigen::Vector2d fb_perturbed_gradient(double a, double b, double eps);
/// fb_perturbed(a, b, eps) as an expression.
Expression fb_perturbed_expr(const Expression& a, const Expression& b, double eps);

enum class VarKind { Primal, Multiplier };

struct NlpVariable {
  std::string name;
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  VarKind kind = VarKind::Primal;
};

enum class RowKind {
  Stationarity,
  Complementarity,
  FischerBurmeister,
  LowerInequality,
  LowerEquality,
  Envelope,
  UpperInequality,
  UpperEquality,
  Other
};
const char* to_string(RowKind k);

struct NlpRow {
  std::string label;
  RowKind kind = RowKind::Other;
  Expression expr;
};

/// Constraints and columns used for constraint-qualification checks.
///
/// For KKT reformulations this is the follower's own constraint system
/// (inequalities including its box rows, equalities, envelope) with respect
/// to the follower's variables, which is where the follower's multipliers
/// have to be unique.
struct LicqView {
  std::vector<int> columns;
  std::vector<NlpRow> inequalities;
  std::vector<NlpRow> equalities;
};

/// min/max objective s.t. equalities == 0, inequalities <= 0, lo <= z <= hi.
struct SingleLevelNLP {
  std::string name;
  std::vector<NlpVariable> variables;
  Expression objective;
  Sense sense = Sense::Minimize;
  std::vector<NlpRow> equalities;
  std::vector<NlpRow> inequalities;
  std::optional<LicqView> licq_view;
  /// Preferred first start over all variables (e.g. envelope mean); box centre and zero multipliers when absent.
  std::optional<Eigen::VectorXd> preferred_start;

  Eigen::Index size() const { return static_cast<Eigen::Index>(variables.size()); }
  std::vector<std::string> names() const;
  Eigen::VectorXd lower_bounds() const;
  Eigen::VectorXd upper_bounds() const;
  int index_of(const std::string& name) const;
  std::vector<int> primal_indices() const;
  std::vector<int> multiplier_indices() const;

  /// Max over |h|, max(g, 0) and bound violations.
  double primal_infeasibility(const Eigen::VectorXd& z) const;
  /// Largest |row| over stationarity rows (0 when there are none).
  double stationarity_residual(const Eigen::VectorXd& z) const;
  /// One line per variable and per row with its symbolic form.
  std::string listing() const;
  void validate() const;
};

struct KKTOptions {
  bool use_fb = false;
  double epsilon = 1e-6;        // generic inequality pairs
  double epsilon_lower = 1e-3;  // lower box pairs
  double epsilon_upper = 1e-9;  // upper box pairs
  /// Overrides the problem's own envelope; applied to all lower variables.
  std::optional<MahalanobisEnvelope> envelope;

  void validate() const;
};

/// Replaces the follower by its KKT system.
///
/// Primal variables keep their problem indices; multipliers are appended in
/// the order: lower inequalities, lower equalities, lower-box (L, U) pairs,
/// envelope. Upper boxes and lower boxes become variable bounds. Without FB,
/// complementarity is an equality mu * g = 0; with FB, inequality and box
/// pairs become perturbed Fischer-Burmeister rows and their explicit primal
/// rows are dropped. The envelope row is never smoothed.
SingleLevelNLP kkt_reformulate(const BilevelProblem& p, const KKTOptions& opts = {});

struct LicqResult {
  bool holds = true;
  int rank = 0;
  int active_count = 0;
  std::vector<std::string> active;
  double smallest_singular_value = 0.0;
};

/// Rank of the Jacobian of equalities plus active inequalities (|g| <= tol).
/// Uses the LICQ view when present, otherwise every row and column.
LicqResult licq_check(const SingleLevelNLP& nlp, const Eigen::VectorXd& point, double active_tol = 1e-6);

}  // namespace bilevel
