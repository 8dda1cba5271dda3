#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "bilevel/surrogate.hpp"

namespace bilevel {

namespace detail {
class Node;
}

/// Value, gradient and Hessian of an expression restricted to its support.
///
/// Entry k of `gradient` is the partial with respect to variable
/// `support()[k]` of the expression that produced it.
struct LocalEval {
  double value = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;
};

/// Immutable scalar expression over a joint variable vector.
///
/// Nodes are shared, so copies are cheap. Derivatives are exact: gradients
/// and Hessians propagate by the chain rule, and diff() builds the symbolic
/// partial derivative as a new expression (used for stationarity rows).
class Expression {
 public:
  Expression();
  Expression(double constant);  // NOLINT(google-explicit-constructor)

  static Expression variable(int index);
  /// sum_k coeffs[k] * z[vars[k]] + constant
  static Expression linear(const std::vector<int>& vars, const std::vector<double>& coeffs, double constant = 0.0);
  /// (z_v - center)^T A (z_v - center) over the listed variables.
  static Expression quadratic_form(const Eigen::MatrixXd& A, const Eigen::VectorXd& center, const std::vector<int>& vars);
  /// scale * net(M z_v + offset) + shift, where z_v gathers `vars`.
  ///
  /// M maps the listed variables onto the network inputs, so affine input
  /// scalings and sums such as x + delta compose without extra nodes.
  static Expression surrogate(std::shared_ptr<const ShallowNet> net, const Eigen::MatrixXd& input_map,
                              const Eigen::VectorXd& input_offset, const std::vector<int>& vars, double scale,
                              double shift, std::string label);

  double eval(const Eigen::VectorXd& x) const;
  Eigen::VectorXd gradient(const Eigen::VectorXd& x) const;
  Eigen::MatrixXd hessian(const Eigen::VectorXd& x) const;
  /// order 0: value only; 1: plus gradient; 2: plus Hessian. Local coordinates.
  LocalEval eval_local(const Eigen::VectorXd& x, int order) const;

  /// Sorted variable indices this expression depends on.
  const std::vector<int>& support() const;
  bool is_constant() const;
  /// Value of a constant expression; throws otherwise.
  double constant_value() const;

  /// Symbolic partial derivative with respect to variable `var`.
  Expression diff(int var) const;

  /// Infix rendering; variables print as names[i] when provided.
  std::string to_string(const std::vector<std::string>& names = {}) const;

  friend Expression operator+(const Expression& a, const Expression& b);
  friend Expression operator-(const Expression& a, const Expression& b);
  friend Expression operator*(const Expression& a, const Expression& b);
  friend Expression operator/(const Expression& a, const Expression& b);
  friend Expression operator-(const Expression& a);

  friend Expression pow(const Expression& a, double exponent);
  friend Expression sqrt(const Expression& a);
  friend Expression exp(const Expression& a);
  friend Expression log(const Expression& a);
  friend Expression sin(const Expression& a);
  friend Expression cos(const Expression& a);

  explicit Expression(std::shared_ptr<const detail::Node> node);
  const detail::Node& node() const { return *node_; }

 private:
  std::shared_ptr<const detail::Node> node_;
};

Expression& operator+=(Expression& a, const Expression& b);
Expression pow(const Expression& a, double exponent);
Expression sqrt(const Expression& a);
Expression exp(const Expression& a);
Expression log(const Expression& a);
Expression sin(const Expression& a);
Expression cos(const Expression& a);

/// Expression for a trained model evaluated on problem variables.
///
/// `phys_map`/`phys_offset` give the model's physical inputs as an affine
/// function of `vars` (identity and zero for direct use). When
/// `scaled_output` is true the raw network output is used; otherwise the
/// output is converted back to physical units.
Expression model_expression(std::shared_ptr<const TrainedModel> model, const std::vector<int>& vars,
                            const Eigen::MatrixXd& phys_map, const Eigen::VectorXd& phys_offset,
                            bool scaled_output = false);
/// Convenience overload: physical inputs are the listed variables themselves.
Expression model_expression(std::shared_ptr<const TrainedModel> model, const std::vector<int>& vars,
                            bool scaled_output = false);

}  // namespace bilevel
