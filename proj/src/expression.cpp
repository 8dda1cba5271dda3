#include "bilevel/expression.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "bilevel/error.hpp"

namespace bilevel {

namespace detail {

enum class Kind { Constant, Variable, Sum, Product, Power, Unary, Linear, Quadratic, Surrogate };
enum class UnaryFn { Sqrt, Exp, Log, Sin, Cos };

class Node {
 public:
  explicit Node(Kind kind) : kind(kind) {}
  virtual ~Node() = default;

  virtual LocalEval eval(const Eigen::VectorXd& x, int order) const = 0;
  virtual Expression diff(int var) const = 0;
  virtual std::string print(const std::vector<std::string>& names) const = 0;

  const Kind kind;
  std::vector<int> support;
};

namespace {

std::string var_name(int i, const std::vector<std::string>& names) {
  if (i >= 0 && static_cast<std::size_t>(i) < names.size()) return names[static_cast<std::size_t>(i)];
  return "z" + std::to_string(i);
}

std::string fmt_num(double v) {
  std::ostringstream ss;
  ss.precision(12);
  ss << v;
  return ss.str();
}

// Position of each child support entry inside the parent support.
std::vector<int> index_map(const std::vector<int>& child, const std::vector<int>& parent) {
  std::vector<int> out;
  out.reserve(child.size());
  for (int v : child) out.push_back(static_cast<int>(std::lower_bound(parent.begin(), parent.end(), v) - parent.begin()));
  return out;
}

std::vector<int> merge_support(const std::vector<const std::vector<int>*>& parts) {
  std::vector<int> out;
  for (const auto* p : parts) out.insert(out.end(), p->begin(), p->end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

LocalEval make_eval(double value, std::size_t n, int order) {
  LocalEval e;
  e.value = value;
  const auto m = static_cast<Eigen::Index>(n);
  if (order >= 1) e.gradient = Eigen::VectorXd::Zero(m);
  if (order >= 2) e.hessian = Eigen::MatrixXd::Zero(m, m);
  return e;
}

// out += w * child (child expressed in child-local coordinates mapped by idx)
void accumulate(LocalEval& out, const LocalEval& child, const std::vector<int>& idx, double w, int order) {
  if (order >= 1)
    for (std::size_t a = 0; a < idx.size(); ++a) out.gradient(idx[a]) += w * child.gradient(static_cast<Eigen::Index>(a));
  if (order >= 2)
    for (std::size_t a = 0; a < idx.size(); ++a)
      for (std::size_t b = 0; b < idx.size(); ++b)
        out.hessian(idx[a], idx[b]) += w * child.hessian(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
}

Eigen::VectorXd gather(const Eigen::VectorXd& x, const std::vector<int>& vars) {
  Eigen::VectorXd z(static_cast<Eigen::Index>(vars.size()));
  for (std::size_t k = 0; k < vars.size(); ++k) {
    if (vars[k] < 0 || vars[k] >= x.size())
      throw SchemaError("expression references variable " + std::to_string(vars[k]) + " outside a point of size " +
                        std::to_string(x.size()));
    z(static_cast<Eigen::Index>(k)) = x(vars[k]);
  }
  return z;
}

}  // namespace

class ConstantNode final : public Node {
 public:
  explicit ConstantNode(double v) : Node(Kind::Constant), value(v) {}
  LocalEval eval(const Eigen::VectorXd&, int order) const override { return make_eval(value, 0, order); }
  Expression diff(int) const override { return Expression(0.0); }
  std::string print(const std::vector<std::string>&) const override { return fmt_num(value); }
  double value;
};

class VariableNode final : public Node {
 public:
  explicit VariableNode(int i) : Node(Kind::Variable), index(i) { support = {i}; }
  LocalEval eval(const Eigen::VectorXd& x, int order) const override {
    if (index < 0 || index >= x.size()) throw SchemaError("variable index " + std::to_string(index) + " out of range");
    auto e = make_eval(x(index), 1, order);
    if (order >= 1) e.gradient(0) = 1.0;
    return e;
  }
  Expression diff(int var) const override { return Expression(var == index ? 1.0 : 0.0); }
  std::string print(const std::vector<std::string>& names) const override { return var_name(index, names); }
  int index;
};

class SumNode final : public Node {
 public:
  SumNode(std::vector<std::pair<double, Expression>> terms, double constant)
      : Node(Kind::Sum), terms(std::move(terms)), constant(constant) {
    std::vector<const std::vector<int>*> parts;
    for (const auto& t : this->terms) parts.push_back(&t.second.support());
    support = merge_support(parts);
    for (const auto& t : this->terms) maps.push_back(index_map(t.second.support(), support));
  }
  LocalEval eval(const Eigen::VectorXd& x, int order) const override {
    auto out = make_eval(constant, support.size(), order);
    for (std::size_t k = 0; k < terms.size(); ++k) {
      const auto child = terms[k].second.eval_local(x, order);
      out.value += terms[k].first * child.value;
      accumulate(out, child, maps[k], terms[k].first, order);
    }
    return out;
  }
  Expression diff(int var) const override {
    Expression out(0.0);
    for (const auto& [c, e] : terms)
      if (std::binary_search(e.support().begin(), e.support().end(), var)) out += Expression(c) * e.diff(var);
    return out;
  }
  std::string print(const std::vector<std::string>& names) const override {
    std::string s = "(";
    bool first = true;
    for (const auto& [c, e] : terms) {
      const double mag = std::abs(c);
      if (first)
        s += c < 0 ? "-" : "";
      else
        s += c < 0 ? " - " : " + ";
      if (mag != 1.0) s += fmt_num(mag) + "*";
      s += e.to_string(names);
      first = false;
    }
    if (constant != 0.0 || first) s += (first ? "" : (constant < 0 ? " - " : " + ")) + fmt_num(first ? constant : std::abs(constant));
    return s + ")";
  }
  std::vector<std::pair<double, Expression>> terms;
  double constant;
  std::vector<std::vector<int>> maps;
};

class ProductNode final : public Node {
 public:
  ProductNode(Expression a, Expression b) : Node(Kind::Product), a(std::move(a)), b(std::move(b)) {
    support = merge_support({&this->a.support(), &this->b.support()});
    map_a = index_map(this->a.support(), support);
    map_b = index_map(this->b.support(), support);
  }
  LocalEval eval(const Eigen::VectorXd& x, int order) const override {
    const auto ea = a.eval_local(x, order);
    const auto eb = b.eval_local(x, order);
    auto out = make_eval(ea.value * eb.value, support.size(), order);
    accumulate(out, ea, map_a, eb.value, order);
    accumulate(out, eb, map_b, ea.value, order);
    if (order >= 2) {
      Eigen::VectorXd ga = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(support.size()));
      Eigen::VectorXd gb = ga;
      for (std::size_t k = 0; k < map_a.size(); ++k) ga(map_a[k]) = ea.gradient(static_cast<Eigen::Index>(k));
      for (std::size_t k = 0; k < map_b.size(); ++k) gb(map_b[k]) = eb.gradient(static_cast<Eigen::Index>(k));
      out.hessian += ga * gb.transpose() + gb * ga.transpose();
    }
    return out;
  }
  Expression diff(int var) const override { return a.diff(var) * b + a * b.diff(var); }
  std::string print(const std::vector<std::string>& names) const override {
    return a.to_string(names) + "*" + b.to_string(names);
  }
  Expression a, b;
  std::vector<int> map_a, map_b;
};

// Shared chain rule for f(a): value, f', f''.
LocalEval chain(const LocalEval& inner, double f0, double f1, double f2, int order) {
  LocalEval out;
  out.value = f0;
  if (order >= 1) out.gradient = f1 * inner.gradient;
  if (order >= 2) out.hessian = f1 * inner.hessian + f2 * inner.gradient * inner.gradient.transpose();
  return out;
}

class PowerNode final : public Node {
 public:
  PowerNode(Expression a, double p) : Node(Kind::Power), a(std::move(a)), p(p) { support = this->a.support(); }
  LocalEval eval(const Eigen::VectorXd& x, int order) const override {
    const auto ea = a.eval_local(x, order);
    const double v = ea.value;
    return chain(ea, std::pow(v, p), p * std::pow(v, p - 1.0), p * (p - 1.0) * std::pow(v, p - 2.0), order);
  }
  Expression diff(int var) const override { return Expression(p) * pow(a, p - 1.0) * a.diff(var); }
  std::string print(const std::vector<std::string>& names) const override {
    return a.to_string(names) + "^" + fmt_num(p);
  }
  Expression a;
  double p;
};

class UnaryNode final : public Node {
 public:
  UnaryNode(UnaryFn fn, Expression a) : Node(Kind::Unary), fn(fn), a(std::move(a)) { support = this->a.support(); }
  LocalEval eval(const Eigen::VectorXd& x, int order) const override {
    const auto ea = a.eval_local(x, order);
    const double v = ea.value;
    switch (fn) {
      case UnaryFn::Sqrt: {
        const double r = std::sqrt(v);
        return chain(ea, r, 0.5 / r, -0.25 / (r * v), order);
      }
      case UnaryFn::Exp: {
        const double e = std::exp(v);
        return chain(ea, e, e, e, order);
      }
      case UnaryFn::Log:
        return chain(ea, std::log(v), 1.0 / v, -1.0 / (v * v), order);
      case UnaryFn::Sin:
        return chain(ea, std::sin(v), std::cos(v), -std::sin(v), order);
      case UnaryFn::Cos:
        return chain(ea, std::cos(v), -std::sin(v), -std::cos(v), order);
    }
    throw NumericalError("unknown unary function");
  }
  Expression diff(int var) const override {
    const Expression da = a.diff(var);
    switch (fn) {
      case UnaryFn::Sqrt:
        return Expression(0.5) * pow(a, -0.5) * da;
      case UnaryFn::Exp:
        return exp(a) * da;
      case UnaryFn::Log:
        return pow(a, -1.0) * da;
      case UnaryFn::Sin:
        return cos(a) * da;
      case UnaryFn::Cos:
        return -(sin(a) * da);
    }
    throw NumericalError("unknown unary function");
  }
  std::string print(const std::vector<std::string>& names) const override {
    static const char* labels[] = {"sqrt", "exp", "log", "sin", "cos"};
    return std::string(labels[static_cast<int>(fn)]) + "(" + a.to_string(names) + ")";
  }
  UnaryFn fn;
  Expression a;
};

class LinearNode final : public Node {
 public:
  LinearNode(const std::vector<int>& vars, const std::vector<double>& coeffs, double constant)
      : Node(Kind::Linear), constant(constant) {
    std::vector<std::pair<int, double>> items;
    for (std::size_t k = 0; k < vars.size(); ++k) items.emplace_back(vars[k], coeffs[k]);
    std::sort(items.begin(), items.end());
    for (const auto& [v, c] : items) {
      if (!support.empty() && support.back() == v)
        this->coeffs.back() += c;
      else {
        support.push_back(v);
        this->coeffs.push_back(c);
      }
    }
  }
  LocalEval eval(const Eigen::VectorXd& x, int order) const override {
    const Eigen::VectorXd z = gather(x, support);
    const Eigen::Map<const Eigen::VectorXd> c(coeffs.data(), static_cast<Eigen::Index>(coeffs.size()));
    auto out = make_eval(c.dot(z) + constant, support.size(), order);
    if (order >= 1) out.gradient = c;
    return out;
  }
  Expression diff(int var) const override {
    auto it = std::lower_bound(support.begin(), support.end(), var);
    if (it == support.end() || *it != var) return Expression(0.0);
    return Expression(coeffs[static_cast<std::size_t>(it - support.begin())]);
  }
  std::string print(const std::vector<std::string>& names) const override {
    std::string s = "(";
    for (std::size_t k = 0; k < support.size(); ++k) {
      s += (k == 0 ? (coeffs[k] < 0 ? "-" : "") : (coeffs[k] < 0 ? " - " : " + "));
      s += fmt_num(std::abs(coeffs[k])) + "*" + var_name(support[k], names);
    }
    if (constant != 0.0) s += (constant < 0 ? " - " : " + ") + fmt_num(std::abs(constant));
    return s + ")";
  }
  std::vector<double> coeffs;
  double constant;
};

class QuadraticNode final : public Node {
 public:
  QuadraticNode(const Eigen::MatrixXd& A, const Eigen::VectorXd& center, const std::vector<int>& vars)
      : Node(Kind::Quadratic), vars(vars) {
    if (A.rows() != A.cols() || A.rows() != static_cast<Eigen::Index>(vars.size()) ||
        center.size() != static_cast<Eigen::Index>(vars.size()))
      throw SchemaError("quadratic form dimensions disagree");
    std::vector<int> sorted = vars;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw SchemaError("quadratic form lists a variable twice");
    // Reorder to sorted support so local coordinates line up.
    support = sorted;
    auto pos = index_map(vars, support);
    const auto n = A.rows();
    this->A = Eigen::MatrixXd(n, n);
    this->center = Eigen::VectorXd(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      this->center(pos[static_cast<std::size_t>(i)]) = center(i);
      for (Eigen::Index j = 0; j < n; ++j)
        this->A(pos[static_cast<std::size_t>(i)], pos[static_cast<std::size_t>(j)]) = 0.5 * (A(i, j) + A(j, i));
    }
  }
  LocalEval eval(const Eigen::VectorXd& x, int order) const override {
    const Eigen::VectorXd d = gather(x, support) - center;
    const Eigen::VectorXd Ad = A * d;
    auto out = make_eval(d.dot(Ad), support.size(), order);
    if (order >= 1) out.gradient = 2.0 * Ad;
    if (order >= 2) out.hessian = 2.0 * A;
    return out;
  }
  Expression diff(int var) const override {
    auto it = std::lower_bound(support.begin(), support.end(), var);
    if (it == support.end() || *it != var) return Expression(0.0);
    const auto k = static_cast<Eigen::Index>(it - support.begin());
    std::vector<double> coeffs(support.size());
    double constant = 0.0;
    for (std::size_t l = 0; l < support.size(); ++l) {
      coeffs[l] = 2.0 * A(k, static_cast<Eigen::Index>(l));
      constant -= coeffs[l] * center(static_cast<Eigen::Index>(l));
    }
    return Expression::linear(support, coeffs, constant);
  }
  std::string print(const std::vector<std::string>& names) const override {
    std::string s = "quad[";
    for (std::size_t k = 0; k < support.size(); ++k) s += (k ? "," : "") + var_name(support[k], names);
    return s + "]";
  }
  std::vector<int> vars;
  Eigen::MatrixXd A;
  Eigen::VectorXd center;
};

class SurrogateNode final : public Node {
 public:
  SurrogateNode(std::shared_ptr<const ShallowNet> net, Eigen::MatrixXd map, Eigen::VectorXd offset,
                std::vector<int> vars, double scale, double shift, std::string label, std::vector<int> directions)
      : Node(Kind::Surrogate),
        net(std::move(net)),
        offset(std::move(offset)),
        scale(scale),
        shift(shift),
        label(std::move(label)),
        directions(std::move(directions)) {
    if (!this->net) throw SchemaError("surrogate node needs a network");
    if (map.rows() != this->net->inputs() || map.cols() != static_cast<Eigen::Index>(vars.size()) ||
        this->offset.size() != this->net->inputs())
      throw SchemaError("surrogate input map does not match network inputs (" + std::to_string(this->net->inputs()) +
                        ") and variable count (" + std::to_string(vars.size()) + ")");
    std::vector<int> sorted = vars;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    support = sorted;
    // Columns for repeated variables are summed.
    this->map = Eigen::MatrixXd::Zero(map.rows(), static_cast<Eigen::Index>(support.size()));
    auto pos = index_map(vars, support);
    for (std::size_t k = 0; k < vars.size(); ++k) this->map.col(pos[k]) += map.col(static_cast<Eigen::Index>(k));
  }
  LocalEval eval(const Eigen::VectorXd& x, int order) const override {
    const Eigen::VectorXd u = map * gather(x, support) + offset;
    const auto p = net_partial(*net, u, directions, order);
    LocalEval out;
    out.value = scale * p.value + (directions.empty() ? shift : 0.0);
    if (order >= 1) out.gradient = scale * (map.transpose() * p.gradient);
    if (order >= 2) out.hessian = scale * (map.transpose() * p.hessian * map);
    return out;
  }
  Expression diff(int var) const override {
    auto it = std::lower_bound(support.begin(), support.end(), var);
    if (it == support.end() || *it != var) return Expression(0.0);
    const auto k = static_cast<Eigen::Index>(it - support.begin());
    Expression out(0.0);
    for (Eigen::Index p = 0; p < map.rows(); ++p) {
      if (map(p, k) == 0.0) continue;
      auto dirs = directions;
      dirs.push_back(static_cast<int>(p));
      std::sort(dirs.begin(), dirs.end());
      auto node = std::make_shared<SurrogateNode>(net, map, offset, support, scale, shift, label, dirs);
      out += Expression(map(p, k)) * Expression(std::shared_ptr<const Node>(std::move(node)));
    }
    return out;
  }
  std::string print(const std::vector<std::string>& names) const override {
    std::string s;
    if (!directions.empty()) {
      s = "d";
      for (int d : directions) s += "_" + std::to_string(d);
    }
    s += label + "(";
    for (std::size_t k = 0; k < support.size(); ++k) s += (k ? "," : "") + var_name(support[k], names);
    return s + ")";
  }
  std::shared_ptr<const ShallowNet> net;
  Eigen::MatrixXd map;
  Eigen::VectorXd offset;
  double scale;
  double shift;
  std::string label;
  std::vector<int> directions;
};

}  // namespace detail

using detail::Kind;

namespace {

std::shared_ptr<const detail::Node> make_constant(double v) { return std::make_shared<detail::ConstantNode>(v); }

const detail::SumNode* as_sum(const Expression& e) {
  return e.node().kind == Kind::Sum ? static_cast<const detail::SumNode*>(&e.node()) : nullptr;
}

// Collects c * e into a flat term list, expanding nested sums.
void collect(std::vector<std::pair<double, Expression>>& terms, double& constant, double c, const Expression& e) {
  if (c == 0.0) return;
  if (e.is_constant()) {
    constant += c * e.constant_value();
  } else if (const auto* s = as_sum(e)) {
    constant += c * s->constant;
    for (const auto& [k, t] : s->terms) collect(terms, constant, c * k, t);
  } else {
    terms.emplace_back(c, e);
  }
}

Expression build_sum(std::vector<std::pair<double, Expression>> terms, double constant) {
  if (terms.empty()) return Expression(constant);
  if (terms.size() == 1 && constant == 0.0 && terms[0].first == 1.0) return terms[0].second;
  return Expression(std::make_shared<detail::SumNode>(std::move(terms), constant));
}

}  // namespace

Expression::Expression() : node_(make_constant(0.0)) {}
Expression::Expression(double constant) : node_(make_constant(constant)) {}
Expression::Expression(std::shared_ptr<const detail::Node> node) : node_(std::move(node)) {}

Expression Expression::variable(int index) {
  if (index < 0) throw SchemaError("variable index must be >= 0");
  return Expression(std::make_shared<detail::VariableNode>(index));
}

Expression Expression::linear(const std::vector<int>& vars, const std::vector<double>& coeffs, double constant) {
  if (vars.size() != coeffs.size()) throw SchemaError("linear: variable and coefficient counts differ");
  if (vars.empty()) return Expression(constant);
  return Expression(std::make_shared<detail::LinearNode>(vars, coeffs, constant));
}

Expression Expression::quadratic_form(const Eigen::MatrixXd& A, const Eigen::VectorXd& center,
                                      const std::vector<int>& vars) {
  return Expression(std::make_shared<detail::QuadraticNode>(A, center, vars));
}

Expression Expression::surrogate(std::shared_ptr<const ShallowNet> net, const Eigen::MatrixXd& input_map,
                                 const Eigen::VectorXd& input_offset, const std::vector<int>& vars, double scale,
                                 double shift, std::string label) {
  return Expression(std::make_shared<detail::SurrogateNode>(std::move(net), input_map, input_offset, vars, scale,
                                                            shift, std::move(label), std::vector<int>{}));
}

LocalEval Expression::eval_local(const Eigen::VectorXd& x, int order) const {
  auto out = node_->eval(x, order);
  if (!std::isfinite(out.value)) throw NumericalError("expression evaluated to a non-finite value: " + to_string());
  return out;
}

double Expression::eval(const Eigen::VectorXd& x) const { return eval_local(x, 0).value; }

Eigen::VectorXd Expression::gradient(const Eigen::VectorXd& x) const {
  const auto e = eval_local(x, 1);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(x.size());
  const auto& s = support();
  for (std::size_t k = 0; k < s.size(); ++k) g(s[k]) = e.gradient(static_cast<Eigen::Index>(k));
  return g;
}

Eigen::MatrixXd Expression::hessian(const Eigen::VectorXd& x) const {
  const auto e = eval_local(x, 2);
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(x.size(), x.size());
  const auto& s = support();
  for (std::size_t a = 0; a < s.size(); ++a)
    for (std::size_t b = 0; b < s.size(); ++b)
      H(s[a], s[b]) = e.hessian(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
  return H;
}

const std::vector<int>& Expression::support() const { return node_->support; }

bool Expression::is_constant() const { return node_->kind == Kind::Constant; }

double Expression::constant_value() const {
  if (!is_constant()) throw UsageError("expression is not constant");
  return static_cast<const detail::ConstantNode&>(*node_).value;
}

Expression Expression::diff(int var) const {
  if (!std::binary_search(support().begin(), support().end(), var)) return Expression(0.0);
  return node_->diff(var);
}

std::string Expression::to_string(const std::vector<std::string>& names) const { return node_->print(names); }

Expression operator+(const Expression& a, const Expression& b) {
  std::vector<std::pair<double, Expression>> terms;
  double constant = 0.0;
  collect(terms, constant, 1.0, a);
  collect(terms, constant, 1.0, b);
  return build_sum(std::move(terms), constant);
}

Expression operator-(const Expression& a, const Expression& b) {
  std::vector<std::pair<double, Expression>> terms;
  double constant = 0.0;
  collect(terms, constant, 1.0, a);
  collect(terms, constant, -1.0, b);
  return build_sum(std::move(terms), constant);
}

Expression operator-(const Expression& a) { return Expression(0.0) - a; }

Expression& operator+=(Expression& a, const Expression& b) {
  a = a + b;
  return a;
}

Expression operator*(const Expression& a, const Expression& b) {
  if (a.is_constant() && b.is_constant()) return Expression(a.constant_value() * b.constant_value());
  const Expression* c = a.is_constant() ? &a : (b.is_constant() ? &b : nullptr);
  if (c) {
    const Expression& other = (c == &a) ? b : a;
    const double k = c->constant_value();
    if (k == 0.0) return Expression(0.0);
    if (k == 1.0) return other;
    std::vector<std::pair<double, Expression>> terms;
    double constant = 0.0;
    collect(terms, constant, k, other);
    return build_sum(std::move(terms), constant);
  }
  return Expression(std::make_shared<detail::ProductNode>(a, b));
}

Expression operator/(const Expression& a, const Expression& b) {
  if (b.is_constant()) {
    if (b.constant_value() == 0.0) throw NumericalError("division by constant zero");
    return a * Expression(1.0 / b.constant_value());
  }
  return a * pow(b, -1.0);
}

Expression pow(const Expression& a, double exponent) {
  if (exponent == 0.0) return Expression(1.0);
  if (exponent == 1.0) return a;
  if (a.is_constant()) return Expression(std::pow(a.constant_value(), exponent));
  return Expression(std::make_shared<detail::PowerNode>(a, exponent));
}

namespace {
Expression unary(detail::UnaryFn fn, const Expression& a) {
  if (a.is_constant()) {
    const double v = a.constant_value();
    switch (fn) {
      case detail::UnaryFn::Sqrt: return Expression(std::sqrt(v));
      case detail::UnaryFn::Exp: return Expression(std::exp(v));
      case detail::UnaryFn::Log: return Expression(std::log(v));
      case detail::UnaryFn::Sin: return Expression(std::sin(v));
      case detail::UnaryFn::Cos: return Expression(std::cos(v));
    }
  }
  return Expression(std::make_shared<detail::UnaryNode>(fn, a));
}
}  // namespace

Expression sqrt(const Expression& a) { return unary(detail::UnaryFn::Sqrt, a); }
Expression exp(const Expression& a) { return unary(detail::UnaryFn::Exp, a); }
Expression log(const Expression& a) { return unary(detail::UnaryFn::Log, a); }
Expression sin(const Expression& a) { return unary(detail::UnaryFn::Sin, a); }
Expression cos(const Expression& a) { return unary(detail::UnaryFn::Cos, a); }

Expression model_expression(std::shared_ptr<const TrainedModel> model, const std::vector<int>& vars,
                            const Eigen::MatrixXd& phys_map, const Eigen::VectorXd& phys_offset, bool scaled_output) {
  if (!model) throw SchemaError("model_expression: null model");
  const auto n_in = model->inputs();
  if (phys_map.rows() != n_in || phys_offset.size() != n_in)
    throw SchemaError("model '" + model->target_name + "' expects " + std::to_string(n_in) + " inputs");
  // u = (phys - min) / range, phys = P z + q  =>  u = D P z + D (q - min)
  Eigen::MatrixXd map = phys_map;
  Eigen::VectorXd offset = phys_offset;
  for (Eigen::Index i = 0; i < n_in; ++i) {
    const auto& r = model->input_scaling.ranges.at(static_cast<std::size_t>(i));
    const double inv = r.constant() ? 0.0 : 1.0 / (r.max - r.min);
    map.row(i) *= inv;
    offset(i) = (offset(i) - r.min) * inv;
  }
  auto net = std::shared_ptr<const ShallowNet>(model, &model->net);
  const double scale = scaled_output ? 1.0 : model->output_range();
  const double shift = scaled_output ? 0.0 : model->output_min();
  return Expression::surrogate(std::move(net), map, offset, vars, scale, shift, model->target_name);
}

Expression model_expression(std::shared_ptr<const TrainedModel> model, const std::vector<int>& vars,
                            bool scaled_output) {
  const auto n = static_cast<Eigen::Index>(vars.size());
  return model_expression(std::move(model), vars, Eigen::MatrixXd::Identity(n, n), Eigen::VectorXd::Zero(n),
                          scaled_output);
}

}  // namespace bilevel
