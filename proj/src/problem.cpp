#include "bilevel/problem.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "bilevel/error.hpp"
#include "bilevel/parallel.hpp"

namespace bilevel {

const char* to_string(Sense s) { return s == Sense::Minimize ? "min" : "max"; }

std::vector<int> BilevelProblem::upper_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < variables.size(); ++i)
    if (variables[i].role == Role::Upper) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> BilevelProblem::lower_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < variables.size(); ++i)
    if (variables[i].role == Role::Lower) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<std::string> BilevelProblem::names() const {
  std::vector<std::string> out;
  for (const auto& v : variables) out.push_back(v.name);
  return out;
}

int BilevelProblem::index_of(const std::string& n) const {
  for (std::size_t i = 0; i < variables.size(); ++i)
    if (variables[i].name == n) return static_cast<int>(i);
  throw SchemaError("problem '" + name + "' has no variable '" + n + "'");
}

std::vector<int> BilevelProblem::shared_indices() const {
  if (!shared_map.empty()) return shared_map;
  std::vector<int> out;
  for (int v : upper_objective.support())
    if (variables[static_cast<std::size_t>(v)].role == Role::Lower) out.push_back(v);
  return out;
}

void BilevelProblem::validate() const {
  const auto n = static_cast<int>(variables.size());
  if (n == 0) throw SchemaError("problem '" + name + "' has no variables");
  std::vector<std::string> seen;
  for (const auto& v : variables) {
    if (v.name.empty()) throw SchemaError("variable without a name");
    if (std::find(seen.begin(), seen.end(), v.name) != seen.end())
      throw SchemaError("duplicate variable name '" + v.name + "'");
    seen.push_back(v.name);
    if (!std::isfinite(v.lo) || !std::isfinite(v.hi) || v.lo > v.hi)
      throw SchemaError("variable '" + v.name + "' needs a finite box with lo <= hi");
  }
  if (lower_indices().empty()) throw SchemaError("problem '" + name + "' has no lower-level variables");
  auto check = [&](const Expression& e, const std::string& what) {
    for (int v : e.support())
      if (v >= n) throw SchemaError(what + " references variable index " + std::to_string(v));
  };
  check(upper_objective, "upper objective");
  check(lower_objective, "lower objective");
  for (const auto* list : {&upper_inequalities, &upper_equalities, &lower_inequalities, &lower_equalities})
    for (const auto& c : *list) check(c.expr, "constraint '" + c.label + "'");
  for (int v : shared_map)
    if (v < 0 || v >= n || variables[static_cast<std::size_t>(v)].role != Role::Lower)
      throw SchemaError("shared map index " + std::to_string(v) + " is not a lower variable");
  if (envelope) {
    envelope->envelope.validate();
    if (static_cast<Eigen::Index>(envelope->vars.size()) != envelope->envelope.dim())
      throw SchemaError("envelope dimension does not match its variable list");
    for (int v : envelope->vars)
      if (v < 0 || v >= n || variables[static_cast<std::size_t>(v)].role != Role::Lower)
        throw SchemaError("envelope variable " + std::to_string(v) + " is not a lower variable");
  }
}

// ---------------------------------------------------------------------------
// Benchmarks

namespace {

struct BenchmarkParts {
  std::vector<Variable> variables;
  Expression F, f;
  Sense sense = Sense::Minimize;
  std::vector<Constraint> G, g;
};

BenchmarkParts benchmark_parts(const std::string& name) {
  const Expression x = Expression::variable(0);
  const Expression y = Expression::variable(1);
  BenchmarkParts b;
  if (name == "cc") {
    b.variables = {{"x", Role::Upper, 0.0, 8.0}, {"y", Role::Lower, 0.0, 6.0}};
    b.F = pow(x - 3.0, 2) + pow(y - 2.0, 2);
    b.f = pow(y - 5.0, 2);
    b.g = {{"g1", -2.0 * x + y - 1.0}, {"g2", x - 2.0 * y}, {"g3", x + 2.0 * y - 14.0}};
  } else if (name == "cnc") {
    b.variables = {{"x", Role::Upper, 0.0, 2.0}, {"y", Role::Lower, 0.0, 1.0}};
    b.F = pow(x - 1.0, 2) + pow(y, 2);
    b.f = -pow(y, 2) + x * y;
  } else if (name == "ncnc") {
    b.variables = {{"x", Role::Upper, -1.0, 1.0}, {"y", Role::Lower, -1.0, 1.0}};
    b.F = pow(x, 2);
    b.f = y;
    b.G = {{"G1", 1.0 + x - 9.0 * pow(x, 2) - y}};
    b.g = {{"g1", pow(y, 2) * (x - 0.5)}};
  } else {
    throw UsageError("unknown benchmark '" + name + "' (expected cc, cnc or ncnc)");
  }
  return b;
}

BilevelProblem assemble(const std::string& name, BenchmarkParts b) {
  BilevelProblem p;
  p.name = name;
  p.variables = std::move(b.variables);
  p.upper_objective = b.F;
  p.sense = b.sense;
  p.upper_inequalities = std::move(b.G);
  p.lower_objective = b.f;
  p.lower_inequalities = std::move(b.g);
  p.validate();
  return p;
}

}  // namespace

BilevelProblem build_benchmark(const std::string& name) { return assemble(name, benchmark_parts(name)); }

Expression model_on_variables(std::shared_ptr<const TrainedModel> model, const std::vector<Variable>& variables,
                              bool scaled_output) {
  if (!model) throw UsageError("missing model");
  std::vector<int> vars;
  for (const auto& in : model->input_names) {
    auto it = std::find_if(variables.begin(), variables.end(), [&](const Variable& v) { return v.name == in; });
    if (it == variables.end()) throw SchemaError("model input '" + in + "' is not a problem variable");
    vars.push_back(static_cast<int>(it - variables.begin()));
  }
  return model_expression(std::move(model), vars, scaled_output);
}

BilevelProblem build_benchmark_surrogate(const std::string& name, std::shared_ptr<const TrainedModel> upper,
                                         std::shared_ptr<const TrainedModel> lower) {
  if (!upper || !lower) throw UsageError("surrogate benchmark needs both an upper and a lower model");
  auto b = benchmark_parts(name);
  b.F = model_on_variables(std::move(upper), b.variables);
  b.f = model_on_variables(std::move(lower), b.variables);
  return assemble(name, std::move(b));
}

std::vector<Bounds> benchmark_bounds(const std::string& name) {
  std::vector<Bounds> out;
  for (const auto& v : benchmark_parts(name).variables) out.push_back({v.lo, v.hi});
  return out;
}

DataMatrix benchmark_data(const std::string& name, Eigen::Index n, std::uint64_t seed) {
  const auto b = benchmark_parts(name);
  const auto inputs = uniform_sample(benchmark_bounds(name), n, seed, {"x", "y"});
  Eigen::MatrixXd values(n, 4);
  values.leftCols(2) = inputs.values();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd z = inputs.values().row(i).transpose();
    values(i, 2) = b.F.eval(z);
    values(i, 3) = b.f.eval(z);
  }
  return DataMatrix({"x", "y", "F", "f"}, std::move(values));
}

// ---------------------------------------------------------------------------
// Oracle

namespace {

struct Grid {
  std::vector<int> vars;
  std::vector<std::vector<double>> axes;
  std::vector<double> step;
  std::size_t size() const {
    std::size_t s = 1;
    for (const auto& a : axes) s *= a.size();
    return s;
  }
  void place(std::size_t k, Eigen::VectorXd& z) const {
    for (std::size_t d = 0; d < axes.size(); ++d) {
      z(vars[d]) = axes[d][k % axes[d].size()];
      k /= axes[d].size();
    }
  }
};

Grid make_grid(const BilevelProblem& p, const std::vector<int>& vars, int resolution) {
  Grid g;
  g.vars = vars;
  for (int v : vars) {
    const auto& var = p.variables[static_cast<std::size_t>(v)];
    std::vector<double> axis;
    if (var.lo == var.hi) {
      axis.push_back(var.lo);
      g.step.push_back(0.0);
    } else {
      const double h = (var.hi - var.lo) / (resolution - 1);
      for (int i = 0; i < resolution; ++i) axis.push_back(i == resolution - 1 ? var.hi : var.lo + i * h);
      g.step.push_back(h);
    }
    g.axes.push_back(std::move(axis));
  }
  return g;
}

constexpr double kOracleTol = 1e-9;

// Half a grid cell of first-order change along the listed directions.
double grid_slack(const Expression& e, const Eigen::VectorXd& z, const std::vector<const Grid*>& grids) {
  const auto le = e.eval_local(z, 1);
  const auto& s = e.support();
  double slack = 0.0;
  for (const auto* g : grids)
    for (std::size_t d = 0; d < g->vars.size(); ++d) {
      auto it = std::lower_bound(s.begin(), s.end(), g->vars[d]);
      if (it != s.end() && *it == g->vars[d])
        slack += 0.5 * g->step[d] * std::abs(le.gradient(static_cast<Eigen::Index>(it - s.begin())));
    }
  return slack;
}

bool satisfied(const BilevelProblem& p, const std::vector<Constraint>& ineq, const std::vector<Constraint>& eq,
               bool with_envelope, const Eigen::VectorXd& z, const std::vector<const Grid*>& grids) {
  for (const auto& c : ineq)
    if (c.expr.eval(z) > kOracleTol + grid_slack(c.expr, z, grids)) return false;
  for (const auto& c : eq)
    if (std::abs(c.expr.eval(z)) > kOracleTol + grid_slack(c.expr, z, grids)) return false;
  if (with_envelope && p.envelope) {
    const auto& env = *p.envelope;
    Eigen::VectorXd y(static_cast<Eigen::Index>(env.vars.size()));
    for (std::size_t k = 0; k < env.vars.size(); ++k) y(static_cast<Eigen::Index>(k)) = z(env.vars[k]);
    const Eigen::VectorXd grad = env.envelope.gradient(y);
    double slack = 0.0;
    for (const auto* g : grids)
      for (std::size_t d = 0; d < g->vars.size(); ++d)
        for (std::size_t k = 0; k < env.vars.size(); ++k)
          if (env.vars[k] == g->vars[d]) slack += 0.5 * g->step[d] * std::abs(grad(static_cast<Eigen::Index>(k)));
    if (env.envelope.distance_sq(y) > env.envelope.tau * env.envelope.tau + kOracleTol + slack) return false;
  }
  return true;
}

double upper_value(const BilevelProblem& p, const Eigen::VectorXd& z) {
  const double F = p.upper_objective.eval(z);
  return p.sense == Sense::Minimize ? F : -F;
}

struct RowResult {
  bool feasible = false;
  double F = 0.0;  // in minimization sense
  double f = 0.0;
  std::size_t lower_k = 0;
};

RowResult solve_row(const BilevelProblem& p, const Grid& upper, const Grid& lower, std::size_t uk) {
  Eigen::VectorXd z = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.variables.size()));
  upper.place(uk, z);
  const std::vector<const Grid*> lower_only{&lower};
  const std::size_t m = lower.size();
  std::vector<double> f(m, std::numeric_limits<double>::infinity());
  double fmin = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < m; ++k) {
    lower.place(k, z);
    if (!satisfied(p, p.lower_inequalities, p.lower_equalities, true, z, lower_only)) continue;
    f[k] = p.lower_objective.eval(z);
    fmin = std::min(fmin, f[k]);
  }
  RowResult best;
  if (!std::isfinite(fmin)) return best;
  const double tie = 1e-9 * (1.0 + std::abs(fmin));
  const std::vector<const Grid*> both{&upper, &lower};
  for (std::size_t k = 0; k < m; ++k) {
    if (!(f[k] <= fmin + tie)) continue;
    lower.place(k, z);
    if (!satisfied(p, p.upper_inequalities, p.upper_equalities, false, z, both)) continue;
    const double F = upper_value(p, z);
    if (!best.feasible || F < best.F) best = {true, F, f[k], k};
  }
  return best;
}

}  // namespace

OracleSolution brute_force_bilevel_oracle(const BilevelProblem& p, int resolution, int threads) {
  p.validate();
  if (resolution < 100) throw UsageError("oracle resolution must be at least 100");
  const auto up = p.upper_indices();
  const auto lo = p.lower_indices();
  if (up.size() + lo.size() > 2) throw UsageError("oracle supports at most two variables in total");
  const Grid upper = make_grid(p, up, resolution);
  const Grid lower = make_grid(p, lo, resolution);

  std::vector<RowResult> rows(upper.size());
  parallel_for(rows.size(), threads, [&](std::size_t k) { rows[k] = solve_row(p, upper, lower, k); });

  std::size_t best = rows.size();
  for (std::size_t k = 0; k < rows.size(); ++k)
    if (rows[k].feasible && (best == rows.size() || rows[k].F < rows[best].F)) best = k;
  if (best == rows.size()) throw NumericalError("oracle found no bilevel-feasible grid point");

  OracleSolution sol;
  sol.grid_resolution = resolution;
  sol.point = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.variables.size()));
  upper.place(best, sol.point);
  lower.place(rows[best].lower_k, sol.point);
  sol.x_star.resize(static_cast<Eigen::Index>(up.size()));
  sol.y_star.resize(static_cast<Eigen::Index>(lo.size()));
  for (std::size_t k = 0; k < up.size(); ++k) sol.x_star(static_cast<Eigen::Index>(k)) = sol.point(up[k]);
  for (std::size_t k = 0; k < lo.size(); ++k) sol.y_star(static_cast<Eigen::Index>(k)) = sol.point(lo[k]);
  sol.F_star = p.upper_objective.eval(sol.point);
  sol.f_star = rows[best].f;
  return sol;
}

bool oracle_lower_optimal(const BilevelProblem& p, const Eigen::VectorXd& point, int resolution) {
  const Grid lower = make_grid(p, p.lower_indices(), resolution);
  Eigen::VectorXd z = point;
  const double f0 = p.lower_objective.eval(point);
  const double tie = 1e-9 * (1.0 + std::abs(f0));
  const std::vector<const Grid*> lower_only{&lower};
  for (std::size_t k = 0; k < lower.size(); ++k) {
    lower.place(k, z);
    if (!satisfied(p, p.lower_inequalities, p.lower_equalities, true, z, lower_only)) continue;
    if (p.lower_objective.eval(z) < f0 - tie) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Prefix expression parser

namespace {

struct Token {
  enum Type { Open, Close, Number, Symbol, String, End } type;
  std::string text;
  double number = 0.0;
};

class Lexer {
 public:
  explicit Lexer(const std::string& s) : s_(s) {}
  Token next() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    if (pos_ >= s_.size()) return {Token::End, "", 0.0};
    const char c = s_[pos_];
    if (c == '(') return ++pos_, Token{Token::Open, "(", 0.0};
    if (c == ')') return ++pos_, Token{Token::Close, ")", 0.0};
    if (c == '"') {
      const auto end = s_.find('"', pos_ + 1);
      if (end == std::string::npos) throw SchemaError("unterminated string in expression");
      Token t{Token::String, s_.substr(pos_ + 1, end - pos_ - 1), 0.0};
      pos_ = end + 1;
      return t;
    }
    const auto start = pos_;
    while (pos_ < s_.size() && !std::isspace(static_cast<unsigned char>(s_[pos_])) && s_[pos_] != '(' &&
           s_[pos_] != ')')
      ++pos_;
    Token t{Token::Symbol, s_.substr(start, pos_ - start), 0.0};
    double v = 0.0;
    const char* b = t.text.data();
    const char* e = b + t.text.size();
    if (*b == '+') ++b;
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (ec == std::errc() && ptr == e && b != e) {
      t.type = Token::Number;
      t.number = v;
    }
    return t;
  }

 private:
  const std::string& s_;
  std::size_t pos_ = 0;
};

class Parser {
 public:
  Parser(const std::string& text, const std::vector<std::string>& names, const ModelLoader& loader)
      : lex_(text), names_(names), loader_(loader) {
    advance();
  }

  Expression parse_all() {
    Expression e = parse();
    if (tok_.type != Token::End) throw SchemaError("trailing input after expression: '" + tok_.text + "'");
    return e;
  }

 private:
  void advance() { tok_ = lex_.next(); }

  int lookup(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return static_cast<int>(i);
    throw SchemaError("unknown variable '" + name + "' in expression");
  }

  Expression parse() {
    if (tok_.type == Token::Number) {
      const double v = tok_.number;
      advance();
      return Expression(v);
    }
    if (tok_.type == Token::Symbol) {
      const int i = lookup(tok_.text);
      advance();
      return Expression::variable(i);
    }
    if (tok_.type != Token::Open) throw SchemaError("unexpected token '" + tok_.text + "' in expression");
    advance();
    if (tok_.type != Token::Symbol) throw SchemaError("expected an operator after '('");
    const std::string op = tok_.text;
    advance();
    if (op == "surrogate") return parse_surrogate();
    std::vector<Expression> args;
    while (tok_.type != Token::Close) {
      if (tok_.type == Token::End) throw SchemaError("missing ')' in expression");
      args.push_back(parse());
    }
    advance();
    return apply(op, args);
  }

  Expression parse_surrogate() {
    if (tok_.type != Token::String) throw SchemaError("surrogate needs a quoted model path");
    if (!loader_) throw UsageError("expression references a surrogate but no model loader was given");
    auto model = loader_(tok_.text);
    advance();
    std::vector<int> vars;
    while (tok_.type == Token::Symbol) {
      vars.push_back(lookup(tok_.text));
      advance();
    }
    if (tok_.type != Token::Close) throw SchemaError("surrogate arguments must be variable names");
    advance();
    if (vars.empty())
      for (const auto& in : model->input_names) vars.push_back(lookup(in));
    if (static_cast<Eigen::Index>(vars.size()) != model->inputs())
      throw SchemaError("surrogate '" + model->target_name + "' expects " + std::to_string(model->inputs()) +
                        " arguments");
    return model_expression(std::move(model), vars);
  }

  static void arity(const std::string& op, const std::vector<Expression>& a, std::size_t lo, std::size_t hi) {
    if (a.size() < lo || a.size() > hi) throw SchemaError("wrong number of arguments for '" + op + "'");
  }

  static Expression apply(const std::string& op, const std::vector<Expression>& a) {
    if (op == "+") {
      arity(op, a, 1, SIZE_MAX);
      Expression out = a[0];
      for (std::size_t k = 1; k < a.size(); ++k) out = out + a[k];
      return out;
    }
    if (op == "-") {
      arity(op, a, 1, SIZE_MAX);
      if (a.size() == 1) return -a[0];
      Expression out = a[0];
      for (std::size_t k = 1; k < a.size(); ++k) out = out - a[k];
      return out;
    }
    if (op == "*") {
      arity(op, a, 1, SIZE_MAX);
      Expression out = a[0];
      for (std::size_t k = 1; k < a.size(); ++k) out = out * a[k];
      return out;
    }
    if (op == "/") {
      arity(op, a, 2, 2);
      return a[0] / a[1];
    }
    if (op == "^" || op == "pow") {
      arity(op, a, 2, 2);
      if (!a[1].is_constant()) throw SchemaError("exponent must be a constant");
      return pow(a[0], a[1].constant_value());
    }
    static const std::map<std::string, Expression (*)(const Expression&)> unary = {
        {"sqrt", &sqrt}, {"exp", &exp}, {"log", &log}, {"sin", &sin}, {"cos", &cos}};
    if (auto it = unary.find(op); it != unary.end()) {
      arity(op, a, 1, 1);
      return it->second(a[0]);
    }
    throw SchemaError("unknown operator '" + op + "'");
  }

  Lexer lex_;
  Token tok_{Token::End, "", 0.0};
  const std::vector<std::string>& names_;
  const ModelLoader& loader_;
};

std::vector<Constraint> parse_rows(const nlohmann::json& j, const char* key, const std::string& prefix,
                                   const std::vector<std::string>& names, const ModelLoader& loader) {
  std::vector<Constraint> out;
  if (!j.contains(key)) return out;
  int k = 1;
  for (const auto& row : j.at(key)) {
    Constraint c;
    if (row.is_string()) {
      c.label = prefix + std::to_string(k);
      c.expr = parse_expression(row.get<std::string>(), names, loader);
    } else {
      c.label = row.value("label", prefix + std::to_string(k));
      c.expr = parse_expression(row.at("expr").get<std::string>(), names, loader);
    }
    out.push_back(std::move(c));
    ++k;
  }
  return out;
}

}  // namespace

Expression parse_expression(const std::string& text, const std::vector<std::string>& names,
                            const ModelLoader& loader) {
  return Parser(text, names, loader).parse_all();
}

BilevelProblem problem_from_json(const nlohmann::json& j, const ModelLoader& loader) {
  try {
    BilevelProblem p;
    p.name = j.value("name", "problem");
    for (const auto& v : j.at("variables")) {
      Variable var;
      var.name = v.at("name").get<std::string>();
      const auto role = v.value("role", "lower");
      if (role != "upper" && role != "lower") throw SchemaError("variable role must be 'upper' or 'lower'");
      var.role = role == "upper" ? Role::Upper : Role::Lower;
      var.lo = v.at("lo").get<double>();
      var.hi = v.at("hi").get<double>();
      p.variables.push_back(std::move(var));
    }
    const auto names = p.names();
    const auto& up = j.at("upper");
    const auto sense = up.value("sense", "min");
    if (sense != "min" && sense != "max") throw SchemaError("upper sense must be 'min' or 'max'");
    p.sense = sense == "min" ? Sense::Minimize : Sense::Maximize;
    p.upper_objective = parse_expression(up.at("objective").get<std::string>(), names, loader);
    p.upper_inequalities = parse_rows(up, "inequalities", "G", names, loader);
    p.upper_equalities = parse_rows(up, "equalities", "H", names, loader);
    const auto& lo = j.at("lower");
    p.lower_objective = parse_expression(lo.at("objective").get<std::string>(), names, loader);
    p.lower_inequalities = parse_rows(lo, "inequalities", "g", names, loader);
    p.lower_equalities = parse_rows(lo, "equalities", "h", names, loader);
    if (j.contains("shared"))
      for (const auto& n : j.at("shared")) p.shared_map.push_back(p.index_of(n.get<std::string>()));
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("invalid problem JSON: ") + e.what());
  }
}

BilevelProblem load_problem(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open problem file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("problem file " + path.string() + " is not valid JSON: " + e.what());
  }
  const auto base = path.parent_path();
  auto cache = std::make_shared<std::map<std::string, std::shared_ptr<const TrainedModel>>>();
  ModelLoader loader = [base, cache](const std::string& ref) {
    auto& slot = (*cache)[ref];
    if (!slot) {
      std::filesystem::path p(ref);
      if (p.is_relative()) p = base / p;
      slot = std::make_shared<const TrainedModel>(load_model(p));
    }
    return slot;
  };
  return problem_from_json(j, loader);
}

}  // namespace bilevel
