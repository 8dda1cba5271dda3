#include "bilevel/reformulate.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "bilevel/error.hpp"

namespace bilevel {

double fb(double a, double b) { return a + b - std::hypot(a, b); }

double fb_perturbed(double a, double b, double eps) {
  if (!(eps > 0.0)) throw UsageError("fb_perturbed needs eps > 0");
  return std::sqrt(a * a + b * b + eps) - a - b;
}

Eigen::Vector2d fb_perturbed_gradient(double a, double b, double eps) {
  if (!(eps > 0.0)) throw UsageError("fb_perturbed needs eps > 0");
  const double r = std::sqrt(a * a + b * b + eps);
  return {a / r - 1.0, b / r - 1.0};
}

Expression fb_perturbed_expr(const Expression& a, const Expression& b, double eps) {
  if (!(eps > 0.0)) throw UsageError("fb_perturbed needs eps > 0");
  return sqrt(pow(a, 2) + pow(b, 2) + eps) - a - b;
}

const char* to_string(RowKind k) {
  switch (k) {
    case RowKind::Stationarity: return "stationarity";
    case RowKind::Complementarity: return "complementarity";
    case RowKind::FischerBurmeister: return "fischer-burmeister";
    case RowKind::LowerInequality: return "lower-inequality";
    case RowKind::LowerEquality: return "lower-equality";
    case RowKind::Envelope: return "envelope";
    case RowKind::UpperInequality: return "upper-inequality";
    case RowKind::UpperEquality: return "upper-equality";
    case RowKind::Other: return "other";
  }
  return "other";
}

std::vector<std::string> SingleLevelNLP::names() const {
  std::vector<std::string> out;
  for (const auto& v : variables) out.push_back(v.name);
  return out;
}

Eigen::VectorXd SingleLevelNLP::lower_bounds() const {
  Eigen::VectorXd lo(size());
  for (Eigen::Index i = 0; i < size(); ++i) lo(i) = variables[static_cast<std::size_t>(i)].lo;
  return lo;
}

Eigen::VectorXd SingleLevelNLP::upper_bounds() const {
  Eigen::VectorXd hi(size());
  for (Eigen::Index i = 0; i < size(); ++i) hi(i) = variables[static_cast<std::size_t>(i)].hi;
  return hi;
}

int SingleLevelNLP::index_of(const std::string& n) const {
  for (std::size_t i = 0; i < variables.size(); ++i)
    if (variables[i].name == n) return static_cast<int>(i);
  throw SchemaError("NLP has no variable '" + n + "'");
}

std::vector<int> SingleLevelNLP::primal_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < variables.size(); ++i)
    if (variables[i].kind == VarKind::Primal) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> SingleLevelNLP::multiplier_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < variables.size(); ++i)
    if (variables[i].kind == VarKind::Multiplier) out.push_back(static_cast<int>(i));
  return out;
}

double SingleLevelNLP::primal_infeasibility(const Eigen::VectorXd& z) const {
  if (z.size() != size()) throw SchemaError("point has the wrong dimension for this NLP");
  double worst = 0.0;
  try {
    for (const auto& r : equalities) worst = std::max(worst, std::abs(r.expr.eval(z)));
    for (const auto& r : inequalities) worst = std::max(worst, r.expr.eval(z));
  } catch (const NumericalError&) {
    return std::numeric_limits<double>::infinity();
  }
  for (Eigen::Index i = 0; i < size(); ++i) {
    const auto& v = variables[static_cast<std::size_t>(i)];
    worst = std::max({worst, v.lo - z(i), z(i) - v.hi});
  }
  return worst;
}

double SingleLevelNLP::stationarity_residual(const Eigen::VectorXd& z) const {
  double worst = 0.0;
  for (const auto& r : equalities)
    if (r.kind == RowKind::Stationarity) worst = std::max(worst, std::abs(r.expr.eval(z)));
  return worst;
}

std::string SingleLevelNLP::listing() const {
  const auto n = names();
  std::ostringstream out;
  out.precision(12);
  out << "nlp " << name << ": " << variables.size() << " variables, " << equalities.size() << " equalities, "
      << inequalities.size() << " inequalities\n";
  out << "objective (" << to_string(sense) << "): " << objective.to_string(n) << "\n";
  for (const auto& v : variables)
    out << "var " << v.name << " [" << v.lo << ", " << v.hi << "] "
        << (v.kind == VarKind::Primal ? "primal" : "multiplier") << "\n";
  for (const auto& r : equalities)
    out << "eq [" << to_string(r.kind) << "] " << r.label << ": " << r.expr.to_string(n) << " = 0\n";
  for (const auto& r : inequalities)
    out << "ineq [" << to_string(r.kind) << "] " << r.label << ": " << r.expr.to_string(n) << " <= 0\n";
  return out.str();
}

void SingleLevelNLP::validate() const {
  const auto n = static_cast<int>(variables.size());
  if (n == 0) throw SchemaError("NLP has no variables");
  for (const auto& v : variables)
    if (std::isnan(v.lo) || std::isnan(v.hi) || v.lo > v.hi)
      throw SchemaError("NLP variable '" + v.name + "' has invalid bounds");
  auto check = [&](const Expression& e, const std::string& what) {
    for (int v : e.support())
      if (v >= n) throw SchemaError(what + " references variable index " + std::to_string(v));
  };
  check(objective, "objective");
  for (const auto* list : {&equalities, &inequalities})
    for (const auto& r : *list) check(r.expr, "row '" + r.label + "'");
  if (preferred_start && preferred_start->size() != n) throw SchemaError("preferred start has wrong dimension");
}

void KKTOptions::validate() const {
  if (use_fb && !(epsilon > 0.0 && epsilon_lower > 0.0 && epsilon_upper > 0.0))
    throw UsageError("Fischer-Burmeister smoothing needs positive epsilons");
  if (envelope) envelope->validate();
}

SingleLevelNLP kkt_reformulate(const BilevelProblem& p, const KKTOptions& opts) {
  p.validate();
  opts.validate();
  const auto inf = std::numeric_limits<double>::infinity();
  const auto lower = p.lower_indices();

  std::optional<EnvelopeConstraint> env = p.envelope;
  if (opts.envelope) {
    if (opts.envelope->dim() != static_cast<Eigen::Index>(lower.size()))
      throw SchemaError("envelope dimension does not match the lower-level variable count");
    env = EnvelopeConstraint{*opts.envelope, lower};
  }

  SingleLevelNLP nlp;
  nlp.name = p.name + (opts.use_fb ? "-kkt-fb" : "-kkt");
  nlp.objective = p.upper_objective;
  nlp.sense = p.sense;
  for (const auto& v : p.variables) nlp.variables.push_back({v.name, v.lo, v.hi, VarKind::Primal});

  auto add_multiplier = [&](const std::string& name, double lo) {
    nlp.variables.push_back({name, lo, inf, VarKind::Multiplier});
    return Expression::variable(static_cast<int>(nlp.variables.size()) - 1);
  };

  std::vector<Expression> mu_g, lam_h, mu_lo, mu_hi;
  for (const auto& c : p.lower_inequalities) mu_g.push_back(add_multiplier("mu_" + c.label, 0.0));
  for (const auto& c : p.lower_equalities) lam_h.push_back(add_multiplier("lam_" + c.label, -inf));
  for (int v : lower) {
    const auto& name = p.variables[static_cast<std::size_t>(v)].name;
    mu_lo.push_back(add_multiplier("muL_" + name, 0.0));
    mu_hi.push_back(add_multiplier("muU_" + name, 0.0));
  }
  Expression lam_m;
  Expression D;
  if (env) {
    lam_m = add_multiplier("lam_m", 0.0);
    const auto& e = env->envelope;
    D = Expression::quadratic_form(e.inv_cov, e.mean, env->vars) - e.tau * e.tau;
    Eigen::VectorXd start = Eigen::VectorXd::Zero(nlp.size());
    for (std::size_t i = 0; i < p.variables.size(); ++i)
      start(static_cast<Eigen::Index>(i)) = 0.5 * (p.variables[i].lo + p.variables[i].hi);
    for (std::size_t k = 0; k < env->vars.size(); ++k)
      start(env->vars[k]) = std::clamp(e.mean(static_cast<Eigen::Index>(k)), p.variables[static_cast<std::size_t>(env->vars[k])].lo,
                                       p.variables[static_cast<std::size_t>(env->vars[k])].hi);
    nlp.preferred_start = start;
  }

  // Stationarity of the follower's Lagrangian, one row per lower variable.
  for (std::size_t i = 0; i < lower.size(); ++i) {
    const int v = lower[i];
    Expression row = p.lower_objective.diff(v);
    for (std::size_t j = 0; j < p.lower_inequalities.size(); ++j)
      row += mu_g[j] * p.lower_inequalities[j].expr.diff(v);
    for (std::size_t k = 0; k < p.lower_equalities.size(); ++k)
      row += lam_h[k] * p.lower_equalities[k].expr.diff(v);
    row = row - mu_lo[i] + mu_hi[i];
    if (env) row += lam_m * D.diff(v);
    nlp.equalities.push_back({"stat_" + p.variables[static_cast<std::size_t>(v)].name, RowKind::Stationarity, row});
  }

  for (std::size_t j = 0; j < p.lower_inequalities.size(); ++j) {
    const auto& c = p.lower_inequalities[j];
    if (opts.use_fb) {
      nlp.equalities.push_back({"fb_" + c.label, RowKind::FischerBurmeister, fb_perturbed_expr(mu_g[j], -c.expr, opts.epsilon)});
    } else {
      nlp.inequalities.push_back({c.label, RowKind::LowerInequality, c.expr});
      nlp.equalities.push_back({"comp_" + c.label, RowKind::Complementarity, mu_g[j] * c.expr});
    }
  }
  for (const auto& c : p.lower_equalities) nlp.equalities.push_back({c.label, RowKind::LowerEquality, c.expr});

  for (std::size_t i = 0; i < lower.size(); ++i) {
    const int v = lower[i];
    const auto& var = p.variables[static_cast<std::size_t>(v)];
    const Expression y = Expression::variable(v);
    if (opts.use_fb) {
      nlp.equalities.push_back({"fbL_" + var.name, RowKind::FischerBurmeister, fb_perturbed_expr(y - var.lo, mu_lo[i], opts.epsilon_lower)});
      nlp.equalities.push_back({"fbU_" + var.name, RowKind::FischerBurmeister, fb_perturbed_expr(var.hi - y, mu_hi[i], opts.epsilon_upper)});
    } else {
      nlp.equalities.push_back({"compL_" + var.name, RowKind::Complementarity, mu_lo[i] * (var.lo - y)});
      nlp.equalities.push_back({"compU_" + var.name, RowKind::Complementarity, mu_hi[i] * (y - var.hi)});
    }
  }

  if (env) {
    nlp.inequalities.push_back({"envelope", RowKind::Envelope, D});
    nlp.equalities.push_back({"comp_envelope", RowKind::Complementarity, lam_m * D});
  }
  for (const auto& c : p.upper_inequalities) nlp.inequalities.push_back({c.label, RowKind::UpperInequality, c.expr});
  for (const auto& c : p.upper_equalities) nlp.equalities.push_back({c.label, RowKind::UpperEquality, c.expr});

  LicqView view;
  view.columns = lower;
  for (const auto& c : p.lower_inequalities) view.inequalities.push_back({c.label, RowKind::LowerInequality, c.expr});
  for (int v : lower) {
    const auto& var = p.variables[static_cast<std::size_t>(v)];
    const Expression y = Expression::variable(v);
    view.inequalities.push_back({"lo_" + var.name, RowKind::LowerInequality, var.lo - y});
    view.inequalities.push_back({"hi_" + var.name, RowKind::LowerInequality, y - var.hi});
  }
  if (env) view.inequalities.push_back({"envelope", RowKind::Envelope, D});
  for (const auto& c : p.lower_equalities) view.equalities.push_back({c.label, RowKind::LowerEquality, c.expr});
  nlp.licq_view = std::move(view);

  nlp.validate();
  return nlp;
}

LicqResult licq_check(const SingleLevelNLP& nlp, const Eigen::VectorXd& point, double active_tol) {
  LicqResult res;
  std::vector<int> columns;
  const std::vector<NlpRow>* eq = &nlp.equalities;
  const std::vector<NlpRow>* ineq = &nlp.inequalities;
  if (nlp.licq_view) {
    columns = nlp.licq_view->columns;
    eq = &nlp.licq_view->equalities;
    ineq = &nlp.licq_view->inequalities;
  } else {
    for (Eigen::Index i = 0; i < nlp.size(); ++i) columns.push_back(static_cast<int>(i));
  }

  std::vector<Eigen::VectorXd> rows;
  auto add = [&](const NlpRow& r) {
    const Eigen::VectorXd g = r.expr.gradient(point);
    Eigen::VectorXd row(static_cast<Eigen::Index>(columns.size()));
    for (std::size_t k = 0; k < columns.size(); ++k) row(static_cast<Eigen::Index>(k)) = g(columns[k]);
    rows.push_back(std::move(row));
    res.active.push_back(r.label);
  };
  try {
    for (const auto& r : *eq) add(r);
    for (const auto& r : *ineq)
      if (std::abs(r.expr.eval(point)) <= active_tol) add(r);
  } catch (const std::exception&) {
    res.holds = false;
    return res;
  }
  res.active_count = static_cast<int>(rows.size());
  if (rows.empty()) return res;

  Eigen::MatrixXd J(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) J.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(J);
  const auto& s = svd.singularValues();
  const double smax = s.size() ? s(0) : 0.0;
  res.rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (smax > 0.0 && s(i) > 1e-10 * smax) ++res.rank;
  res.smallest_singular_value = s.size() ? s(s.size() - 1) : 0.0;
  res.holds = res.rank == res.active_count;
  return res;
}

}  // namespace bilevel
