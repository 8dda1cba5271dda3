#include "bilevel/robust.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "bilevel/error.hpp"

namespace bilevel {

void RobustProblem::validate() const {
  if (!te_model) throw UsageError("robust problem needs an efficiency model");
  te_model->net.validate();
  envelope.validate();
  if (envelope.dim() != te_model->inputs()) throw SchemaError("envelope dimension does not match the model inputs");
  if (!std::isfinite(te_target)) throw UsageError("efficiency target must be finite");
  if (!(rho_cap_factor > 0.0) || !std::isfinite(rho_cap_factor)) throw UsageError("radius cap must be positive");
}

namespace {

// Model output in physical units at scaled input u, with its gradient in u.
double model_value(const TrainedModel& m, const Eigen::VectorXd& u) {
  return m.output_min() + m.output_range() * forward(m.net, u);
}

Eigen::VectorXd model_gradient(const TrainedModel& m, const Eigen::VectorXd& u) {
  return m.output_range() * input_gradient(m.net, u);
}

Eigen::MatrixXd cholesky_factor(const Eigen::MatrixXd& cov) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw NumericalError("covariance is not positive definite");
  return llt.matrixL();
}

// Linearised worst case: -rho * cov g / sqrt(g^T cov g).
Eigen::VectorXd linear_worst_delta(const Eigen::MatrixXd& cov, const Eigen::VectorXd& g, double rho) {
  const double norm = std::sqrt(g.dot(cov * g));
  if (!(norm > 0.0)) return Eigen::VectorXd::Zero(g.size());
  return -rho * cov * g / norm;
}

}  // namespace

SingleLevelNLP robust_reformulate(const RobustProblem& rp) {
  rp.validate();
  const auto& model = *rp.te_model;
  const int d = rp.dim();
  const auto& env = rp.envelope;

  SingleLevelNLP nlp;
  nlp.name = "robust-" + model.target_name;
  nlp.sense = Sense::Maximize;
  std::vector<int> xs, ds;
  for (int i = 0; i < d; ++i) {
    nlp.variables.push_back({model.input_names[static_cast<std::size_t>(i)], 0.0, 1.0, VarKind::Primal});
    xs.push_back(i);
  }
  // Radius cap; the delta boxes are implied by the ball row once rho is capped.
  const double rho_max = rp.rho_cap();
  const int rho_idx = d;
  nlp.variables.push_back({"rho", 0.0, rho_max, VarKind::Primal});
  for (int i = 0; i < d; ++i) {
    const double w = rho_max * std::sqrt(env.covariance(i, i));
    nlp.variables.push_back({"delta_" + model.input_names[static_cast<std::size_t>(i)], -w, w, VarKind::Primal});
    ds.push_back(d + 1 + i);
  }
  const int lam_idx = 2 * d + 1;
  nlp.variables.push_back({"lambda", 0.0, std::numeric_limits<double>::infinity(), VarKind::Multiplier});

  // Physical inputs min + range * (x + delta).
  std::vector<int> xd = xs;
  xd.insert(xd.end(), ds.begin(), ds.end());
  Eigen::MatrixXd map = Eigen::MatrixXd::Zero(d, 2 * d);
  Eigen::VectorXd offset(d);
  for (int i = 0; i < d; ++i) {
    const auto& r = model.input_scaling.ranges.at(static_cast<std::size_t>(i));
    map(i, i) = map(i, d + i) = r.max - r.min;
    offset(i) = r.min;
  }
  const Expression f = model_expression(rp.te_model, xd, map, offset);
  const Expression rho = Expression::variable(rho_idx);
  const Expression lam = Expression::variable(lam_idx);
  const Expression Q = Expression::quadratic_form(env.inv_cov, Eigen::VectorXd::Zero(d), ds);
  const Expression ball = Q - pow(rho, 2.0);

  nlp.objective = rho;
  nlp.inequalities.push_back(
      {"design_envelope", RowKind::UpperInequality, Expression::quadratic_form(env.inv_cov, env.mean, xs) - env.tau * env.tau});
  nlp.inequalities.push_back({"te_target", RowKind::UpperInequality, rp.te_target - f});
  nlp.inequalities.push_back({"adversary_ball", RowKind::LowerInequality, ball});
  for (int i = 0; i < d; ++i)
    nlp.equalities.push_back({"stat_" + nlp.variables[static_cast<std::size_t>(ds[static_cast<std::size_t>(i)])].name,
                              RowKind::Stationarity, f.diff(ds[static_cast<std::size_t>(i)]) + lam * Q.diff(ds[static_cast<std::size_t>(i)])});
  nlp.equalities.push_back({"comp_adversary_ball", RowKind::Complementarity, lam * ball});

  LicqView view;
  view.columns = ds;
  view.inequalities.push_back({"adversary_ball", RowKind::LowerInequality, ball});
  nlp.licq_view = view;

  // Linearised guess: x pushed toward the envelope edge along cov * grad,
  // rho from the linear margin, delta and lambda consistent with stationarity.
  Eigen::VectorXd start = Eigen::VectorXd::Zero(nlp.size());
  const Eigen::VectorXd g0 = model_gradient(model, env.mean);
  const double n0 = std::sqrt(g0.dot(env.covariance * g0));
  Eigen::VectorXd x0 = env.mean;
  if (n0 > 0.0) x0 += 0.9 * env.tau * env.covariance * g0 / n0;
  x0 = x0.cwiseMax(0.0).cwiseMin(1.0);
  if (env.distance_sq(x0) > env.tau * env.tau) x0 = env.mean.cwiseMax(0.0).cwiseMin(1.0);
  const Eigen::VectorXd gx = model_gradient(model, x0);
  const double nx = std::sqrt(gx.dot(env.covariance * gx));
  const double rho0 = std::clamp(nx > 0.0 ? (model_value(model, x0) - rp.te_target) / nx : 0.1, 0.1, 0.9 * rho_max);
  const Eigen::VectorXd delta0 = linear_worst_delta(env.covariance, gx, rho0);
  start.head(d) = x0;
  start(rho_idx) = rho0;
  start.segment(d + 1, d) = delta0;
  start(lam_idx) = 0.5 * std::sqrt(model_gradient(model, x0 + delta0).dot(env.covariance * model_gradient(model, x0 + delta0))) / rho0;
  nlp.preferred_start = start;
  nlp.validate();
  return nlp;
}

AdversaryResult adversary_resolve(const TrainedModel& model, const Eigen::MatrixXd& covariance,
                                  const Eigen::VectorXd& x, double rho, std::uint64_t seed, int starts) {
  if (x.size() != model.inputs() || covariance.rows() != x.size()) throw SchemaError("adversary dimension mismatch");
  if (!(rho >= 0.0)) throw UsageError("radius must be non-negative");
  if (starts < 1) throw UsageError("adversary needs at least one start");
  const Eigen::MatrixXd L = cholesky_factor(covariance);
  const auto d = x.size();

  auto value = [&](const Eigen::VectorXd& w) { return model_value(model, x + L * w); };
  auto project = [&](Eigen::VectorXd w) {
    const double n = w.norm();
    if (n > rho) w *= rho / n;
    return w;
  };

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  AdversaryResult best;
  best.delta = Eigen::VectorXd::Zero(d);
  best.te_min = value(best.delta);
  if (rho == 0.0) return best;

  for (int s = 0; s < starts; ++s) {
    Eigen::VectorXd w(d);
    if (s == 0) {
      const Eigen::VectorXd g = L.transpose() * model_gradient(model, x);
      w = g.norm() > 0.0 ? Eigen::VectorXd(-rho * g / g.norm()) : Eigen::VectorXd::Zero(d);
    } else {
      for (Eigen::Index i = 0; i < d; ++i) w(i) = normal(rng);
      w *= rho * std::pow(uniform(rng), 1.0 / static_cast<double>(d)) / w.norm();
    }
    double fw = value(w);
    double step = rho;
    for (int it = 0; it < 500; ++it) {
      const Eigen::VectorXd g = L.transpose() * model_gradient(model, x + L * w);
      bool moved = false;
      for (int k = 0; k < 60; ++k) {
        const Eigen::VectorXd trial = project(w - step / std::max(1.0, g.norm()) * g);
        const double ft = value(trial);
        if (ft <= fw - 1e-4 * g.dot(w - trial)) {
          moved = (w - trial).norm() > 1e-13 * (1.0 + rho);
          w = trial;
          fw = ft;
          step = std::min(2.0 * step, rho);
          break;
        }
        step *= 0.5;
      }
      if (!moved) break;
    }
    if (fw < best.te_min) {
      best.te_min = fw;
      best.delta = L * w;
    }
  }
  return best;
}

RobustSolution solve_robust(const RobustProblem& rp, const SolverConfig& cfg) {
  const SingleLevelNLP nlp = robust_reformulate(rp);
  const MultistartResult ms = multistart_solve(nlp, cfg);
  const auto& model = *rp.te_model;
  const int d = rp.dim();

  RobustSolution sol;
  sol.report = ms.best;
  sol.status = ms.best.status;
  sol.x = ms.best.point.head(d);
  sol.rho = ms.best.point(d);
  sol.delta = ms.best.point.segment(d + 1, d);
  sol.lambda = ms.best.point(2 * d + 1);
  sol.te_nominal = model_value(model, sol.x);
  sol.te_worst_kkt = model_value(model, sol.x + sol.delta);

  double cpu = 0.0;
  for (const auto& r : ms.all) cpu += r.cpu_seconds;
  const double t1 = thread_cpu_seconds();

  const double tol = cfg.feasibility_tol * std::max(1.0, std::abs(rp.te_target));
  const auto adv = adversary_resolve(model, rp.envelope.covariance, sol.x, sol.rho, cfg.seed);
  sol.te_worst = std::min(sol.te_worst_kkt, adv.te_min);
  sol.adversary_confirms = adv.te_min >= rp.te_target - tol;
  if (sol.adversary_confirms) {
    sol.rho_certified = sol.rho;
  } else if (sol.te_nominal >= rp.te_target - tol) {
    double lo = 0.0, hi = sol.rho;
    for (int k = 0; k < 40; ++k) {
      const double mid = 0.5 * (lo + hi);
      if (adversary_resolve(model, rp.envelope.covariance, sol.x, mid, cfg.seed).te_min >= rp.te_target - tol)
        lo = mid;
      else
        hi = mid;
    }
    sol.rho_certified = lo;
  }

  if (sol.status != SolveStatus::Optimal) {
    double best_nominal = -std::numeric_limits<double>::infinity();
    for (const auto& r : ms.all)
      if (r.point.size() == nlp.size()) best_nominal = std::max(best_nominal, model_value(model, r.point.head(d)));
    sol.diagnostics = "no start reached a feasible robust design; highest efficiency at a returned design point is " +
                      format_number(best_nominal) + " against target " + format_number(rp.te_target);
  } else if (sol.rho >= rp.rho_cap() - tol) {
    sol.diagnostics = "radius reached its cap of " + format_number(rp.rho_cap());
  } else if (!sol.adversary_confirms) {
    sol.diagnostics = "independent adversary found efficiency " + format_number(adv.te_min) +
                      " inside the returned radius; certified radius " + format_number(sol.rho_certified);
  }
  sol.cpu_seconds = cpu + (thread_cpu_seconds() - t1);
  return sol;
}

PerturbationStudy perturbation_study(const RobustProblem& rp, const Eigen::VectorXd& x, double rho, int n,
                                     double filter_percentile, std::uint64_t seed) {
  rp.validate();
  if (n < 1) throw UsageError("sample count must be positive");
  if (!(rho >= 0.0)) throw UsageError("radius must be non-negative");
  if (x.size() != rp.dim()) throw SchemaError("design point has wrong dimension");
  const auto d = x.size();
  const Eigen::MatrixXd L = cholesky_factor(rp.envelope.covariance);
  const MahalanobisEnvelope filter = rp.envelope.at_percentile(filter_percentile);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<Eigen::VectorXd> kept;
  Eigen::VectorXd z(d);
  for (int s = 0; s < n; ++s) {
    for (Eigen::Index i = 0; i < d; ++i) z(i) = normal(rng);
    const double r = rho * uniform(rng);
    const Eigen::VectorXd delta = z.norm() > 0.0 ? Eigen::VectorXd(L * z * (r / z.norm())) : Eigen::VectorXd::Zero(d);
    if (filter.contains(x + delta)) kept.push_back(delta);
  }
  if (kept.empty()) throw NumericalError("every perturbation sample left the filtering envelope");

  PerturbationStudy out;
  out.requested = n;
  out.kept = static_cast<int>(kept.size());
  out.deltas.resize(out.kept, d);
  out.te.resize(out.kept);
  int above = 0;
  for (int k = 0; k < out.kept; ++k) {
    out.deltas.row(k) = kept[static_cast<std::size_t>(k)].transpose();
    out.te(k) = model_value(*rp.te_model, x + kept[static_cast<std::size_t>(k)]);
    if (out.te(k) >= rp.te_target) ++above;
  }
  out.te_mean = out.te.mean();
  out.te_min = out.te.minCoeff();
  out.te_max = out.te.maxCoeff();
  out.fraction_above_target = static_cast<double>(above) / out.kept;
  return out;
}

std::vector<OperatingRange> operating_ranges(const RobustSolution& sol, const ScalingSpec& scaling) {
  const auto d = static_cast<Eigen::Index>(scaling.columns.size());
  if (sol.x.size() != d || sol.delta.size() != d) throw SchemaError("solution does not match the scaling");
  std::vector<OperatingRange> out;
  for (Eigen::Index i = 0; i < d; ++i) {
    const auto j = static_cast<std::size_t>(i);
    out.push_back({scaling.columns[j], scaling.invert(j, sol.x(i)), scaling.invert(j, sol.x(i) + sol.delta(i))});
  }
  return out;
}

std::vector<OperatingRange> operating_ranges(const RobustSolution& sol, const TrainedModel& model) {
  return operating_ranges(sol, model.input_scaling);
}

nlohmann::json to_json(const RobustSolution& sol, const TrainedModel& model) {
  nlohmann::json ranges = nlohmann::json::array();
  if (sol.x.size() == model.inputs())
    for (const auto& r : operating_ranges(sol, model))
      ranges.push_back({{"name", r.name}, {"nominal", r.nominal}, {"worst", r.worst}, {"lo", r.lo()}, {"hi", r.hi()}});
  return {{"status", to_string(sol.status)},
          {"rho", sol.rho},
          {"rho_certified", sol.rho_certified},
          {"lambda", sol.lambda},
          {"te_nominal", sol.te_nominal},
          {"te_worst_kkt", sol.te_worst_kkt},
          {"te_worst", sol.te_worst},
          {"adversary_confirms", sol.adversary_confirms},
          {"cpu_seconds", sol.cpu_seconds},
          {"diagnostics", sol.diagnostics},
          {"operating_ranges", ranges}};
}

}  // namespace bilevel
