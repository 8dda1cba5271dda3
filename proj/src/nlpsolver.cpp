#include "bilevel/nlpsolver.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "bilevel/error.hpp"
#include "bilevel/parallel.hpp"

namespace bilevel {

void SolverConfig::validate() const {
  if (!(feasibility_tol > 0.0) || !(optimality_tol > 0.0)) throw UsageError("solver tolerances must be positive");
  if (!(penalty_growth > 1.0)) throw UsageError("penalty growth must exceed 1");
  if (!(penalty_init > 0.0) || penalty_max < penalty_init) throw UsageError("invalid penalty range");
  if (max_outer < 1 || max_inner < 1) throw UsageError("iteration limits must be positive");
  if (starts < 1) throw UsageError("starts must be at least 1");
  if (!(time_limit > 0.0)) throw UsageError("time limit must be positive");
}

const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Optimal: return "Optimal";
    case SolveStatus::Infeasible: return "Infeasible";
    case SolveStatus::IterationLimit: return "IterationLimit";
    case SolveStatus::TimeLimit: return "TimeLimit";
  }
  return "Infeasible";
}

double SolutionReport::value(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return point(static_cast<Eigen::Index>(i));
  throw SchemaError("report has no variable '" + name + "'");
}

double thread_cpu_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Eigen::VectorXd project(const Eigen::VectorXd& z, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  return z.cwiseMax(lo).cwiseMin(hi);
}

// Augmented Lagrangian of the NLP in minimization form.
class Lagrangian {
 public:
  Lagrangian(const SingleLevelNLP& nlp) : nlp_(nlp), sign_(nlp.sense == Sense::Minimize ? 1.0 : -1.0), n_(nlp.size()) {}

  Eigen::VectorXd lam, mu;
  double rho = 10.0;

  // Value only; +inf where any row is undefined.
  double value(const Eigen::VectorXd& z) const {
    try {
      double v = sign_ * nlp_.objective.eval(z);
      for (std::size_t i = 0; i < nlp_.equalities.size(); ++i) {
        const double c = nlp_.equalities[i].expr.eval(z);
        v += lam(idx(i)) * c + 0.5 * rho * c * c;
      }
      for (std::size_t j = 0; j < nlp_.inequalities.size(); ++j) {
        const double g = nlp_.inequalities[j].expr.eval(z);
        const double t = std::max(0.0, mu(idx(j)) + rho * g);
        v += (t * t - mu(idx(j)) * mu(idx(j))) / (2.0 * rho);
      }
      return std::isfinite(v) ? v : kInf;
    } catch (const NumericalError&) {
      return kInf;
    }
  }

  // Value, gradient and Hessian.
  double derivatives(const Eigen::VectorXd& z, Eigen::VectorXd& grad, Eigen::MatrixXd& hess) const {
    grad = Eigen::VectorXd::Zero(n_);
    hess = Eigen::MatrixXd::Zero(n_, n_);
    double v = add(nlp_.objective, z, sign_, 0.0, grad, hess).value * sign_;
    for (std::size_t i = 0; i < nlp_.equalities.size(); ++i) {
      const auto& e = nlp_.equalities[i].expr;
      const double c = e.eval(z);
      const double w = lam(idx(i)) + rho * c;
      add(e, z, w, rho, grad, hess);
      v += lam(idx(i)) * c + 0.5 * rho * c * c;
    }
    for (std::size_t j = 0; j < nlp_.inequalities.size(); ++j) {
      const auto& e = nlp_.inequalities[j].expr;
      const double g = e.eval(z);
      const double t = mu(idx(j)) + rho * g;
      if (t > 0.0) add(e, z, t, rho, grad, hess);
      v += (std::max(0.0, t) * std::max(0.0, t) - mu(idx(j)) * mu(idx(j))) / (2.0 * rho);
    }
    return v;
  }

  double objective(const Eigen::VectorXd& z) const { return nlp_.objective.eval(z); }

  Eigen::VectorXd equality_values(const Eigen::VectorXd& z) const {
    Eigen::VectorXd c(static_cast<Eigen::Index>(nlp_.equalities.size()));
    for (std::size_t i = 0; i < nlp_.equalities.size(); ++i) c(idx(i)) = nlp_.equalities[i].expr.eval(z);
    return c;
  }
  Eigen::VectorXd inequality_values(const Eigen::VectorXd& z) const {
    Eigen::VectorXd g(static_cast<Eigen::Index>(nlp_.inequalities.size()));
    for (std::size_t j = 0; j < nlp_.inequalities.size(); ++j) g(idx(j)) = nlp_.inequalities[j].expr.eval(z);
    return g;
  }

 private:
  static Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

  // grad += w * grad(e); hess += w * hess(e) + r * grad(e) grad(e)^T
  static LocalEval add(const Expression& e, const Eigen::VectorXd& z, double w, double r, Eigen::VectorXd& grad,
                       Eigen::MatrixXd& hess) {
    auto le = e.eval_local(z, 2);
    const auto& s = e.support();
    const auto m = s.size();
    for (std::size_t a = 0; a < m; ++a) {
      const auto ia = static_cast<Eigen::Index>(a);
      grad(s[a]) += w * le.gradient(ia);
      for (std::size_t b = 0; b < m; ++b) {
        const auto ib = static_cast<Eigen::Index>(b);
        hess(s[a], s[b]) += w * le.hessian(ia, ib) + r * le.gradient(ia) * le.gradient(ib);
      }
    }
    return le;
  }

  const SingleLevelNLP& nlp_;
  double sign_;
  Eigen::Index n_;
};

struct InnerResult {
  double pg_norm = kInf;
  int iterations = 0;
};

double projected_gradient_norm(const Eigen::VectorXd& z, const Eigen::VectorXd& g, const Eigen::VectorXd& lo,
                               const Eigen::VectorXd& hi) {
  return (project(z - g, lo, hi) - z).lpNorm<Eigen::Infinity>();
}

// Direction on the free set from a symmetric matrix; `modify` flips and
// floors eigenvalues so the result is a descent direction.
bool eigen_direction(const Eigen::MatrixXd& H, const Eigen::VectorXd& g, bool modify, Eigen::VectorXd& d) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H);
  if (es.info() != Eigen::Success) return false;
  Eigen::VectorXd ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  const double floor = 1e-8 * scale;
  if (!modify && ev.minCoeff() <= floor) return false;
  for (Eigen::Index i = 0; i < ev.size(); ++i) ev(i) = std::max(std::abs(ev(i)), floor);
  const auto& Q = es.eigenvectors();
  d = -Q * ((Q.transpose() * g).cwiseQuotient(ev));
  return d.allFinite();
}

// Projected Newton on the box, with BFGS and gradient fallbacks.
InnerResult minimize_box(const Lagrangian& L, Eigen::VectorXd& z, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi,
                         double tol, int max_iter, double deadline) {
  const auto n = z.size();
  InnerResult res;
  Eigen::VectorXd g, g_new;
  Eigen::MatrixXd H, H_new;
  double f = L.derivatives(z, g, H);
  Eigen::MatrixXd B = Eigen::MatrixXd::Identity(n, n);
  bool have_bfgs = false;

  for (int it = 0; it < max_iter; ++it) {
    res.pg_norm = projected_gradient_norm(z, g, lo, hi);
    res.iterations = it;
    if (res.pg_norm <= tol) return res;
    if (thread_cpu_seconds() > deadline) return res;

    const double eps_act = std::min(1e-3, res.pg_norm);
    std::vector<int> free;
    for (Eigen::Index i = 0; i < n; ++i) {
      const bool at_lo = z(i) - lo(i) <= eps_act && g(i) > 0.0;
      const bool at_hi = hi(i) - z(i) <= eps_act && g(i) < 0.0;
      if (!(at_lo || at_hi)) free.push_back(static_cast<int>(i));
    }
    const auto nf = static_cast<Eigen::Index>(free.size());
    Eigen::VectorXd gF(nf);
    Eigen::MatrixXd HF(nf, nf), BF(nf, nf);
    for (Eigen::Index a = 0; a < nf; ++a) {
      gF(a) = g(free[static_cast<std::size_t>(a)]);
      for (Eigen::Index b = 0; b < nf; ++b) {
        HF(a, b) = H(free[static_cast<std::size_t>(a)], free[static_cast<std::size_t>(b)]);
        BF(a, b) = B(free[static_cast<std::size_t>(a)], free[static_cast<std::size_t>(b)]);
      }
    }

    // Candidate directions in order of preference.
    std::vector<Eigen::VectorXd> dirs;
    Eigen::VectorXd dF;
    if (nf > 0) {
      if (eigen_direction(HF, gF, false, dF)) {
        dirs.push_back(dF);
      } else {
        if (have_bfgs && eigen_direction(BF, gF, false, dF)) dirs.push_back(dF);
        if (eigen_direction(HF, gF, true, dF)) dirs.push_back(dF);
      }
    }
    dirs.push_back(Eigen::VectorXd());  // steepest descent marker

    bool moved = false;
    Eigen::VectorXd z_new;
    double f_new = f;
    for (const auto& dir : dirs) {
      Eigen::VectorXd d = -g;
      if (dir.size() > 0)
        for (Eigen::Index a = 0; a < nf; ++a) d(free[static_cast<std::size_t>(a)]) = dir(a);
      double alpha = 1.0;
      if (dir.size() == 0) alpha = 1.0 / std::max(1.0, g.lpNorm<Eigen::Infinity>());
      for (int ls = 0; ls < 50; ++ls, alpha *= 0.5) {
        z_new = project(z + alpha * d, lo, hi);
        const Eigen::VectorXd step = z_new - z;
        if (step.lpNorm<Eigen::Infinity>() == 0.0) break;
        f_new = L.value(z_new);
        if (f_new <= f + 1e-4 * g.dot(step)) {
          moved = true;
          break;
        }
      }
      if (moved) break;
    }
    if (!moved) return res;

    const double f_old = f;
    f = L.derivatives(z_new, g_new, H_new);
    const Eigen::VectorXd s = z_new - z;
    const Eigen::VectorXd y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!have_bfgs) B = (y.squaredNorm() / sy) * Eigen::MatrixXd::Identity(n, n);
      const Eigen::VectorXd Bs = B * s;
      B += y * y.transpose() / sy - Bs * Bs.transpose() / s.dot(Bs);
      have_bfgs = true;
    }
    z = z_new;
    g = g_new;
    H = H_new;
    if (s.lpNorm<Eigen::Infinity>() <= 1e-15 * (1.0 + z.lpNorm<Eigen::Infinity>()) &&
        std::abs(f_old - f) <= 1e-15 * (1.0 + std::abs(f)))
      break;
  }
  res.pg_norm = projected_gradient_norm(z, g, lo, hi);
  res.iterations = max_iter;
  return res;
}

}  // namespace

SolutionReport solve(const SingleLevelNLP& nlp, const Eigen::VectorXd& start, const SolverConfig& cfg) {
  cfg.validate();
  nlp.validate();
  if (start.size() != nlp.size()) throw SchemaError("start point has the wrong dimension");
  const double t0 = thread_cpu_seconds();
  const double deadline = t0 + cfg.time_limit;
  const Eigen::VectorXd lo = nlp.lower_bounds();
  const Eigen::VectorXd hi = nlp.upper_bounds();

  SolutionReport rep;
  rep.names = nlp.names();
  rep.start_point = project(start, lo, hi);
  Eigen::VectorXd z = rep.start_point;
  {
    double f0 = kInf;
    try {
      f0 = nlp.objective.eval(z);
    } catch (const NumericalError&) {
    }
    if (!std::isfinite(f0)) throw NumericalError("objective is not finite at the start point");
  }

  Lagrangian L(nlp);
  L.lam = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nlp.equalities.size()));
  L.mu = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nlp.inequalities.size()));
  L.rho = cfg.penalty_init;

  double prev_infeas = nlp.primal_infeasibility(z);
  double best_capped = kInf;
  int stalled_at_cap = 0;
  bool done = false;

  for (int k = 1; k <= cfg.max_outer && !done; ++k) {
    const Eigen::VectorXd z_old = z;
    InnerResult inner;
    try {
      inner = minimize_box(L, z, lo, hi, cfg.optimality_tol, cfg.max_inner, deadline);
    } catch (const NumericalError& e) {
      rep.message = e.what();
      rep.status = SolveStatus::Infeasible;
      done = true;
    }
    rep.inner_iterations += inner.iterations;
    rep.outer_iterations = k;
    const double infeas = nlp.primal_infeasibility(z);
    rep.trace.push_back({k, nlp.objective.eval(z), infeas, (z - z_old).norm(), L.rho});
    if (done) break;

    // First-order multipliers at z.
    const Eigen::VectorXd c = L.equality_values(z);
    const Eigen::VectorXd gi = L.inequality_values(z);
    L.lam += L.rho * c;
    L.mu = (L.mu + L.rho * gi).cwiseMax(0.0);

    if (infeas <= cfg.feasibility_tol && inner.pg_norm <= cfg.optimality_tol) {
      rep.status = SolveStatus::Optimal;
      break;
    }
    if (thread_cpu_seconds() > deadline) {
      rep.status = SolveStatus::TimeLimit;
      rep.message = "time limit reached";
      break;
    }
    if (infeas > cfg.feasibility_tol && infeas > 0.25 * prev_infeas) L.rho = std::min(L.rho * cfg.penalty_growth, cfg.penalty_max);
    prev_infeas = infeas;

    // At the penalty cap, demand that infeasibility halves every window.
    if (L.rho >= cfg.penalty_max && infeas > cfg.feasibility_tol) {
      if (!std::isfinite(best_capped)) {
        best_capped = infeas;
      } else if (++stalled_at_cap >= 10) {
        if (infeas > 0.5 * best_capped) {
          rep.status = SolveStatus::Infeasible;
          rep.message = "infeasibility stalled at the maximum penalty";
          break;
        }
        best_capped = infeas;
        stalled_at_cap = 0;
      }
    }
    if (k == cfg.max_outer) {
      rep.status = infeas <= cfg.feasibility_tol ? SolveStatus::IterationLimit : SolveStatus::Infeasible;
      rep.message = "outer iteration limit reached";
    }
  }

  rep.point = z;
  rep.objective = nlp.objective.eval(z);
  rep.primal_infeasibility = nlp.primal_infeasibility(z);
  if (rep.status == SolveStatus::Optimal && rep.primal_infeasibility > cfg.feasibility_tol)
    rep.status = SolveStatus::Infeasible;
  try {
    rep.stationarity_residual = nlp.stationarity_residual(z);
  } catch (const NumericalError&) {
    rep.stationarity_residual = kInf;
  }
  rep.equality_multipliers = L.lam;
  rep.inequality_multipliers = L.mu;
  rep.licq = licq_check(nlp, z, 1e-6);
  rep.cpu_seconds = std::round((thread_cpu_seconds() - t0) * 1e3) / 1e3;
  return rep;
}

std::vector<Eigen::VectorXd> start_points(const SingleLevelNLP& nlp, const SolverConfig& cfg) {
  cfg.validate();
  const auto n = nlp.size();
  const Eigen::VectorXd lo = nlp.lower_bounds();
  const Eigen::VectorXd hi = nlp.upper_bounds();

  auto centre = [&](Eigen::Index i) {
    const bool flo = std::isfinite(lo(i)), fhi = std::isfinite(hi(i));
    if (flo && fhi) return 0.5 * (lo(i) + hi(i));
    if (flo) return lo(i);
    if (fhi) return hi(i);
    return 0.0;
  };

  std::vector<Eigen::VectorXd> out;
  Eigen::VectorXd first(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool multiplier = nlp.variables[static_cast<std::size_t>(i)].kind == VarKind::Multiplier;
    first(i) = multiplier ? std::clamp(0.0, lo(i), hi(i)) : centre(i);
  }
  if (nlp.preferred_start)
    for (Eigen::Index i = 0; i < n; ++i) first(i) = std::clamp((*nlp.preferred_start)(i), lo(i), hi(i));
  out.push_back(first);

  const int m = cfg.starts - 1;
  if (m <= 0) return out;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Eigen::VectorXd> lhs(static_cast<std::size_t>(m), first);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (nlp.variables[static_cast<std::size_t>(i)].kind == VarKind::Multiplier) continue;
    std::vector<int> perm(static_cast<std::size_t>(m));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    double a = lo(i), b = hi(i);
    if (!std::isfinite(a) || !std::isfinite(b)) {
      const double c = centre(i);
      a = std::isfinite(a) ? a : c - 1.0;
      b = std::isfinite(b) ? b : c + 1.0;
    }
    for (int s = 0; s < m; ++s)
      lhs[static_cast<std::size_t>(s)](i) = a + (perm[static_cast<std::size_t>(s)] + u(rng)) / m * (b - a);
  }
  out.insert(out.end(), lhs.begin(), lhs.end());
  return out;
}

MultistartResult multistart_solve(const SingleLevelNLP& nlp, const SolverConfig& cfg) {
  const auto starts = start_points(nlp, cfg);
  MultistartResult res;
  res.all.resize(starts.size());
  parallel_for(starts.size(), cfg.threads, [&](std::size_t k) {
    try {
      res.all[k] = solve(nlp, starts[k], cfg);
    } catch (const NumericalError& e) {
      SolutionReport r;
      r.names = nlp.names();
      r.start_point = starts[k];
      r.point = starts[k];
      r.objective = std::numeric_limits<double>::quiet_NaN();
      r.primal_infeasibility = kInf;
      r.status = SolveStatus::Infeasible;
      r.message = e.what();
      res.all[k] = std::move(r);
    }
  });

  const double sign = nlp.sense == Sense::Minimize ? 1.0 : -1.0;
  std::size_t best = res.all.size();
  for (std::size_t k = 0; k < res.all.size(); ++k) {
    const auto& r = res.all[k];
    if (r.status != SolveStatus::Optimal) continue;
    if (best == res.all.size() || sign * r.objective < sign * res.all[best].objective) best = k;
  }
  if (best < res.all.size()) {
    res.best = res.all[best];
    return res;
  }
  best = 0;
  for (std::size_t k = 1; k < res.all.size(); ++k)
    if (res.all[k].primal_infeasibility < res.all[best].primal_infeasibility) best = k;
  res.best = res.all[best];
  if (res.best.primal_infeasibility > cfg.feasibility_tol) res.best.status = SolveStatus::Infeasible;
  return res;
}

Feasibility classify_feasibility(const SolutionReport& report, double tol) {
  return report.primal_infeasibility <= tol ? Feasibility::Feasible : Feasibility::Infeasible;
}

nlohmann::json to_json(const SolutionReport& r) {
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json point = nlohmann::json::object();
  for (std::size_t i = 0; i < r.names.size() && static_cast<Eigen::Index>(i) < r.point.size(); ++i)
    point[r.names[i]] = r.point(static_cast<Eigen::Index>(i));
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& t : r.trace)
    trace.push_back({{"iteration", t.iteration},
                     {"objective", t.objective},
                     {"infeasibility", t.infeasibility},
                     {"step_norm", t.step_norm},
                     {"penalty", t.penalty}});
  return {{"status", to_string(r.status)},
          {"objective", r.objective},
          {"primal_infeasibility", r.primal_infeasibility},
          {"stationarity_residual", r.stationarity_residual},
          {"cpu_seconds", r.cpu_seconds},
          {"variables", r.names},
          {"point", point},
          {"start_point", vec(r.start_point)},
          {"outer_iterations", r.outer_iterations},
          {"inner_iterations", r.inner_iterations},
          {"equality_multipliers", vec(r.equality_multipliers)},
          {"inequality_multipliers", vec(r.inequality_multipliers)},
          {"licq",
           {{"holds", r.licq.holds},
            {"rank", r.licq.rank},
            {"active_count", r.licq.active_count},
            {"active", r.licq.active}}},
          {"message", r.message},
          {"trace", trace}};
}

std::string trace_csv(const SolutionReport& r) {
  std::string out = "iteration,objective,infeasibility,step_norm,penalty\n";
  for (const auto& t : r.trace)
    out += std::to_string(t.iteration) + "," + format_number(t.objective) + "," + format_number(t.infeasibility) + "," +
           format_number(t.step_norm) + "," + format_number(t.penalty) + "\n";
  return out;
}

void write_trace_csv(const std::filesystem::path& path, const SolutionReport& report) {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write " + path.string());
  out << trace_csv(report);
}

}  // namespace bilevel
