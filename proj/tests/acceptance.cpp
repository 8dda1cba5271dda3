// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bilevel/envelope.hpp"
#include "bilevel/nlpsolver.hpp"
#include "bilevel/plantopt.hpp"
#include "bilevel/problem.hpp"
#include "bilevel/reformulate.hpp"
#include "bilevel/robust.hpp"
#include "bilevel/surrogate.hpp"
#include "helpers.hpp"

using namespace bilevel;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  std::vector<double> numbers;  // compared bit for bit on the rerun

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
  void record(double v) { numbers.push_back(v); }
};

double wall_seconds(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const char* const kBenchmarks[] = {"cc", "cnc", "ncnc"};

SolverConfig benchmark_solver() {
  SolverConfig c;
  c.starts = 20;
  c.seed = 0;
  return c;
}

MultistartResult solve_analytic(const std::string& name) {
  return multistart_solve(kkt_reformulate(build_benchmark(name)), benchmark_solver());
}

// 1. Analytic KKT reformulations reach the known optima.
void analytic_kkt(Outcome& o) {
  const double expected[] = {5.0, 0.0, 0.1756};
  for (int k = 0; k < 3; ++k) {
    const auto res = solve_analytic(kBenchmarks[k]);
    double cpu = 0.0;
    for (const auto& r : res.all) cpu += r.cpu_seconds;
    o.detail << " " << kBenchmarks[k] << " F=" << res.best.objective << " (" << cpu << " s)";
    o.require(res.best.status == SolveStatus::Optimal, std::string(kBenchmarks[k]) + " status");
    o.require(std::abs(res.best.objective - expected[k]) <= 1e-3, std::string(kBenchmarks[k]) + " objective");
    o.require(cpu < 2.0, std::string(kBenchmarks[k]) + " runtime");
    o.record(res.best.objective);
    for (Eigen::Index i = 0; i < res.best.point.size(); ++i) o.record(res.best.point(i));
  }
}

// 2. Surrogate objectives trained by random search, then KKT-reformulated.
void surrogate_kkt(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  HyperSearchSpace space;
  space.trials = 50;
  space.screen_epochs = 300;
  space.finalists = 5;
  const double lo[] = {4.9, -1e300, 0.1656}, hi[] = {5.1, 0.02, 0.1856};
  for (int k = 0; k < 3; ++k) {
    const std::string name = kBenchmarks[k];
    const auto data = benchmark_data(name, 10000, 1);
    std::shared_ptr<const TrainedModel> models[2];
    const char* targets[] = {"F", "f"};
    for (int m = 0; m < 2; ++m) {
      const auto s = split(data.select({"x", "y", targets[m]}).with_target(targets[m]), SplitSpec{0.7, 0.15, 0.15, 2});
      models[m] = std::make_shared<TrainedModel>(hyper_search(space, s, 11 + static_cast<std::uint64_t>(m)).best_model);
      const double r2 = models[m]->metrics.test.r_squared;
      o.detail << " " << name << "/" << targets[m] << " R2=" << r2;
      o.require(r2 >= 0.99, name + "/" + targets[m] + " R2");
      o.record(r2);
    }
    const auto res = multistart_solve(kkt_reformulate(build_benchmark_surrogate(name, models[0], models[1])),
                                      benchmark_solver());
    o.detail << " " << name << " F=" << res.best.objective;
    o.require(res.best.status == SolveStatus::Optimal, name + " status");
    o.require(res.best.objective >= lo[k] && res.best.objective <= hi[k], name + " objective band");
    o.record(res.best.objective);
    for (Eigen::Index i = 0; i < res.best.point.size(); ++i) o.record(res.best.point(i));
  }
  const double wall = wall_seconds(t0);
  o.detail << " total " << wall << " s";
  o.require(wall < 600.0, "pipeline time");
}

// 3. Grid oracle agrees with the KKT solutions.
void oracle_equivalence(Outcome& o) {
  for (const char* name : kBenchmarks) {
    const auto oracle = brute_force_bilevel_oracle(build_benchmark(name), 2001);
    const auto kkt = solve_analytic(name);
    const double gap = std::abs(oracle.F_star - kkt.best.objective);
    o.detail << " " << name << " oracle=" << oracle.F_star << " gap=" << gap;
    o.require(gap <= 0.01, std::string(name) + " gap");
    o.record(oracle.F_star);
  }
}

// 4. Fischer-Burmeister properties.
void fb_properties(Outcome& o) {
  int mismatches = 0;
  for (int i = 0; i <= 200; ++i)
    for (int j = 0; j <= 200; ++j) {
      const double a = -2.0 + 4.0 * i / 200.0, b = -2.0 + 4.0 * j / 200.0;
      const bool comp = a >= 0.0 && b >= 0.0 && a * b <= 1e-12;
      mismatches += (std::abs(fb(a, b)) <= 1e-12) != comp ? 1 : 0;
    }
  o.detail << " grid mismatches=" << mismatches;
  o.require(mismatches == 0, "root characterization");

  double worst = 0.0;
  for (double eps : {1e-9, 1e-6, 1e-3})
    for (double a : {1e-3, 0.01, 0.1, 0.5, 1.0, 2.0}) {
      double lo = 0.0, hi = 10.0;  // strictly decreasing in b
      for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (fb_perturbed(a, mid, eps) > 0.0 ? lo : hi) = mid;
      }
      worst = std::max(worst, std::abs(a * 0.5 * (lo + hi) - eps / 2.0));
    }
  o.detail << " max|ab-eps/2|=" << worst;
  o.require(worst <= 1e-10, "root product");
  const Eigen::Vector2d g = fb_perturbed_gradient(0.0, 0.0, 1e-6);
  o.require(g.allFinite() && g(0) == -1.0 && g(1) == -1.0, "gradient at origin");
  o.record(worst);
}

// 5. Closed-form network derivatives against central differences.
void derivatives(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> dim(1, 6), width(2, 16);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  double worst_g = 0.0, worst_h = 0.0;
  const auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); };
  for (int t = 0; t < 100; ++t) {
    const int d = dim(rng);
    const auto net = testutil::random_net(rng, d, width(rng));
    const Eigen::VectorXd x = Eigen::VectorXd::NullaryExpr(d, [&] { return u(rng); });
    const Eigen::VectorXd g = input_gradient(net, x);
    const Eigen::MatrixXd H = input_hessian(net, x);
    for (int k = 0; k < d; ++k) {
      const double h1 = 1e-6, h2 = 1e-5;
      Eigen::VectorXd p = x, m = x;
      p(k) += h1;
      m(k) -= h1;
      worst_g = std::max(worst_g, rel(g(k), (forward(net, p) - forward(net, m)) / (2 * h1)));
      p = x;
      m = x;
      p(k) += h2;
      m(k) -= h2;
      const Eigen::VectorXd col = (input_gradient(net, p) - input_gradient(net, m)) / (2 * h2);
      for (int i = 0; i < d; ++i) worst_h = std::max(worst_h, rel(H(i, k), col(i)));
    }
  }
  const double wall = wall_seconds(t0);
  o.detail << " grad " << worst_g << " hess " << worst_h << " (" << wall << " s)";
  o.require(worst_g < 1e-6, "gradient");
  o.require(worst_h < 1e-5, "hessian");
  o.require(wall < 30.0, "runtime");
  o.record(worst_g);
  o.record(worst_h);
}

// 6. Envelope radius on standard normal data.
void mahalanobis(Outcome& o) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n;
  const Eigen::MatrixXd X = Eigen::MatrixXd::NullaryExpr(10000, 2, [&] { return n(rng); });
  const auto env = mahalanobis_fit(X, 95.0);
  int inside = 0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) inside += env.distance(X.row(i).transpose()) <= env.tau ? 1 : 0;
  const double frac = inside / 10000.0;
  o.detail << " tau=" << env.tau << " fraction=" << frac;
  o.require(env.tau >= 2.35 && env.tau <= 2.55, "tau");
  o.require(std::abs(frac - 0.95) <= 0.01, "fraction");
  o.record(env.tau);
  o.record(frac);
}

// 7. Envelope-percentile sweep on synthetic coal-shaped data.
void plant_sweep(Outcome& o) {
  const auto spec = coal_plant_spec();
  const auto data = synth_plant_data(spec, 2000, 1);
  TrainConfig c;
  c.learning_rate = 0.02;
  c.max_epochs = 4000;
  c.seed = 3;
  std::shared_ptr<const TrainedModel> power, thr;
  std::optional<DataSplits> thr_split;
  for (const std::string target : {"Power", "THR"}) {
    auto cols = target == "Power" ? spec.upper_names() : spec.names();
    cols.push_back(target);
    const auto s = split(data.select(cols).with_target(target), SplitSpec{0.7, 0.15, 0.15, 2});
    auto m = std::make_shared<TrainedModel>(train(s, c, 12));
    o.detail << " " << target << " R2=" << m->metrics.test.r_squared;
    (target == "Power" ? power : thr) = m;
    if (target == "THR") thr_split = s;
  }
  SolverConfig cfg;
  cfg.starts = 8;
  std::vector<double> pct;
  for (int p = 81; p <= 95; ++p) pct.push_back(p);
  const auto rows = tau_sweep(power, thr, thr_split->train, spec, pct, cfg);
  int optimal = 0;
  double worst_check = 0.0, worst_stat = 0.0, worst_cpu = 0.0;
  for (const auto& r : rows) {
    o.record(r.tau);
    if (r.status != SolveStatus::Optimal) continue;
    ++optimal;
    worst_check = std::max(worst_check, r.check.max_violation());
    worst_stat = std::max({worst_stat, r.stationarity_residual, r.check.stationarity});
    worst_cpu = std::max(worst_cpu, r.cpu_seconds);
    o.record(r.thr);
    o.record(r.power);
  }
  o.detail << " optimal rows=" << optimal << "/" << rows.size() << " max recheck=" << worst_check
           << " max stationarity=" << worst_stat << " max cpu=" << worst_cpu << " s";
  o.require(optimal >= 10, "optimal rows");
  o.require(worst_check <= 1e-6, "feasibility recheck");
  o.require(worst_stat <= 1e-5, "stationarity");
  o.require(worst_cpu < 5.0, "solve time");
}

// 8. Stability-radius study.
void robust_suite(Outcome& o) {
  {
    // Exactly linear network: silu(z) - silu(-z) = z.
    const Eigen::Vector3d cvec(0.8, -0.5, 0.3);
    ShallowNet net;
    net.W1.resize(2, 3);
    net.W1.row(0) = cvec.transpose();
    net.W1.row(1) = -cvec.transpose();
    net.b1 = Eigen::Vector2d::Zero();
    net.w2 = Eigen::Vector2d(1.0, -1.0);
    net.b2 = 0.2;
    Eigen::Matrix3d L;
    L << 0.10, 0.0, 0.0, 0.05, 0.06, 0.0, -0.02, 0.01, 0.04;
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n;
    Eigen::MatrixXd X(3000, 3);
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      X.row(i) = (Eigen::Vector3d::Constant(0.5) + L * Eigen::Vector3d(n(rng), n(rng), n(rng))).transpose();
    RobustProblem rp;
    rp.te_model = testutil::make_model(net, {"u0", "u1", "u2"}, {{0, 1}, {0, 1}, {0, 1}}, {0.0, 1.0}, "TE");
    rp.envelope = mahalanobis_fit(X, 95.0);
    const Eigen::Matrix3d S = rp.envelope.covariance;
    const double q = std::sqrt(cvec.dot(S * cvec));
    rp.te_target = cvec.dot(rp.envelope.mean) + 0.2 - 0.5 * q;
    const Eigen::Vector3d x = rp.envelope.mean + rp.envelope.tau * S * cvec / q;
    const double rho = (cvec.dot(x) + 0.2 - rp.te_target) / q;
    const Eigen::Vector3d delta = -rho * S * cvec / q;
    SolverConfig cfg;
    cfg.starts = 4;
    const auto sol = solve_robust(rp, cfg);
    const double err = std::max({std::abs(sol.rho - rho), (sol.x - x).cwiseAbs().maxCoeff(),
                                 (sol.delta - delta).cwiseAbs().maxCoeff()});
    o.detail << " linear closed-form error=" << err;
    o.require(sol.status == SolveStatus::Optimal && err <= 1e-4, "linear closed form");
    o.record(sol.rho);
  }

  const auto t0 = std::chrono::steady_clock::now();
  const auto spec = gas_plant_spec();
  const auto data = synth_plant_data(spec, 2000, 4);
  auto cols = spec.names();
  cols.push_back("TE");
  const auto s = split(data.select(cols).with_target("TE"), SplitSpec{0.7, 0.15, 0.15, 2});
  TrainConfig c;
  c.learning_rate = 0.02;
  c.max_epochs = 4000;
  c.seed = 3;
  const auto model = std::make_shared<TrainedModel>(train(s, c, 8));
  const auto scaled = minmax_apply(model->input_scaling, s.train.select(spec.names()));
  const auto env = mahalanobis_fit(scaled.values(), 95.0);
  SolverConfig cfg;
  cfg.starts = 8;
  int solved = 0;
  bool monotone = true, perturbations_ok = true;
  double prev = 1e300;
  o.detail << " TE R2=" << model->metrics.test.r_squared << " rho:";
  for (double target : {38.0, 39.0, 40.0, 41.0, 42.0, 43.0, 44.0}) {
    const RobustProblem rp{model, env, target};
    const auto sol = solve_robust(rp, cfg);
    if (sol.status != SolveStatus::Optimal) {
      o.detail << " " << target << "=" << to_string(sol.status);
      continue;
    }
    ++solved;
    o.detail << " " << target << "=" << sol.rho;
    monotone = monotone && sol.rho <= prev;
    prev = sol.rho;
    o.record(sol.rho);
    if (sol.adversary_confirms) {
      const auto st = perturbation_study(rp, sol.x, sol.rho, 10000, 90.0, 7);
      perturbations_ok = perturbations_ok && st.te_min >= target - 0.5;
      o.record(st.te_min);
    }
  }
  const double wall = wall_seconds(t0);
  o.detail << " (" << wall << " s)";
  o.require(solved >= 4, "at least four solved targets");
  o.require(monotone, "radius monotone");
  o.require(perturbations_ok, "perturbation minimum");
  o.require(wall < 120.0, "runtime");
}

// 9. Constraint qualification at the benchmark solutions.
void licq(Outcome& o) {
  for (const char* name : kBenchmarks) {
    const auto nlp = kkt_reformulate(build_benchmark(name));
    const auto res = multistart_solve(nlp, benchmark_solver());
    const auto l = licq_check(nlp, res.best.point);
    int lower_ineq = 0;
    for (const auto& a : l.active)
      if (a.rfind("g", 0) == 0) ++lower_ineq;
    o.detail << " " << name << " holds=" << (l.holds ? "yes" : "no") << " active=" << l.active_count;
    o.require(l.holds, std::string(name) + " LICQ");
    if (std::string(name) == "cc") o.require(lower_ineq == 1 && l.active_count == 1, "cc active set");
  }
}

using Criterion = std::function<void(Outcome&)>;

struct Entry {
  int id;
  const char* title;
  Criterion run;
};

const std::vector<Entry>& criteria() {
  static const std::vector<Entry> list{
      {1, "analytic KKT benchmarks", analytic_kkt},
      {2, "surrogate KKT benchmarks", surrogate_kkt},
      {3, "grid oracle equivalence", oracle_equivalence},
      {4, "Fischer-Burmeister properties", fb_properties},
      {5, "network derivatives", derivatives},
      {6, "Mahalanobis percentile", mahalanobis},
      {7, "plant envelope sweep", plant_sweep},
      {8, "robust stability radius", robust_suite},
      {9, "LICQ at benchmark solutions", licq},
  };
  return list;
}

}  // namespace

int main(int argc, char** argv) {
  // Optional list of criterion numbers restricts the run (determinism needs 1-8).
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  const auto selected = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  bool all_pass = true;
  std::vector<std::vector<double>> first(11);
  for (const auto& c : criteria()) {
    if (!selected(c.id)) continue;
    Outcome o;
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    first[static_cast<std::size_t>(c.id)] = o.numbers;
    all_pass = all_pass && o.pass;
    std::printf("%s %d %s:%s\n", o.pass ? "PASS" : "FAIL", c.id, c.title, o.detail.str().c_str());
    std::fflush(stdout);
  }

  if (selected(10)) {
    Outcome o;
    for (const auto& c : criteria()) {
      if (c.id > 8 || !selected(c.id)) continue;
      Outcome again;
      try {
        c.run(again);
      } catch (const std::exception& e) {
        again.numbers.clear();
      }
      const bool same = again.numbers == first[static_cast<std::size_t>(c.id)] && !again.numbers.empty();
      o.detail << " " << c.id << (same ? "=" : "!=");
      o.require(same, "criterion " + std::to_string(c.id) + " rerun differs");
    }
    all_pass = all_pass && o.pass;
    std::printf("%s 10 determinism:%s\n", o.pass ? "PASS" : "FAIL", o.detail.str().c_str());
  }
  return all_pass ? 0 : 1;
}
