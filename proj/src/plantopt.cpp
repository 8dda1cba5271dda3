#include "bilevel/plantopt.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "bilevel/error.hpp"
#include "bilevel/reformulate.hpp"

namespace bilevel {

std::vector<std::string> PlantSpec::names() const {
  std::vector<std::string> out;
  for (const auto& v : variables) out.push_back(v.name);
  return out;
}

std::vector<std::string> PlantSpec::upper_names() const {
  std::vector<std::string> out;
  for (int i : upper_subset) out.push_back(variables.at(static_cast<std::size_t>(i)).name);
  return out;
}

void PlantSpec::validate() const {
  const auto d = static_cast<Eigen::Index>(variables.size());
  if (d == 0) throw SchemaError("plant spec has no variables");
  for (const auto& v : variables)
    if (!std::isfinite(v.lo) || !std::isfinite(v.hi) || v.lo >= v.hi)
      throw SchemaError("plant variable " + v.name + " has an invalid range");
  if (upper_subset.empty()) throw SchemaError("plant spec has an empty upper subset");
  for (int i : upper_subset)
    if (i < 0 || i >= d) throw SchemaError("plant upper subset index out of range");
  if (correlation.rows() != d || correlation.cols() != d) throw SchemaError("correlation has wrong shape");
  if (!correlation.isApprox(correlation.transpose())) throw SchemaError("correlation is not symmetric");
  for (Eigen::Index i = 0; i < d; ++i)
    if (correlation(i, i) != 1.0) throw SchemaError("correlation diagonal must be one");
  Eigen::LLT<Eigen::MatrixXd> llt(correlation);
  if (llt.info() != Eigen::Success) throw SchemaError("correlation is not positive definite");
}

namespace {

// Pairwise correlation within each group, `cross` elsewhere.
Eigen::MatrixXd block_correlation(int d, const std::vector<std::pair<std::vector<int>, double>>& groups, double cross) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Constant(d, d, cross);
  for (const auto& [members, rho] : groups)
    for (int a : members)
      for (int b : members) c(a, b) = rho;
  c.diagonal().setOnes();
  return c;
}

}  // namespace

PlantSpec coal_plant_spec() {
  PlantSpec s;
  s.name = "plant-coal-synth";
  s.variables = {
      {"CFR", "t/h", 180.0, 300.0},   {"AFR", "t/h", 1800.0, 2600.0}, {"MSP", "MPa", 14.0, 25.0},
      {"MST", "degC", 535.0, 571.0},  {"MSF", "t/h", 1200.0, 2000.0}, {"RHST", "degC", 530.0, 569.0},
      {"FWT", "degC", 250.0, 290.0},  {"CV", "kPa", 88.0, 96.0},
  };
  s.upper_subset = {0, 1, 2, 3, 4, 6};
  s.correlation = block_correlation(8, {{{0, 1, 2, 4}, 0.8}, {{3, 5, 6}, 0.5}}, 0.2);
  s.correlation(7, 0) = s.correlation(0, 7) = 0.1;
  return s;
}

PlantSpec gas_plant_spec() {
  PlantSpec s;
  s.name = "plant-gas-synth";
  s.variables = {
      {"CDP", "psi", 140.0, 200.0},   {"GFFR", "lb/s", 18.0, 30.0},   {"AT", "degF", 30.0, 100.0},
      {"AP", "hPa", 990.0, 1035.0},   {"AH", "%", 25.0, 100.0},       {"CDT", "degF", 650.0, 780.0},
      {"FGTI", "degC", 480.0, 560.0}, {"FGT", "degF", 250.0, 350.0},  {"PHGOT", "degF", 370.0, 420.0},
  };
  s.upper_subset = {0, 1, 2, 3, 4, 5};
  s.correlation = block_correlation(9, {{{0, 1, 5}, 0.75}, {{6, 7, 8}, 0.6}}, 0.1);
  s.correlation(2, 4) = s.correlation(4, 2) = -0.3;
  s.with_efficiency = true;
  return s;
}

PlantSpec plant_spec(const std::string& name) {
  if (name == "plant-coal-synth") return coal_plant_spec();
  if (name == "plant-gas-synth") return gas_plant_spec();
  throw UsageError("unknown plant: " + name);
}

namespace {

struct Responses {
  Eigen::VectorXd power_weights;
  double power_base, power_gain;
  Eigen::VectorXd thr_center, thr_curvature;
  double thr_base, thr_gain;
  Eigen::VectorXd te_weights;
};

Responses responses_for(const PlantSpec& spec) {
  Responses r;
  const auto d = static_cast<Eigen::Index>(spec.variables.size());
  r.power_weights = Eigen::VectorXd::Zero(d);
  if (d == 8) {
    r.power_weights << 0.40, 0.10, 0.15, 0.05, 0.25, 0.0, 0.05, 0.0;
    r.power_base = 300.0;
    r.power_gain = 360.0;
    r.thr_center.resize(8);
    r.thr_center << 0.55, 0.45, 0.60, 0.70, 0.50, 0.65, 0.40, 0.35;
    r.thr_curvature.resize(8);
    r.thr_curvature << 1.2, 0.6, 0.8, 1.0, 0.7, 0.9, 0.5, 1.1;
    r.thr_base = 7600.0;
    r.thr_gain = 2600.0;
  } else {
    r.power_weights << 0.35, 0.40, -0.15, 0.05, -0.05, 0.10, 0.0, 0.0, 0.0;
    r.power_base = 100.0;
    r.power_gain = 120.0;
    r.thr_center.resize(9);
    r.thr_center << 0.60, 0.50, 0.40, 0.50, 0.55, 0.65, 0.45, 0.40, 0.50;
    r.thr_curvature.resize(9);
    r.thr_curvature << 1.0, 1.1, 0.6, 0.4, 0.5, 0.9, 0.8, 1.0, 0.7;
    r.thr_base = 9500.0;
    r.thr_gain = 3000.0;
    r.te_weights.resize(9);
    r.te_weights << 0.25, 0.20, -0.10, 0.05, -0.05, 0.20, 0.15, 0.10, 0.20;
  }
  return r;
}

}  // namespace

DataMatrix synth_plant_data(const PlantSpec& spec, Eigen::Index n, std::uint64_t seed) {
  spec.validate();
  if (n <= 0) throw UsageError("sample count must be positive");
  const auto d = static_cast<Eigen::Index>(spec.variables.size());
  if (d != 8 && d != 9) throw SchemaError("synthetic responses are defined for the built-in plant specs only");
  const Responses r = responses_for(spec);
  const Eigen::MatrixXd L = Eigen::LLT<Eigen::MatrixXd>(spec.correlation).matrixL();

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const Eigen::Index extra = spec.with_efficiency ? 3 : 2;
  Eigen::MatrixXd out(n, d + extra);
  Eigen::VectorXd z(d), s(d);
  for (Eigen::Index row = 0; row < n; ++row) {
    // Latent N(0, C) mapped to mean mid-range, sd range/6; rows leaving the box are redrawn.
    for (;;) {
      for (Eigen::Index j = 0; j < d; ++j) z(j) = normal(rng);
      s = (0.5 + (L * z).array() / 6.0).matrix();
      if ((s.array() >= 0.0).all() && (s.array() <= 1.0).all()) break;
    }
    for (Eigen::Index j = 0; j < d; ++j) {
      const auto& v = spec.variables[static_cast<std::size_t>(j)];
      out(row, j) = v.lo + s(j) * (v.hi - v.lo);
    }
    const double zp = r.power_weights.dot(s);
    const double power = r.power_base + r.power_gain * zp - 0.1 * r.power_gain * zp * zp;
    out(row, d) = power * (1.0 + 0.003 * normal(rng));

    const double valley = (r.thr_curvature.array() * (s - r.thr_center).array().square()).sum();
    const double ripple = 120.0 * std::sin(2.0 * std::numbers::pi * (1.3 * s(0) + 0.7 * s(3))) +
                          90.0 * std::cos(2.0 * std::numbers::pi * (s(2) - 0.8 * s(d - 1)));
    out(row, d + 1) = (r.thr_base + r.thr_gain * valley + ripple) * (1.0 + 0.01 * normal(rng));

    if (spec.with_efficiency) {
      const double t = 6.0 * (r.te_weights.dot(s) - 0.45);
      out(row, d + 2) = (34.0 + 12.0 / (1.0 + std::exp(-t))) * (1.0 + 0.002 * normal(rng));
    }
  }
  auto cols = spec.names();
  cols.push_back("Power");
  cols.push_back("THR");
  if (spec.with_efficiency) cols.push_back("TE");
  return DataMatrix(std::move(cols), std::move(out));
}

namespace {

// Per spec variable: THR scaling range (joint vector space -> physical).
std::vector<ColumnRange> plant_ranges(const TrainedModel& thr, const std::vector<std::string>& names) {
  if (thr.input_names.size() != names.size())
    throw SchemaError("THR model inputs do not match the plant variables");
  std::vector<ColumnRange> out;
  for (const auto& n : names) {
    const auto& r = thr.input_scaling.range(n);
    if (r.constant()) throw SchemaError("plant variable " + n + " is constant in the THR training data");
    out.push_back(r);
  }
  return out;
}

Expression plant_model_expression(std::shared_ptr<const TrainedModel> model, const std::vector<std::string>& names,
                                  const std::vector<ColumnRange>& ranges) {
  const auto k = static_cast<Eigen::Index>(model->input_names.size());
  std::vector<int> vars;
  Eigen::MatrixXd map = Eigen::MatrixXd::Zero(k, k);
  Eigen::VectorXd offset(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    const auto& in = model->input_names[static_cast<std::size_t>(j)];
    const auto it = std::find(names.begin(), names.end(), in);
    if (it == names.end()) throw SchemaError("model input " + in + " is not a plant variable");
    const auto i = static_cast<std::size_t>(it - names.begin());
    vars.push_back(static_cast<int>(i));
    map(j, j) = ranges[i].max - ranges[i].min;
    offset(j) = ranges[i].min;
  }
  return model_expression(model, vars, map, offset, /*scaled_output=*/true);
}

Eigen::VectorXd model_inputs(const TrainedModel& model, const std::vector<std::string>& names,
                             const Eigen::VectorXd& phys) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(model.input_names.size()));
  for (std::size_t j = 0; j < model.input_names.size(); ++j) {
    const auto it = std::find(names.begin(), names.end(), model.input_names[j]);
    if (it == names.end()) throw SchemaError("model input " + model.input_names[j] + " is not available");
    x(static_cast<Eigen::Index>(j)) = phys(it - names.begin());
  }
  return x;
}

}  // namespace

BilevelProblem build_plant_bilevel(std::shared_ptr<const TrainedModel> power, std::shared_ptr<const TrainedModel> thr,
                                   const MahalanobisEnvelope& env, const PlantSpec& spec) {
  spec.validate();
  if (!power || !thr) throw UsageError("plant bilevel needs both models");
  const auto names = spec.names();
  const auto ranges = plant_ranges(*thr, names);
  if (env.dim() != spec.lower_dim()) throw SchemaError("envelope dimension does not match the plant variables");
  env.validate();
  const auto upper = spec.upper_names();
  for (const auto& in : power->input_names)
    if (std::find(upper.begin(), upper.end(), in) == upper.end())
      throw SchemaError("Power model input " + in + " is outside the upper subset");

  BilevelProblem p;
  p.name = spec.name;
  for (const auto& n : names) p.variables.push_back({n, Role::Lower, 0.0, 1.0});
  p.upper_objective = plant_model_expression(power, names, ranges);
  p.sense = Sense::Maximize;
  p.lower_objective = plant_model_expression(thr, names, ranges);
  std::vector<int> all(names.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  p.envelope = EnvelopeConstraint{env, all};
  p.shared_map = spec.upper_subset;
  p.validate();
  return p;
}

MahalanobisEnvelope plant_envelope(const TrainedModel& thr, const DataMatrix& data, const PlantSpec& spec,
                                   double percentile) {
  const auto names = spec.names();
  const auto ranges = plant_ranges(thr, names);
  Eigen::MatrixXd scaled(data.rows(), static_cast<Eigen::Index>(names.size()));
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto col = data.column(names[i]);
    scaled.col(static_cast<Eigen::Index>(i)) = ((col.array() - ranges[i].min) / (ranges[i].max - ranges[i].min)).matrix();
  }
  return mahalanobis_fit(scaled, percentile);
}

double PlantKktCheck::max_violation() const {
  return std::max({box_violation, multiplier_violation, envelope_violation, envelope_complementarity, fb_residual,
                   stationarity});
}

PlantKktCheck check_plant_point(const TrainedModel& thr, const MahalanobisEnvelope& env, const SingleLevelNLP& nlp,
                                const Eigen::VectorXd& point, const KKTOptions& opts) {
  if (point.size() != nlp.size()) throw SchemaError("point has wrong dimension");
  const auto d = static_cast<Eigen::Index>(thr.input_names.size());
  if (env.dim() != d) throw SchemaError("envelope dimension does not match the THR model");
  Eigen::VectorXd u(d), mu_lo(d), mu_hi(d);
  std::vector<int> pos(static_cast<std::size_t>(d));
  for (Eigen::Index j = 0; j < d; ++j) {
    const auto& n = thr.input_names[static_cast<std::size_t>(j)];
    pos[static_cast<std::size_t>(j)] = nlp.index_of(n);
    u(j) = point(nlp.index_of(n));
    mu_lo(j) = point(nlp.index_of("muL_" + n));
    mu_hi(j) = point(nlp.index_of("muU_" + n));
  }
  const double lam = point(nlp.index_of("lam_m"));

  // Envelope is stored in joint-vector order; permute to model order.
  Eigen::VectorXd y(d);
  for (Eigen::Index j = 0; j < d; ++j) y(pos[static_cast<std::size_t>(j)]) = u(j);
  const double D = env.distance_sq(y) - env.tau * env.tau;
  const Eigen::VectorXd dD = env.gradient(y);

  PlantKktCheck c;
  c.envelope_violation = std::max(0.0, D);
  c.envelope_complementarity = std::abs(lam * D);
  c.multiplier_violation = std::max({0.0, -lam, -mu_lo.minCoeff(), -mu_hi.minCoeff()});
  c.box_violation = std::max({0.0, -u.minCoeff(), u.maxCoeff() - 1.0});
  const Eigen::VectorXd g = input_gradient(thr.net, u);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double stat = g(j) - mu_lo(j) + mu_hi(j) + lam * dD(pos[static_cast<std::size_t>(j)]);
    c.stationarity = std::max(c.stationarity, std::abs(stat));
    c.fb_residual = std::max({c.fb_residual, std::abs(fb_perturbed(u(j), mu_lo(j), opts.epsilon_lower)),
                              std::abs(fb_perturbed(1.0 - u(j), mu_hi(j), opts.epsilon_upper))});
  }
  return c;
}

std::vector<TauSweepRow> tau_sweep(std::shared_ptr<const TrainedModel> power, std::shared_ptr<const TrainedModel> thr,
                                   const DataMatrix& data, const PlantSpec& spec,
                                   const std::vector<double>& percentiles, const SolverConfig& cfg) {
  cfg.validate();
  if (!power || !thr) throw UsageError("tau sweep needs both models");
  const auto names = spec.names();
  const auto ranges = plant_ranges(*thr, names);
  const MahalanobisEnvelope base = plant_envelope(*thr, data, spec, 95.0);
  const auto d = static_cast<Eigen::Index>(names.size());

  std::vector<TauSweepRow> rows;
  for (double pct : percentiles) {
    const MahalanobisEnvelope env = base.at_percentile(pct);
    const BilevelProblem problem = build_plant_bilevel(power, thr, env, spec);
    KKTOptions opts;
    opts.use_fb = true;
    const SingleLevelNLP nlp = kkt_reformulate(problem, opts);
    const MultistartResult ms = multistart_solve(nlp, cfg);

    TauSweepRow row;
    row.percentile = pct;
    row.tau = env.tau;
    row.report = ms.best;
    row.status = ms.best.status;
    for (const auto& r : ms.all) row.cpu_seconds += r.cpu_seconds;
    row.primal_infeasibility = ms.best.primal_infeasibility;
    row.stationarity_residual = ms.best.stationarity_residual;
    row.check = check_plant_point(*thr, env, nlp, ms.best.point, opts);
    row.scaled_point = ms.best.point;
    row.physical_point.resize(d);
    for (Eigen::Index i = 0; i < d; ++i) {
      const auto& r = ranges[static_cast<std::size_t>(i)];
      row.physical_point(i) = r.min + (r.max - r.min) * ms.best.point(i);
    }
    row.thr = thr->predict(model_inputs(*thr, names, row.physical_point));
    row.power = power->predict(model_inputs(*power, names, row.physical_point));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string tau_sweep_csv(const std::vector<TauSweepRow>& rows) {
  std::ostringstream out;
  out << "percentile,tau,THR,Power,status,cpu_seconds,primal_infeasibility,stationarity_residual\n";
  for (const auto& r : rows)
    out << format_number(r.percentile) << ',' << format_number(r.tau) << ',' << format_number(r.thr) << ','
        << format_number(r.power) << ',' << to_string(r.status) << ',' << format_number(r.cpu_seconds) << ','
        << format_number(r.primal_infeasibility) << ',' << format_number(r.stationarity_residual) << '\n';
  return out.str();
}

nlohmann::json to_json(const TauSweepRow& row, const std::vector<std::string>& names) {
  nlohmann::json point = nlohmann::json::object();
  for (std::size_t i = 0; i < names.size() && static_cast<Eigen::Index>(i) < row.physical_point.size(); ++i)
    point[names[i]] = row.physical_point(static_cast<Eigen::Index>(i));
  return {{"percentile", row.percentile},
          {"tau", row.tau},
          {"THR", row.thr},
          {"Power", row.power},
          {"status", to_string(row.status)},
          {"cpu_seconds", row.cpu_seconds},
          {"primal_infeasibility", row.primal_infeasibility},
          {"stationarity_residual", row.stationarity_residual},
          {"check_max_violation", row.check.max_violation()},
          {"operating_point", point}};
}

}  // namespace bilevel
