// Command-line front end: data generation, training, KKT solves, tau sweeps
// and robust studies. Every command writes a manifest next to its outputs.

#include <openssl/evp.h>

#include <Eigen/Core>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bilevel/dataset.hpp"
#include "bilevel/error.hpp"
#include "bilevel/nlpsolver.hpp"
#include "bilevel/plantopt.hpp"
#include "bilevel/problem.hpp"
#include "bilevel/reformulate.hpp"
#include "bilevel/robust.hpp"
#include "bilevel/surrogate.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bilevel;

namespace {

constexpr const char* kVersion = "1.0.0";

enum Exit { kOk = 0, kUsage = 1, kNumerical = 2, kInfeasibleOnly = 3 };

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return hex.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<double> parse_doubles(const std::string& text) {
  std::vector<double> out;
  for (const auto& s : split_list(text)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(s, &used));
      if (used != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw UsageError("not a number: " + s);
    }
  }
  return out;
}

std::uint64_t env_seed() {
  const char* s = std::getenv("BILEVEL_SEED");
  if (!s || !*s) return 0;
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw UsageError(std::string("BILEVEL_SEED is not an unsigned integer: ") + s);
  }
}

/// Run-wide record of inputs, outputs and resolved settings.
struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_path;
  std::uint64_t seed = 0;
  json config = json::object();
  json inputs = json::array();
  std::vector<std::string> outputs;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  void input(const fs::path& p) { inputs.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}}); }
  void output(const fs::path& p) { outputs.push_back(p.string()); }

  void write(const fs::path& path) {
    output(path);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    json j{{"command", command},
           {"argv", argv},
           {"config_file", config_path},
           {"seed", seed},
           {"config", config},
           {"inputs", inputs},
           {"outputs", outputs},
           {"wall_seconds", wall},
           {"versions",
            {{"artifact", kVersion},
             {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                           std::to_string(EIGEN_MINOR_VERSION)},
             {"cli11", CLI11_VERSION},
             {"compiler", __VERSION__}}}};
    write_json(path, j);
  }
};

/// Flags win over the config file, which wins over defaults. Keys may sit at
/// the top level or in a section named after the subcommand.
class Settings {
 public:
  void load(const std::string& path, const std::string& section) {
    if (path.empty()) return;
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config " + path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw SchemaError("config " + path + ": " + e.what());
    }
    if (!j.is_object()) throw SchemaError("config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!it.value().is_object()) merged_[it.key()] = it.value();
    if (j.contains(section) && j[section].is_object())
      for (auto it = j[section].begin(); it != j[section].end(); ++it) merged_[it.key()] = it.value();
  }

  template <class T>
  void resolve(const CLI::App& app, const std::string& key, T& value) {
    const auto* opt = app.get_option_no_throw("--" + key);
    if ((!opt || opt->count() == 0) && merged_.contains(key)) {
      try {
        value = merged_.at(key).get<T>();
      } catch (const json::exception& e) {
        throw SchemaError("config key " + key + ": " + e.what());
      }
    }
    resolved_[key] = value;
  }

  const json& resolved() const { return resolved_; }

 private:
  json merged_ = json::object();
  json resolved_ = json::object();
};

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  int threads = 1;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON config file (flags take precedence)");
  app->add_option("--seed", c.seed, "Random seed (default: BILEVEL_SEED or 0)");
  app->add_option("--threads", c.threads, "Worker thread cap")->check(CLI::PositiveNumber);
}

void resolve_common(const CLI::App& app, Settings& s, Common& c, Manifest& m) {
  s.load(c.config, app.get_name());
  if (app.get_option("--seed")->count() == 0) c.seed = env_seed();
  s.resolve(app, "seed", c.seed);
  s.resolve(app, "threads", c.threads);
  if (c.threads < 1) throw UsageError("threads must be positive");
  m.command = app.get_name();
  m.config_path = c.config;
  m.seed = c.seed;
}

bool is_benchmark(const std::string& name) { return name == "cc" || name == "cnc" || name == "ncnc"; }

// ---------------------------------------------------------------- gen-data

struct GenArgs {
  Common common;
  std::string target;
  long n = 10000;
  std::string out;
};

int cmd_gen_data(const CLI::App& app, GenArgs& a, Manifest& m) {
  Settings s;
  resolve_common(app, s, a.common, m);
  s.resolve(app, "n", a.n);
  m.config = s.resolved();
  if (a.n <= 0) throw UsageError("--n must be positive");

  DataMatrix data = [&] {
    if (is_benchmark(a.target)) return benchmark_data(a.target, a.n, a.common.seed);
    const PlantSpec spec = plant_spec(a.target);
    if (a.n < 10L * spec.lower_dim())
      throw UsageError("--n must be at least " + std::to_string(10 * spec.lower_dim()) + " for " + a.target);
    return synth_plant_data(spec, a.n, a.common.seed);
  }();
  write_csv(a.out, data);
  m.output(a.out);
  m.write(fs::path(a.out).replace_extension(".manifest.json"));
  std::cout << "wrote " << data.rows() << " rows x " << data.cols() << " columns to " << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  Common common;
  std::string data;
  std::string target;
  std::string inputs;
  std::string spec;
  int trials = 50;
  int screen_epochs = 0;
  int finalists = 5;
  int max_epochs = 5000;
  int patience = 200;
  int hidden_min = 2;
  int hidden_max = 16;
  std::string split = "0.7,0.15,0.15";
  std::string out;
};

const std::vector<std::string> kResponseColumns = {"F", "f", "Power", "THR", "TE"};

std::vector<std::string> default_inputs(const DataMatrix& data, const TrainArgs& a) {
  if (!a.inputs.empty()) return split_list(a.inputs);
  if (!a.spec.empty()) {
    const PlantSpec spec = plant_spec(a.spec);
    return a.target == "Power" ? spec.upper_names() : spec.names();
  }
  std::vector<std::string> out;
  for (const auto& c : data.columns())
    if (c != a.target && std::find(kResponseColumns.begin(), kResponseColumns.end(), c) == kResponseColumns.end())
      out.push_back(c);
  return out;
}

std::string metrics_csv(const TrainedModel& model) {
  std::ostringstream out;
  out << "target,hidden,learning_rate,lambda1,lambda2,best_epoch,train_r2,validation_r2,test_r2,train_rmse,"
         "validation_rmse,test_rmse\n";
  const auto& mt = model.metrics;
  out << model.target_name << ',' << model.net.hidden() << ',' << format_number(model.config.learning_rate) << ','
      << format_number(model.config.lambda1) << ',' << format_number(model.config.lambda2) << ',' << model.best_epoch
      << ',' << format_number(mt.train.r_squared) << ',' << format_number(mt.validation.r_squared) << ','
      << format_number(mt.test.r_squared) << ',' << format_number(mt.train.rmse) << ','
      << format_number(mt.validation.rmse) << ',' << format_number(mt.test.rmse) << '\n';
  return out.str();
}

std::string trials_csv(const HyperSearchResult& r) {
  std::ostringstream out;
  out << "trial,hidden,learning_rate,lambda1,lambda2,finalist,screening_rmse,validation_rmse,epochs,diverged\n";
  for (const auto& t : r.trials)
    out << t.trial << ',' << t.hidden << ',' << format_number(t.config.learning_rate) << ','
        << format_number(t.config.lambda1) << ',' << format_number(t.config.lambda2) << ',' << t.finalist << ','
        << format_number(t.screening_rmse) << ',' << format_number(t.validation_rmse) << ',' << t.epochs << ','
        << t.diverged << '\n';
  return out.str();
}

int cmd_train(const CLI::App& app, TrainArgs& a, Manifest& m) {
  Settings s;
  resolve_common(app, s, a.common, m);
  const std::pair<const char*, int*> ints[] = {{"trials", &a.trials},         {"screen-epochs", &a.screen_epochs},
                                               {"finalists", &a.finalists},   {"max-epochs", &a.max_epochs},
                                               {"patience", &a.patience},     {"hidden-min", &a.hidden_min},
                                               {"hidden-max", &a.hidden_max}};
  for (const auto& [key, field] : ints) s.resolve(app, key, *field);
  s.resolve(app, "split", a.split);
  s.resolve(app, "inputs", a.inputs);
  s.resolve(app, "spec", a.spec);

  m.input(a.data);
  const DataMatrix data = read_csv(a.data);
  if (!data.has_column(a.target)) throw SchemaError("target column '" + a.target + "' is not in " + a.data);
  auto cols = default_inputs(data, a);
  if (cols.empty()) throw UsageError("no input columns selected");
  cols.push_back(a.target);
  const DataMatrix selected = data.select(cols).with_target(a.target);

  const auto fr = parse_doubles(a.split);
  if (fr.size() != 3) throw UsageError("--split needs three fractions");
  const SplitSpec split_spec{fr[0], fr[1], fr[2], a.common.seed};
  const DataSplits splits = split(selected, split_spec);

  HyperSearchSpace space;
  space.trials = a.trials;
  space.screen_epochs = a.screen_epochs;
  space.finalists = a.finalists;
  space.max_epochs = a.max_epochs;
  space.patience = a.patience;
  space.hidden_min = a.hidden_min;
  space.hidden_max = a.hidden_max;
  space.validate();
  json resolved = s.resolved();
  resolved["input_columns"] = std::vector<std::string>(cols.begin(), cols.end() - 1);
  m.config = resolved;

  const HyperSearchResult result = hyper_search(space, splits, a.common.seed, a.common.threads);
  const fs::path out(a.out);
  save_model(out, result.best_model);
  m.output(out);
  const fs::path stem = fs::path(out).replace_extension("");
  write_text(stem.string() + ".metrics.csv", metrics_csv(result.best_model));
  m.output(stem.string() + ".metrics.csv");
  write_text(stem.string() + ".trials.csv", trials_csv(result));
  m.output(stem.string() + ".trials.csv");
  m.write(stem.string() + ".manifest.json");

  const auto& mt = result.best_model.metrics;
  std::cout << "target " << a.target << ": hidden " << result.best_model.net.hidden() << ", test R2 "
            << mt.test.r_squared << ", test RMSE " << mt.test.rmse << "\n";
  return kOk;
}

// ---------------------------------------------------------------- solve

struct SolveArgs {
  Common common;
  std::string problem;
  std::string mode = "bilevel-kkt";
  std::string upper_model;
  std::string lower_model;
  bool fb = false;
  int starts = 20;
  double time_limit = 60.0;
  std::string out;
};

int cmd_solve(const CLI::App& app, SolveArgs& a, Manifest& m) {
  Settings s;
  resolve_common(app, s, a.common, m);
  s.resolve(app, "mode", a.mode);
  s.resolve(app, "upper-model", a.upper_model);
  s.resolve(app, "lower-model", a.lower_model);
  s.resolve(app, "fb", a.fb);
  s.resolve(app, "starts", a.starts);
  s.resolve(app, "time-limit", a.time_limit);
  m.config = s.resolved();
  if (a.mode != "bilevel-kkt" && a.mode != "ann-kkt") throw UsageError("--mode must be bilevel-kkt or ann-kkt");

  BilevelProblem problem;
  std::optional<BilevelProblem> analytic;
  if (is_benchmark(a.problem)) {
    analytic = build_benchmark(a.problem);
    if (a.mode == "ann-kkt") {
      if (a.upper_model.empty() || a.lower_model.empty())
        throw UsageError("--mode ann-kkt needs --upper-model and --lower-model");
      m.input(a.upper_model);
      m.input(a.lower_model);
      auto up = std::make_shared<const TrainedModel>(load_model(a.upper_model));
      auto lo = std::make_shared<const TrainedModel>(load_model(a.lower_model));
      problem = build_benchmark_surrogate(a.problem, up, lo);
    } else {
      problem = *analytic;
    }
  } else {
    m.input(a.problem);
    problem = load_problem(a.problem);
  }

  KKTOptions opts;
  opts.use_fb = a.fb;
  const SingleLevelNLP nlp = kkt_reformulate(problem, opts);
  SolverConfig cfg;
  cfg.starts = a.starts;
  cfg.seed = a.common.seed;
  cfg.threads = a.common.threads;
  cfg.time_limit = a.time_limit;
  const MultistartResult res = multistart_solve(nlp, cfg);

  json j = to_json(res.best);
  j["problem"] = problem.name;
  j["mode"] = a.mode;
  j["fb"] = a.fb;
  j["starts"] = json::array();
  for (const auto& r : res.all)
    j["starts"].push_back({{"status", to_string(r.status)},
                           {"objective", r.objective},
                           {"primal_infeasibility", r.primal_infeasibility},
                           {"cpu_seconds", r.cpu_seconds}});
  if (analytic && a.mode == "ann-kkt") {
    const auto n = static_cast<Eigen::Index>(analytic->variables.size());
    j["analytic_upper_objective"] = analytic->upper_objective.eval(res.best.point.head(n));
  }
  const fs::path dir(a.out);
  write_json(dir / "report.json", j);
  m.output(dir / "report.json");
  write_trace_csv(dir / "trace.csv", res.best);
  m.output(dir / "trace.csv");
  write_text(dir / "nlp.txt", nlp.listing());
  m.output(dir / "nlp.txt");
  m.write(dir / "manifest.json");

  std::cout << problem.name << " (" << a.mode << (a.fb ? ", FB" : "") << "): " << to_string(res.best.status)
            << ", objective " << format_number(res.best.objective) << ", infeasibility "
            << res.best.primal_infeasibility << "\n";
  for (std::size_t i = 0; i < problem.variables.size(); ++i)
    std::cout << "  " << problem.variables[i].name << " = " << format_number(res.best.point(static_cast<Eigen::Index>(i)))
              << "\n";
  return res.best.status == SolveStatus::Infeasible ? kInfeasibleOnly : kOk;
}

// ---------------------------------------------------------------- sweep-tau

struct SweepArgs {
  Common common;
  std::string power;
  std::string thr;
  std::string data;
  std::string spec = "plant-coal-synth";
  double from = 81.0;
  double to = 95.0;
  double step = 1.0;
  int starts = 8;
  std::string out;
};

int cmd_sweep_tau(const CLI::App& app, SweepArgs& a, Manifest& m) {
  Settings s;
  resolve_common(app, s, a.common, m);
  s.resolve(app, "spec", a.spec);
  s.resolve(app, "from", a.from);
  s.resolve(app, "to", a.to);
  s.resolve(app, "step", a.step);
  s.resolve(app, "starts", a.starts);
  m.config = s.resolved();
  if (!(a.from > 0.0) || !(a.to < 100.0) || a.from > a.to || !(a.step > 0.0))
    throw UsageError("percentile range must satisfy 0 < from <= to < 100 with a positive step");

  m.input(a.power);
  m.input(a.thr);
  m.input(a.data);
  const PlantSpec spec = plant_spec(a.spec);
  auto power = std::make_shared<const TrainedModel>(load_model(a.power));
  auto thr = std::make_shared<const TrainedModel>(load_model(a.thr));
  const DataMatrix data = read_csv(a.data);
  std::vector<double> pct;
  for (double p = a.from; p <= a.to + 1e-9; p += a.step) pct.push_back(p);

  SolverConfig cfg;
  cfg.starts = a.starts;
  cfg.seed = a.common.seed;
  cfg.threads = a.common.threads;
  const auto rows = tau_sweep(power, thr, data, spec, pct, cfg);

  const fs::path dir(a.out);
  write_text(dir / "sweep.csv", tau_sweep_csv(rows));
  m.output(dir / "sweep.csv");
  json bundle = json::array();
  for (const auto& r : rows) {
    json j = to_json(r, spec.names());
    j["report"] = to_json(r.report);
    bundle.push_back(j);
    const auto trace = dir / "traces" / ("trace_" + format_number(r.percentile) + ".csv");
    write_trace_csv(trace, r.report);
    m.output(trace);
  }
  write_json(dir / "sweep.json", bundle);
  m.output(dir / "sweep.json");
  m.write(dir / "manifest.json");

  std::cout << tau_sweep_csv(rows);
  const bool any = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.status == SolveStatus::Optimal; });
  return any ? kOk : kInfeasibleOnly;
}

// ---------------------------------------------------------------- robust

struct RobustArgs {
  Common common;
  std::string model;
  std::string data;
  std::string targets = "39,40,41,42";
  int samples = 10000;
  double filter = 90.0;
  double design_percentile = 95.0;
  int starts = 8;
  std::string out;
};

int cmd_robust(const CLI::App& app, RobustArgs& a, Manifest& m) {
  Settings s;
  resolve_common(app, s, a.common, m);
  s.resolve(app, "targets", a.targets);
  s.resolve(app, "samples", a.samples);
  s.resolve(app, "filter", a.filter);
  s.resolve(app, "design-percentile", a.design_percentile);
  s.resolve(app, "starts", a.starts);
  m.config = s.resolved();
  const auto targets = parse_doubles(a.targets);
  if (targets.empty()) throw UsageError("--targets must list at least one value");
  if (a.samples < 1) throw UsageError("--samples must be positive");

  m.input(a.model);
  m.input(a.data);
  auto model = std::make_shared<const TrainedModel>(load_model(a.model));
  const DataMatrix data = read_csv(a.data);
  const DataMatrix scaled = minmax_apply(model->input_scaling, data.select(model->input_names));
  const MahalanobisEnvelope env = mahalanobis_fit(scaled, a.design_percentile);

  SolverConfig cfg;
  cfg.starts = a.starts;
  cfg.seed = a.common.seed;
  cfg.threads = a.common.threads;

  json results = json::array();
  std::ostringstream samples_csv;
  samples_csv << "target,te\n";
  std::vector<std::vector<OperatingRange>> ranges;
  std::vector<double> ok_targets;
  for (double t : targets) {
    const RobustProblem rp{model, env, t};
    const RobustSolution sol = solve_robust(rp, cfg);
    json j = to_json(sol, *model);
    j["target"] = t;
    if (sol.status == SolveStatus::Optimal) {
      try {
        const auto study = perturbation_study(rp, sol.x, sol.rho, a.samples, a.filter, a.common.seed);
        j["perturbation"] = {{"requested", study.requested},      {"kept", study.kept},
                             {"te_mean", study.te_mean},          {"te_min", study.te_min},
                             {"te_max", study.te_max},            {"fraction_above_target", study.fraction_above_target}};
        for (Eigen::Index k = 0; k < study.te.size(); ++k)
          samples_csv << format_number(t) << ',' << format_number(study.te(k)) << '\n';
      } catch (const NumericalError& e) {
        j["perturbation"] = {{"error", e.what()}};
      }
      ranges.push_back(operating_ranges(sol, *model));
      ok_targets.push_back(t);
    }
    results.push_back(j);
    std::cout << "target " << format_number(t) << ": " << to_string(sol.status) << ", rho " << sol.rho
              << ", worst TE " << sol.te_worst << (sol.adversary_confirms ? "" : " (not confirmed)") << "\n";
  }

  const fs::path dir(a.out);
  write_json(dir / "robust.json", results);
  m.output(dir / "robust.json");
  std::ostringstream rc;
  rc << "feature";
  for (double t : ok_targets) rc << ",nominal_" << format_number(t) << ",worst_" << format_number(t);
  rc << '\n';
  for (std::size_t i = 0; i < model->input_names.size(); ++i) {
    rc << model->input_names[i];
    for (const auto& r : ranges) rc << ',' << format_number(r[i].nominal) << ',' << format_number(r[i].worst);
    rc << '\n';
  }
  write_text(dir / "ranges.csv", rc.str());
  m.output(dir / "ranges.csv");
  write_text(dir / "te_samples.csv", samples_csv.str());
  m.output(dir / "te_samples.csv");
  m.write(dir / "manifest.json");
  return ok_targets.empty() ? kInfeasibleOnly : kOk;
}

// ---------------------------------------------------------------- report

int cmd_report(const std::vector<std::string>& paths) {
  for (const auto& p : paths) {
    std::ifstream in(p);
    if (!in) throw UsageError("cannot read " + p);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw SchemaError(p + ": " + e.what());
    }
    std::cout << "== " << p << "\n";
    if (j.is_object() && j.contains("command") && j.contains("outputs")) {
      std::cout << "command " << j["command"].get<std::string>() << ", seed " << j["seed"] << ", wall "
                << j["wall_seconds"] << " s\n";
      for (const auto& i : j["inputs"]) std::cout << "  in  " << i["path"].get<std::string>() << " " << i["sha256"].get<std::string>() << "\n";
      for (const auto& o : j["outputs"]) std::cout << "  out " << o.get<std::string>() << "\n";
    } else if (j.is_object() && j.contains("status") && j.contains("point")) {
      std::cout << "status " << j["status"].get<std::string>() << ", objective " << j["objective"]
                << ", infeasibility " << j["primal_infeasibility"] << ", cpu " << j["cpu_seconds"] << " s\n";
      if (j.contains("licq")) std::cout << "LICQ " << (j["licq"]["holds"].get<bool>() ? "holds" : "fails") << "\n";
    } else if (j.is_array()) {
      for (const auto& row : j) {
        if (row.contains("percentile"))
          std::cout << std::setw(6) << row["percentile"] << "  THR " << row["THR"] << "  Power " << row["Power"] << "  "
                    << row["status"].get<std::string>() << "\n";
        else if (row.contains("target"))
          std::cout << "target " << row["target"] << "  " << row["status"].get<std::string>() << "  rho " << row["rho"]
                    << "  worst TE " << row["te_worst"] << "\n";
      }
    } else {
      throw SchemaError(p + ": not a manifest, report, sweep or robust file");
    }
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Surrogate-based bi-level optimization via KKT reformulation"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  Manifest manifest;
  manifest.argv.assign(argv, argv + argc);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a benchmark or synthetic plant dataset");
  add_common(gen_cmd, gen.common);
  gen_cmd->add_option("target", gen.target, "cc, cnc, ncnc, plant-coal-synth or plant-gas-synth")->required();
  gen_cmd->add_option("--n", gen.n, "Number of rows");
  gen_cmd->add_option("--out", gen.out, "Output CSV")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Hyper-parameter search and training of one surrogate");
  add_common(train_cmd, tr.common);
  train_cmd->add_option("--data", tr.data, "Input CSV")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--target", tr.target, "Target column")->required();
  train_cmd->add_option("--inputs", tr.inputs, "Comma-separated input columns");
  train_cmd->add_option("--spec", tr.spec, "Plant spec whose variable subsets pick the inputs");
  train_cmd->add_option("--trials", tr.trials, "Random-search trials");
  train_cmd->add_option("--screen-epochs", tr.screen_epochs, "Short screening budget (0 trains every trial fully)");
  train_cmd->add_option("--finalists", tr.finalists, "Trials retrained fully after screening");
  train_cmd->add_option("--max-epochs", tr.max_epochs);
  train_cmd->add_option("--patience", tr.patience);
  train_cmd->add_option("--hidden-min", tr.hidden_min);
  train_cmd->add_option("--hidden-max", tr.hidden_max);
  train_cmd->add_option("--split", tr.split, "train,validation,test fractions");
  train_cmd->add_option("--out", tr.out, "Model JSON")->required();

  SolveArgs sv;
  auto* solve_cmd = app.add_subcommand("solve", "KKT-reformulate and solve a bi-level problem");
  add_common(solve_cmd, sv.common);
  solve_cmd->add_option("problem", sv.problem, "cc, cnc, ncnc or a problem JSON file")->required();
  solve_cmd->add_option("--mode", sv.mode, "bilevel-kkt or ann-kkt");
  solve_cmd->add_option("--upper-model", sv.upper_model, "Upper objective model (ann-kkt)");
  solve_cmd->add_option("--lower-model", sv.lower_model, "Lower objective model (ann-kkt)");
  solve_cmd->add_flag("--fb", sv.fb, "Smooth complementarity with perturbed Fischer-Burmeister rows");
  solve_cmd->add_option("--starts", sv.starts, "Multistart count");
  solve_cmd->add_option("--time-limit", sv.time_limit, "CPU seconds per start");
  solve_cmd->add_option("--out", sv.out, "Output directory")->required();

  SweepArgs sw;
  auto* sweep_cmd = app.add_subcommand("sweep-tau", "Solve the plant problem across envelope percentiles");
  add_common(sweep_cmd, sw.common);
  sweep_cmd->add_option("--power", sw.power, "Power model JSON")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--thr", sw.thr, "THR model JSON")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--data", sw.data, "Data CSV for the envelope")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--spec", sw.spec, "plant-coal-synth or plant-gas-synth");
  sweep_cmd->add_option("--from", sw.from, "First percentile");
  sweep_cmd->add_option("--to", sw.to, "Last percentile");
  sweep_cmd->add_option("--step", sw.step, "Percentile step");
  sweep_cmd->add_option("--starts", sw.starts, "Multistart count per row");
  sweep_cmd->add_option("--out", sw.out, "Output directory")->required();

  RobustArgs rb;
  auto* robust_cmd = app.add_subcommand("robust", "Stability-radius study over efficiency targets");
  add_common(robust_cmd, rb.common);
  robust_cmd->add_option("--model", rb.model, "Efficiency model JSON")->required()->check(CLI::ExistingFile);
  robust_cmd->add_option("--data", rb.data, "Data CSV for the envelope")->required()->check(CLI::ExistingFile);
  robust_cmd->add_option("--targets", rb.targets, "Comma-separated efficiency floors");
  robust_cmd->add_option("--samples", rb.samples, "Perturbation samples per target");
  robust_cmd->add_option("--filter", rb.filter, "Envelope percentile filtering perturbed points");
  robust_cmd->add_option("--design-percentile", rb.design_percentile, "Envelope percentile bounding the design");
  robust_cmd->add_option("--starts", rb.starts, "Multistart count");
  robust_cmd->add_option("--out", rb.out, "Output directory")->required();

  std::vector<std::string> report_paths;
  auto* report_cmd = app.add_subcommand("report", "Summarize manifests and result files");
  report_cmd->add_option("files", report_paths, "JSON files")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(*gen_cmd, gen, manifest);
    if (*train_cmd) return cmd_train(*train_cmd, tr, manifest);
    if (*solve_cmd) return cmd_solve(*solve_cmd, sv, manifest);
    if (*sweep_cmd) return cmd_sweep_tau(*sweep_cmd, sw, manifest);
    if (*robust_cmd) return cmd_robust(*robust_cmd, rb, manifest);
    if (*report_cmd) return cmd_report(report_paths);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
