#include "bilevel/surrogate.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "bilevel/error.hpp"
#include "bilevel/parallel.hpp"

namespace bilevel {

namespace {

constexpr int kMaxSiluOrder = 12;

// Coefficients of the polynomials P_n with d^n/dz^n sigmoid(z) = P_n(sigmoid(z)).
// P_0(s) = s and P_{n+1}(s) = P_n'(s) * s * (1 - s).
const std::vector<std::vector<double>>& sigmoid_derivative_polys() {
  static const std::vector<std::vector<double>> polys = [] {
    std::vector<std::vector<double>> p(kMaxSiluOrder + 1);
    p[0] = {0.0, 1.0};
    for (int n = 0; n < kMaxSiluOrder; ++n) {
      const auto& cur = p[static_cast<std::size_t>(n)];
      std::vector<double> next(cur.size() + 1, 0.0);
      for (std::size_t k = 1; k < cur.size(); ++k) {
        const double d = static_cast<double>(k) * cur[k];  // coefficient of s^(k-1) in P_n'
        next[k] += d;                                      // times s
        next[k + 1] -= d;                                  // times -s^2
      }
      p[static_cast<std::size_t>(n + 1)] = std::move(next);
    }
    return p;
  }();
  return polys;
}

double poly_eval(const std::vector<double>& c, double s) {
  double acc = 0.0;
  for (auto it = c.rbegin(); it != c.rend(); ++it) acc = acc * s + *it;
  return acc;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void check_dims(const ShallowNet& net, Eigen::Index n) {
  if (n != net.inputs())
    throw SchemaError("network expects " + std::to_string(net.inputs()) + " inputs, got " + std::to_string(n));
}

Eigen::ArrayXXd silu_array(const Eigen::ArrayXXd& z, Eigen::ArrayXXd* dsilu) {
  Eigen::ArrayXXd s = 1.0 / (1.0 + (-z).exp());
  if (dsilu) *dsilu = s * (1.0 + z * (1.0 - s));
  return z * s;
}

}  // namespace

double silu_eval(double z, int order) {
  if (order < 0 || order > kMaxSiluOrder)
    throw UsageError("silu_eval: order must be in [0, " + std::to_string(kMaxSiluOrder) + "]");
  const double s = sigmoid(z);
  if (order == 0) return z * s;
  const auto& p = sigmoid_derivative_polys();
  return z * poly_eval(p[static_cast<std::size_t>(order)], s) +
         static_cast<double>(order) * poly_eval(p[static_cast<std::size_t>(order - 1)], s);
}

double ShallowNet::l1_norm() const {
  return W1.cwiseAbs().sum() + b1.cwiseAbs().sum() + w2.cwiseAbs().sum() + std::abs(b2);
}

void ShallowNet::validate() const {
  if (W1.rows() < 1 || W1.cols() < 1) throw SchemaError("network needs at least one hidden unit and input");
  if (b1.size() != W1.rows() || w2.size() != W1.rows()) throw SchemaError("network layer shapes disagree");
  if (!W1.allFinite() || !b1.allFinite() || !w2.allFinite() || !std::isfinite(b2))
    throw SchemaError("network has non-finite parameters");
}

double forward(const ShallowNet& net, const Eigen::VectorXd& x) {
  check_dims(net, x.size());
  const Eigen::VectorXd z = net.W1 * x + net.b1;
  double y = net.b2;
  for (Eigen::Index j = 0; j < z.size(); ++j) y += net.w2(j) * silu_eval(z(j), 0);
  return y;
}

Eigen::VectorXd forward_batch(const ShallowNet& net, const Eigen::MatrixXd& X) {
  check_dims(net, X.cols());
  Eigen::ArrayXXd z = ((X * net.W1.transpose()).rowwise() + net.b1.transpose()).array();
  Eigen::MatrixXd a = silu_array(z, nullptr).matrix();
  return (a * net.w2).array() + net.b2;
}

double loss(const ShallowNet& net, const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda1) {
  if (X.rows() == 0) throw SchemaError("loss: empty batch");
  if (X.rows() != y.size()) throw SchemaError("loss: input and target lengths differ");
  const Eigen::VectorXd r = forward_batch(net, X) - y;
  return r.squaredNorm() / static_cast<double>(r.size()) + lambda1 * net.l1_norm();
}

double loss(const ShallowNet& net, const DataMatrix& batch, double lambda1) {
  if (!batch.target()) throw SchemaError("loss: batch has no target column");
  std::vector<std::string> inputs;
  for (const auto& c : batch.columns())
    if (c != *batch.target()) inputs.push_back(c);
  return loss(net, batch.select(inputs).values(), batch.column(*batch.target()), lambda1);
}

NetPartial net_partial(const ShallowNet& net, const Eigen::VectorXd& x, std::span<const int> directions,
                       int derivative_order) {
  check_dims(net, x.size());
  const int k = static_cast<int>(directions.size());
  const Eigen::VectorXd z = net.W1 * x + net.b1;
  const Eigen::Index H = net.hidden();

  // c_j = w2_j * prod_{d in directions} W1(j, d)
  Eigen::VectorXd c = net.w2;
  for (int d : directions) {
    if (d < 0 || d >= net.inputs()) throw SchemaError("net_partial: direction out of range");
    c.array() *= net.W1.col(d).array();
  }

  NetPartial out;
  Eigen::VectorXd s0(H), s1(H), s2(H);
  for (Eigen::Index j = 0; j < H; ++j) {
    s0(j) = silu_eval(z(j), k);
    if (derivative_order >= 1) s1(j) = silu_eval(z(j), k + 1);
    if (derivative_order >= 2) s2(j) = silu_eval(z(j), k + 2);
  }
  out.value = c.dot(s0) + (k == 0 ? net.b2 : 0.0);
  if (derivative_order >= 1) out.gradient = net.W1.transpose() * c.cwiseProduct(s1);
  if (derivative_order >= 2)
    out.hessian = net.W1.transpose() * c.cwiseProduct(s2).asDiagonal() * net.W1;
  return out;
}

Eigen::VectorXd input_gradient(const ShallowNet& net, const Eigen::VectorXd& x) {
  check_dims(net, x.size());
  const Eigen::VectorXd z = net.W1 * x + net.b1;
  Eigen::VectorXd coef(z.size());
  for (Eigen::Index j = 0; j < z.size(); ++j) coef(j) = net.w2(j) * silu_eval(z(j), 1);
  return net.W1.transpose() * coef;
}

Eigen::MatrixXd input_hessian(const ShallowNet& net, const Eigen::VectorXd& x) {
  check_dims(net, x.size());
  const Eigen::VectorXd z = net.W1 * x + net.b1;
  Eigen::VectorXd coef(z.size());
  for (Eigen::Index j = 0; j < z.size(); ++j) coef(j) = net.w2(j) * silu_eval(z(j), 2);
  return net.W1.transpose() * coef.asDiagonal() * net.W1;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw UsageError("learning_rate must be >= 0");
  if (lambda1 < 0.0 || lambda2 < 0.0) throw UsageError("lambda1 and lambda2 must be >= 0");
  if (max_epochs < 1) throw UsageError("max_epochs must be >= 1");
  if (patience < 1 || patience > max_epochs) throw UsageError("patience must be in [1, max_epochs]");
}

double TrainedModel::predict(const Eigen::VectorXd& x_phys) const {
  return output_scaling.invert(0, forward(net, scale_inputs(x_phys)));
}

Eigen::VectorXd TrainedModel::scale_inputs(const Eigen::VectorXd& x_phys) const {
  check_dims(net, x_phys.size());
  Eigen::VectorXd u(x_phys.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) u(i) = input_scaling.apply(static_cast<std::size_t>(i), x_phys(i));
  return u;
}

Eigen::VectorXd TrainedModel::predict_batch(const Eigen::MatrixXd& X_phys) const {
  check_dims(net, X_phys.cols());
  Eigen::MatrixXd U(X_phys.rows(), X_phys.cols());
  for (Eigen::Index j = 0; j < U.cols(); ++j)
    for (Eigen::Index i = 0; i < U.rows(); ++i) U(i, j) = input_scaling.apply(static_cast<std::size_t>(j), X_phys(i, j));
  Eigen::VectorXd y = forward_batch(net, U);
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = output_scaling.invert(0, y(i));
  return y;
}

double TrainedModel::best_validation_rmse() const {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& h : history) best = std::min(best, h.validation_rmse);
  return best;
}

namespace {

struct Scaled {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
};

Scaled scale_split(const DataMatrix& m, const std::vector<std::string>& inputs, const std::string& target,
                   const ScalingSpec& in_scale, const ScalingSpec& out_scale) {
  Scaled s;
  s.X = minmax_apply(in_scale, m.select(inputs)).values();
  s.y = minmax_apply(out_scale, m.select({target})).values().col(0);
  return s;
}

struct AdamSlot {
  Eigen::ArrayXd m, v;
  explicit AdamSlot(Eigen::Index n) : m(Eigen::ArrayXd::Zero(n)), v(Eigen::ArrayXd::Zero(n)) {}
};

// AdamW update on a contiguous parameter block; `grad` uses the same layout.
void adam_step(double* theta, const Eigen::ArrayXd& grad, AdamSlot& slot, const TrainConfig& cfg, int t) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  slot.m = beta1 * slot.m + (1.0 - beta1) * grad;
  slot.v = beta2 * slot.v + (1.0 - beta2) * grad.square();
  const double bc1 = 1.0 - std::pow(beta1, t);
  const double bc2 = 1.0 - std::pow(beta2, t);
  Eigen::Map<Eigen::ArrayXd> th(theta, grad.size());
  th -= cfg.learning_rate * ((slot.m / bc1) / ((slot.v / bc2).sqrt() + eps) + cfg.lambda2 * th);
}

Eigen::ArrayXd flat(const Eigen::MatrixXd& m) { return Eigen::Map<const Eigen::ArrayXd>(m.data(), m.size()); }

Eigen::ArrayXd l1_subgradient(const Eigen::ArrayXd& a) {
  return a.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

}  // namespace

TrainedModel train(const DataSplits& splits, const TrainConfig& config, int hidden) {
  config.validate();
  if (hidden < 1) throw UsageError("hidden unit count must be >= 1");
  const auto& tr = splits.train;
  if (!tr.target()) throw SchemaError("training split has no target column");
  const std::string target = *tr.target();
  std::vector<std::string> inputs;
  for (const auto& c : tr.columns())
    if (c != target) inputs.push_back(c);
  if (inputs.empty()) throw SchemaError("training data has no input columns");
  auto same_schema = [&](const DataMatrix& m) { return m.columns() == tr.columns(); };
  if (!same_schema(splits.validation) || (splits.test && !same_schema(*splits.test)))
    throw SchemaError("train/validation/test splits do not share a schema");

  TrainedModel model;
  model.input_names = inputs;
  model.target_name = target;
  model.input_scaling = minmax_fit(tr.select(inputs));
  model.output_scaling = minmax_fit(tr.select({target}));
  model.config = config;

  const Scaled train_s = scale_split(tr, inputs, target, model.input_scaling, model.output_scaling);
  const Scaled val_s = scale_split(splits.validation, inputs, target, model.input_scaling, model.output_scaling);

  const auto n_in = static_cast<Eigen::Index>(inputs.size());
  const Eigen::Index H = hidden;
  std::mt19937_64 rng(config.seed);
  auto init = [&](Eigen::Index rows, Eigen::Index cols, double fan_in, double fan_out) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> u(-a, a);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = u(rng);
    return m;
  };
  ShallowNet net;
  net.W1 = init(H, n_in, static_cast<double>(n_in), static_cast<double>(H));
  net.b1 = Eigen::VectorXd::Zero(H);
  net.w2 = init(H, 1, static_cast<double>(H), 1.0).col(0);
  net.b2 = 0.0;

  AdamSlot sW1(H * n_in), sb1(H), sw2(H), sb2(1);
  ShallowNet best = net;
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;
  const double N = static_cast<double>(train_s.y.size());

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const Eigen::ArrayXXd z = ((train_s.X * net.W1.transpose()).rowwise() + net.b1.transpose()).array();
    Eigen::ArrayXXd dsilu;
    const Eigen::MatrixXd a = silu_array(z, &dsilu).matrix();
    const Eigen::VectorXd r = (a * net.w2).array() + net.b2 - train_s.y.array();
    const double train_loss = r.squaredNorm() / N + config.lambda1 * net.l1_norm();
    if (!std::isfinite(train_loss))
      throw NumericalError("training diverged at epoch " + std::to_string(epoch) + " (non-finite loss, lr=" +
                           std::to_string(config.learning_rate) + ")");

    const Eigen::VectorXd dy = (2.0 / N) * r;
    const Eigen::VectorXd g_w2 = a.transpose() * dy;
    const double g_b2 = dy.sum();
    const Eigen::MatrixXd dz = ((dy * net.w2.transpose()).array() * dsilu).matrix();
    const Eigen::MatrixXd g_W1 = dz.transpose() * train_s.X;
    const Eigen::VectorXd g_b1 = dz.colwise().sum().transpose();

    const double l1 = config.lambda1;
    adam_step(net.W1.data(), flat(g_W1) + l1 * l1_subgradient(flat(net.W1)), sW1, config, epoch);
    adam_step(net.b1.data(), g_b1.array() + l1 * l1_subgradient(net.b1.array()), sb1, config, epoch);
    adam_step(net.w2.data(), g_w2.array() + l1 * l1_subgradient(net.w2.array()), sw2, config, epoch);
    Eigen::ArrayXd gb2(1);
    gb2(0) = g_b2 + l1 * (net.b2 > 0 ? 1.0 : (net.b2 < 0 ? -1.0 : 0.0));
    adam_step(&net.b2, gb2, sb2, config, epoch);

    const double val = rmse(val_s.y, forward_batch(net, val_s.X));
    if (!std::isfinite(val))
      throw NumericalError("training diverged at epoch " + std::to_string(epoch) + " (non-finite validation RMSE)");
    model.history.push_back({epoch, train_loss, val});
    if (val < best_val) {
      best_val = val;
      best = net;
      model.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  model.net = std::move(best);

  auto metrics_on = [&](const DataMatrix& m) {
    return compute_metrics(m.column(target), model.predict_batch(m.select(inputs).values()));
  };
  model.metrics.train = metrics_on(tr);
  model.metrics.validation = metrics_on(splits.validation);
  model.metrics.test = splits.test ? metrics_on(*splits.test) : model.metrics.validation;
  return model;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

nlohmann::json metrics_json(const MetricsReport& m) { return {{"r_squared", m.r_squared}, {"rmse", m.rmse}}; }
MetricsReport metrics_from(const nlohmann::json& j) {
  return {j.at("r_squared").get<double>(), j.at("rmse").get<double>()};
}

nlohmann::json config_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"lambda1", c.lambda1}, {"lambda2", c.lambda2},
          {"max_epochs", c.max_epochs},       {"patience", c.patience}, {"seed", c.seed}};
}

TrainConfig config_from(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.lambda1 = j.at("lambda1").get<double>();
  c.lambda2 = j.at("lambda2").get<double>();
  c.max_epochs = j.at("max_epochs").get<int>();
  c.patience = j.at("patience").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

nlohmann::json to_json(const TrainedModel& model) {
  const auto& n = model.net;
  std::vector<double> w1;
  for (Eigen::Index i = 0; i < n.W1.rows(); ++i)
    for (Eigen::Index j = 0; j < n.W1.cols(); ++j) w1.push_back(n.W1(i, j));
  nlohmann::json history = nlohmann::json::array();
  for (const auto& h : model.history) history.push_back({h.epoch, h.train_loss, h.validation_rmse});
  return {
      {"format", "bilevel.trained_model/1"},
      {"inputs", model.input_names},
      {"target", model.target_name},
      {"input_count", n.inputs()},
      {"hidden", n.hidden()},
      {"activation", "silu"},
      {"output_activation", "linear"},
      {"W1", w1},
      {"b1", std::vector<double>(n.b1.data(), n.b1.data() + n.b1.size())},
      {"W2", std::vector<double>(n.w2.data(), n.w2.data() + n.w2.size())},
      {"b2", n.b2},
      {"input_scaling", to_json(model.input_scaling)},
      {"output_scaling", to_json(model.output_scaling)},
      {"metrics",
       {{"train", metrics_json(model.metrics.train)},
        {"validation", metrics_json(model.metrics.validation)},
        {"test", metrics_json(model.metrics.test)}}},
      {"config", config_json(model.config)},
      {"best_epoch", model.best_epoch},
      {"history", history},
  };
}

TrainedModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "bilevel.trained_model/1")
      throw SchemaError("unsupported model format '" + j.at("format").get<std::string>() + "'");
    if (j.at("activation").get<std::string>() != "silu") throw SchemaError("unsupported activation");
    TrainedModel m;
    m.input_names = j.at("inputs").get<std::vector<std::string>>();
    m.target_name = j.at("target").get<std::string>();
    const auto n_in = j.at("input_count").get<Eigen::Index>();
    const auto H = j.at("hidden").get<Eigen::Index>();
    const auto w1 = j.at("W1").get<std::vector<double>>();
    const auto b1 = j.at("b1").get<std::vector<double>>();
    const auto w2 = j.at("W2").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(w1.size()) != n_in * H || static_cast<Eigen::Index>(b1.size()) != H ||
        static_cast<Eigen::Index>(w2.size()) != H || static_cast<Eigen::Index>(m.input_names.size()) != n_in)
      throw SchemaError("model weight arrays do not match declared dimensions");
    m.net.W1.resize(H, n_in);
    for (Eigen::Index i = 0; i < H; ++i)
      for (Eigen::Index k = 0; k < n_in; ++k) m.net.W1(i, k) = w1[static_cast<std::size_t>(i * n_in + k)];
    m.net.b1 = Eigen::Map<const Eigen::VectorXd>(b1.data(), H);
    m.net.w2 = Eigen::Map<const Eigen::VectorXd>(w2.data(), H);
    m.net.b2 = j.at("b2").get<double>();
    m.net.validate();
    m.input_scaling = scaling_from_json(j.at("input_scaling"));
    m.output_scaling = scaling_from_json(j.at("output_scaling"));
    if (m.input_scaling.columns != m.input_names || m.output_scaling.columns.size() != 1)
      throw SchemaError("model scaling specs do not match its inputs/target");
    const auto& mj = j.at("metrics");
    m.metrics = {metrics_from(mj.at("train")), metrics_from(mj.at("validation")), metrics_from(mj.at("test"))};
    m.config = config_from(j.at("config"));
    m.best_epoch = j.value("best_epoch", 0);
    if (j.contains("history"))
      for (const auto& h : j.at("history")) m.history.push_back({h.at(0).get<int>(), h.at(1).get<double>(), h.at(2).get<double>()});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed model file: ") + e.what());
  }
}

void save_model(const std::filesystem::path& path, const TrainedModel& model) {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write model '" + path.string() + "'");
  out << to_json(model).dump(1) << '\n';
}

TrainedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open model '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("model '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return model_from_json(j);
}

// ---------------------------------------------------------------------------
// Hyperparameter search

void HyperSearchSpace::validate() const {
  if (hidden_min < 1 || hidden_max < hidden_min) throw UsageError("hidden range is empty");
  for (const auto* r : {&learning_rate, &lambda1, &lambda2})
    if (!(r->lo > 0.0) || r->hi < r->lo) throw UsageError("log-uniform ranges need 0 < lo <= hi");
  if (trials < 1) throw UsageError("trials must be >= 1");
  if (screen_epochs < 0 || finalists < 1) throw UsageError("screening needs screen_epochs >= 0 and finalists >= 1");
}

nlohmann::json to_json(const TrialRecord& r) {
  return {{"trial", r.trial},
          {"hidden", r.hidden},
          {"config", config_json(r.config)},
          {"diverged", r.diverged},
          {"error", r.error},
          {"validation_rmse", r.diverged ? nlohmann::json(nullptr) : nlohmann::json(r.validation_rmse)},
          {"epochs", r.epochs},
          {"finalist", r.finalist},
          {"screening_rmse", r.screening_rmse}};
}

HyperSearchResult evaluate_trials(const std::vector<TrialCandidate>& candidates, const DataSplits& splits,
                                  int threads) {
  if (candidates.empty()) throw UsageError("at least one trial is required");
  std::vector<TrialRecord> records(candidates.size());
  std::vector<std::optional<TrainedModel>> models(candidates.size());
  parallel_for(candidates.size(), threads, [&](std::size_t i) {
    auto& rec = records[i];
    rec.trial = static_cast<int>(i);
    rec.hidden = candidates[i].hidden;
    rec.config = candidates[i].config;
    try {
      models[i] = train(splits, candidates[i].config, candidates[i].hidden);
      rec.validation_rmse = models[i]->best_validation_rmse();
      rec.epochs = static_cast<int>(models[i]->history.size());
    } catch (const NumericalError& e) {
      rec.diverged = true;
      rec.error = e.what();
    }
  });

  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].diverged) continue;
    if (!best || records[i].validation_rmse < records[*best].validation_rmse) best = i;
  }
  if (!best) throw NumericalError("all " + std::to_string(records.size()) + " trials diverged");
  return {candidates[*best], std::move(*models[*best]), std::move(records)};
}

HyperSearchResult hyper_search(const HyperSearchSpace& space, const DataSplits& splits, std::uint64_t seed,
                               int threads) {
  space.validate();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> hidden(space.hidden_min, space.hidden_max);
  auto log_uniform = [&](const LogRange& r) {
    std::uniform_real_distribution<double> u(std::log(r.lo), std::log(r.hi));
    return std::exp(u(rng));
  };
  std::vector<TrialCandidate> candidates;
  for (int t = 0; t < space.trials; ++t) {
    TrialCandidate c;
    c.hidden = hidden(rng);
    c.config.learning_rate = log_uniform(space.learning_rate);
    c.config.lambda1 = log_uniform(space.lambda1);
    c.config.lambda2 = log_uniform(space.lambda2);
    c.config.max_epochs = space.max_epochs;
    c.config.patience = std::min(space.patience, space.max_epochs);
    c.config.seed = rng();
    candidates.push_back(c);
  }
  if (space.screen_epochs <= 0 || space.screen_epochs >= space.max_epochs || space.finalists >= space.trials)
    return evaluate_trials(candidates, splits, threads);

  // Short screening run for every candidate, then full runs for the best few.
  std::vector<TrialCandidate> shortened = candidates;
  for (auto& c : shortened) {
    c.config.max_epochs = space.screen_epochs;
    c.config.patience = std::min(c.config.patience, space.screen_epochs);
  }
  std::vector<TrialRecord> screened(candidates.size());
  parallel_for(candidates.size(), threads, [&](std::size_t i) {
    auto& rec = screened[i];
    rec.trial = static_cast<int>(i);
    rec.hidden = candidates[i].hidden;
    rec.config = candidates[i].config;
    rec.finalist = false;
    try {
      const auto m = train(splits, shortened[i].config, shortened[i].hidden);
      rec.screening_rmse = m.best_validation_rmse();
      rec.validation_rmse = rec.screening_rmse;
      rec.epochs = static_cast<int>(m.history.size());
    } catch (const NumericalError& e) {
      rec.diverged = true;
      rec.error = e.what();
    }
  });
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < screened.size(); ++i)
    if (!screened[i].diverged) order.push_back(i);
  if (order.empty()) throw NumericalError("all " + std::to_string(screened.size()) + " trials diverged");
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return screened[a].screening_rmse < screened[b].screening_rmse;
  });
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(space.finalists)));
  std::sort(order.begin(), order.end());
  std::vector<TrialCandidate> finals;
  for (std::size_t i : order) finals.push_back(candidates[i]);
  auto result = evaluate_trials(finals, splits, threads);
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto rec = result.trials[k];
    rec.trial = static_cast<int>(order[k]);
    rec.finalist = true;
    rec.screening_rmse = screened[order[k]].screening_rmse;
    screened[order[k]] = rec;
  }
  result.trials = std::move(screened);
  return result;
}

}  // namespace bilevel
