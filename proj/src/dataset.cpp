#include "bilevel/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "bilevel/error.hpp"

namespace bilevel {

DataMatrix::DataMatrix(std::vector<std::string> columns, Eigen::MatrixXd values,
                       std::optional<std::string> target)
    : columns_(std::move(columns)), values_(std::move(values)), target_(std::move(target)) {
  if (values_.rows() < 1) throw SchemaError("data matrix has no rows");
  if (static_cast<Eigen::Index>(columns_.size()) != values_.cols())
    throw SchemaError("column name count " + std::to_string(columns_.size()) +
                      " does not match value width " + std::to_string(values_.cols()));
  std::set<std::string> seen;
  for (const auto& c : columns_)
    if (!seen.insert(c).second) throw SchemaError("duplicate column name '" + c + "'");
  if (!values_.allFinite()) throw SchemaError("data matrix contains non-finite values");
  if (target_ && !seen.count(*target_)) throw SchemaError("target column '" + *target_ + "' not present");
}

Eigen::Index DataMatrix::column_index(const std::string& name) const {
  auto it = std::find(columns_.begin(), columns_.end(), name);
  if (it == columns_.end()) throw SchemaError("missing column '" + name + "'");
  return static_cast<Eigen::Index>(it - columns_.begin());
}

bool DataMatrix::has_column(const std::string& name) const {
  return std::find(columns_.begin(), columns_.end(), name) != columns_.end();
}

Eigen::VectorXd DataMatrix::column(const std::string& name) const {
  return values_.col(column_index(name));
}

DataMatrix DataMatrix::select(const std::vector<std::string>& names) const {
  Eigen::MatrixXd out(values_.rows(), static_cast<Eigen::Index>(names.size()));
  for (std::size_t j = 0; j < names.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = column(names[j]);
  std::optional<std::string> tgt;
  if (target_ && std::find(names.begin(), names.end(), *target_) != names.end()) tgt = target_;
  return DataMatrix(names, std::move(out), tgt);
}

DataMatrix DataMatrix::select_rows(const std::vector<Eigen::Index>& rows) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), values_.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = values_.row(rows[i]);
  return DataMatrix(columns_, std::move(out), target_);
}

DataMatrix DataMatrix::with_target(std::optional<std::string> target) const {
  return DataMatrix(columns_, values_, std::move(target));
}

// ---------------------------------------------------------------------------
// Scaling

const ColumnRange& ScalingSpec::range(const std::string& column) const {
  auto it = std::find(columns.begin(), columns.end(), column);
  if (it == columns.end()) throw SchemaError("scaling spec has no column '" + column + "'");
  return ranges[static_cast<std::size_t>(it - columns.begin())];
}

std::vector<std::string> ScalingSpec::constant_columns() const {
  std::vector<std::string> out;
  for (std::size_t j = 0; j < columns.size(); ++j)
    if (ranges[j].constant()) out.push_back(columns[j]);
  return out;
}

double ScalingSpec::apply(std::size_t j, double v) const {
  const auto& r = ranges.at(j);
  if (r.constant()) return 0.0;
  return (v - r.min) / (r.max - r.min);
}

double ScalingSpec::invert(std::size_t j, double v) const {
  const auto& r = ranges.at(j);
  return r.min + v * (r.max - r.min);
}

ScalingSpec ScalingSpec::subset(const std::vector<std::string>& names) const {
  ScalingSpec out;
  for (const auto& n : names) {
    out.columns.push_back(n);
    out.ranges.push_back(range(n));
  }
  return out;
}

ScalingSpec minmax_fit(const DataMatrix& data) {
  if (data.cols() == 0) throw SchemaError("minmax_fit: matrix has no columns");
  ScalingSpec spec;
  spec.columns = data.columns();
  for (Eigen::Index j = 0; j < data.cols(); ++j)
    spec.ranges.push_back({data.values().col(j).minCoeff(), data.values().col(j).maxCoeff()});
  return spec;
}

namespace {

std::vector<std::size_t> schema_map(const ScalingSpec& spec, const DataMatrix& data) {
  if (spec.columns.size() != static_cast<std::size_t>(data.cols()))
    throw SchemaError("scaling spec has " + std::to_string(spec.columns.size()) + " columns, data has " +
                      std::to_string(data.cols()));
  std::vector<std::size_t> idx;
  for (const auto& c : data.columns()) {
    auto it = std::find(spec.columns.begin(), spec.columns.end(), c);
    if (it == spec.columns.end()) throw SchemaError("scaling spec has no column '" + c + "'");
    idx.push_back(static_cast<std::size_t>(it - spec.columns.begin()));
  }
  return idx;
}

}  // namespace

DataMatrix minmax_apply(const ScalingSpec& spec, const DataMatrix& data) {
  auto idx = schema_map(spec, data);
  Eigen::MatrixXd out = data.values();
  for (Eigen::Index j = 0; j < out.cols(); ++j)
    for (Eigen::Index i = 0; i < out.rows(); ++i) out(i, j) = spec.apply(idx[static_cast<std::size_t>(j)], out(i, j));
  return DataMatrix(data.columns(), std::move(out), data.target());
}

DataMatrix minmax_invert(const ScalingSpec& spec, const DataMatrix& data) {
  auto idx = schema_map(spec, data);
  Eigen::MatrixXd out = data.values();
  for (Eigen::Index j = 0; j < out.cols(); ++j)
    for (Eigen::Index i = 0; i < out.rows(); ++i) out(i, j) = spec.invert(idx[static_cast<std::size_t>(j)], out(i, j));
  return DataMatrix(data.columns(), std::move(out), data.target());
}

nlohmann::json to_json(const ScalingSpec& spec) {
  nlohmann::json j = nlohmann::json::object();
  nlohmann::json order = nlohmann::json::array();
  for (std::size_t k = 0; k < spec.columns.size(); ++k) {
    j[spec.columns[k]] = {{"min", spec.ranges[k].min}, {"max", spec.ranges[k].max}};
    order.push_back(spec.columns[k]);
  }
  // JSON objects are unordered; keep the column order explicitly.
  return {{"columns", order}, {"ranges", j}};
}

ScalingSpec scaling_from_json(const nlohmann::json& j) {
  ScalingSpec spec;
  try {
    for (const auto& c : j.at("columns")) {
      auto name = c.get<std::string>();
      const auto& r = j.at("ranges").at(name);
      spec.columns.push_back(name);
      spec.ranges.push_back({r.at("min").get<double>(), r.at("max").get<double>()});
      if (spec.ranges.back().max < spec.ranges.back().min)
        throw SchemaError("scaling range for '" + name + "' has max < min");
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed scaling spec: ") + e.what());
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Splitting and sampling

void SplitSpec::validate() const {
  auto in_unit = [](double f) { return f > 0.0 && f < 1.0; };
  if (!in_unit(train_fraction) || !in_unit(validation_fraction) || test_fraction < 0.0 || test_fraction >= 1.0)
    throw UsageError("split fractions must lie in (0,1)");
  if (std::abs(train_fraction + validation_fraction + test_fraction - 1.0) > 1e-9)
    throw UsageError("split fractions must sum to 1");
}

DataSplits split(const DataMatrix& data, const SplitSpec& spec) {
  spec.validate();
  const Eigen::Index n = data.rows();
  if (n < 3) throw SchemaError("split needs at least 3 rows");

  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  std::mt19937_64 rng(spec.seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  const auto n_val = static_cast<Eigen::Index>(std::llround(spec.validation_fraction * static_cast<double>(n)));
  const auto n_test = static_cast<Eigen::Index>(std::llround(spec.test_fraction * static_cast<double>(n)));
  const Eigen::Index n_train = n - n_val - n_test;
  if (n_train < 1 || n_val < 1 || (spec.test_fraction > 0.0 && n_test < 1))
    throw SchemaError("too few rows for the requested split");

  auto slice = [&](Eigen::Index from, Eigen::Index count) {
    return std::vector<Eigen::Index>(perm.begin() + from, perm.begin() + from + count);
  };
  DataSplits out{data.select_rows(slice(0, n_train)), data.select_rows(slice(n_train, n_val)), std::nullopt};
  if (n_test > 0) out.test = data.select_rows(slice(n_train + n_val, n_test));
  return out;
}

DataMatrix uniform_sample(const std::vector<Bounds>& bounds, Eigen::Index n, std::uint64_t seed,
                          std::vector<std::string> names) {
  if (n < 1) throw UsageError("uniform_sample needs n >= 1");
  if (bounds.empty()) throw UsageError("uniform_sample needs at least one dimension");
  for (const auto& b : bounds)
    if (!(b.lo <= b.hi) || !std::isfinite(b.lo) || !std::isfinite(b.hi))
      throw UsageError("uniform_sample bounds must be finite with lo <= hi");
  if (names.empty())
    for (std::size_t j = 0; j < bounds.size(); ++j) names.push_back("x" + std::to_string(j));
  if (names.size() != bounds.size()) throw UsageError("name count differs from bound count");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::MatrixXd v(n, static_cast<Eigen::Index>(bounds.size()));
  for (Eigen::Index i = 0; i < n; ++i)
    for (std::size_t j = 0; j < bounds.size(); ++j) {
      const auto& b = bounds[j];
      // lo + u*(hi-lo) can round past hi; clamp keeps the box exact.
      v(i, static_cast<Eigen::Index>(j)) = std::clamp(b.lo + unit(rng) * (b.hi - b.lo), b.lo, b.hi);
    }
  return DataMatrix(std::move(names), std::move(v));
}

// ---------------------------------------------------------------------------
// Metrics

double r_squared(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat) {
  if (y.size() != yhat.size()) throw SchemaError("r_squared: length mismatch");
  if (y.size() < 2) throw SchemaError("r_squared: needs at least two samples");
  const double mean = y.mean();
  const double ss_tot = (y.array() - mean).square().sum();
  if (ss_tot == 0.0) throw NumericalError("r_squared: constant target, denominator is zero");
  return 1.0 - (y - yhat).squaredNorm() / ss_tot;
}

double rmse(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat) {
  if (y.size() != yhat.size()) throw SchemaError("rmse: length mismatch");
  if (y.size() < 1) throw SchemaError("rmse: empty input");
  return std::sqrt((y - yhat).squaredNorm() / static_cast<double>(y.size()));
}

MetricsReport compute_metrics(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat) {
  return {r_squared(y, yhat), rmse(y, yhat)};
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    auto b = cell.find_first_not_of(" \t\r");
    auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

DataMatrix parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("CSV is empty");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  auto header = split_line(line);
  if (header.empty()) throw SchemaError("CSV header is empty");
  for (const auto& h : header)
    if (h.empty()) throw SchemaError("CSV header has an empty column name");

  std::vector<double> cells;
  Eigen::Index rows = 0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fields = split_line(line);
    if (fields.size() != header.size())
      throw SchemaError("CSV line " + std::to_string(lineno) + " has " + std::to_string(fields.size()) +
                        " fields, expected " + std::to_string(header.size()));
    for (const auto& f : fields) {
      if (f.empty()) throw SchemaError("CSV line " + std::to_string(lineno) + " has a missing value");
      double v = 0.0;
      auto res = std::from_chars(f.data(), f.data() + f.size(), v);
      if (res.ec != std::errc{} || res.ptr != f.data() + f.size() || !std::isfinite(v))
        throw SchemaError("CSV line " + std::to_string(lineno) + ": '" + f + "' is not a finite number");
      cells.push_back(v);
    }
    ++rows;
  }
  if (rows == 0) throw SchemaError("CSV has no data rows");
  Eigen::MatrixXd values(rows, static_cast<Eigen::Index>(header.size()));
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < values.cols(); ++j)
      values(i, j) = cells[static_cast<std::size_t>(i * values.cols() + j)];
  return DataMatrix(std::move(header), std::move(values));
}

DataMatrix read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SchemaError("cannot open CSV '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str());
}

std::string format_csv(const DataMatrix& data) {
  std::string out;
  for (std::size_t j = 0; j < data.columns().size(); ++j) {
    if (j) out += ',';
    out += data.columns()[j];
  }
  out += '\n';
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.cols(); ++j) {
      if (j) out += ',';
      out += format_number(data.values()(i, j));
    }
    out += '\n';
  }
  return out;
}

void write_csv(const std::filesystem::path& path, const DataMatrix& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw SchemaError("cannot write CSV '" + path.string() + "'");
  out << format_csv(data);
}

}  // namespace bilevel
