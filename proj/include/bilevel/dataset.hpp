#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace bilevel {

/// Named real matrix, one sample per row.
///
/// Values are always finite, column names unique, and there is at least one
/// row. The optional target names the column a model is trained to predict.
class DataMatrix {
 public:
  DataMatrix(std::vector<std::string> columns, Eigen::MatrixXd values,
             std::optional<std::string> target = std::nullopt);

  const std::vector<std::string>& columns() const { return columns_; }
  const Eigen::MatrixXd& values() const { return values_; }
  const std::optional<std::string>& target() const { return target_; }

  Eigen::Index rows() const { return values_.rows(); }
  Eigen::Index cols() const { return values_.cols(); }

  /// Index of a named column; throws SchemaError when absent.
  Eigen::Index column_index(const std::string& name) const;
  bool has_column(const std::string& name) const;
  Eigen::VectorXd column(const std::string& name) const;

  /// New matrix restricted to `names`, in that order.
  DataMatrix select(const std::vector<std::string>& names) const;
  DataMatrix select_rows(const std::vector<Eigen::Index>& rows) const;
  DataMatrix with_target(std::optional<std::string> target) const;

 private:
  std::vector<std::string> columns_;
  Eigen::MatrixXd values_;
  std::optional<std::string> target_;
};

struct ColumnRange {
  double min = 0.0;
  double max = 0.0;
  bool constant() const { return max == min; }
};

/// Per-column min-max scaling to [0, 1].
struct ScalingSpec {
  std::vector<std::string> columns;
  std::vector<ColumnRange> ranges;

  const ColumnRange& range(const std::string& column) const;
  /// Columns whose max equals min; they scale to 0.
  std::vector<std::string> constant_columns() const;

  /// Scale or unscale a single value of column `j`.
  double apply(std::size_t j, double v) const;
  double invert(std::size_t j, double v) const;

  /// Restrict to the named columns (order follows `names`).
  ScalingSpec subset(const std::vector<std::string>& names) const;
};

ScalingSpec minmax_fit(const DataMatrix& data);
DataMatrix minmax_apply(const ScalingSpec& spec, const DataMatrix& data);
DataMatrix minmax_invert(const ScalingSpec& spec, const DataMatrix& data);

nlohmann::json to_json(const ScalingSpec& spec);
ScalingSpec scaling_from_json(const nlohmann::json& j);

/// Split fractions; a zero test fraction selects two-way (train/validation) mode.
struct SplitSpec {
  double train_fraction = 0.7;
  double validation_fraction = 0.15;
  double test_fraction = 0.15;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DataSplits {
  DataMatrix train;
  DataMatrix validation;
  std::optional<DataMatrix> test;
};

/// Seeded shuffle then partition. Non-train sizes are round(fraction * rows);
/// the remainder goes to training.
DataSplits split(const DataMatrix& data, const SplitSpec& spec);

struct Bounds {
  double lo = 0.0;
  double hi = 0.0;
};

/// n i.i.d. uniform points in the box, columns named by `names`.
DataMatrix uniform_sample(const std::vector<Bounds>& bounds, Eigen::Index n, std::uint64_t seed,
                          std::vector<std::string> names = {});

struct MetricsReport {
  double r_squared = 0.0;
  double rmse = 0.0;
};

double r_squared(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat);
double rmse(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat);
MetricsReport compute_metrics(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat);

/// CSV with a header row; every cell must parse as a finite number.
DataMatrix read_csv(const std::filesystem::path& path);
DataMatrix parse_csv(const std::string& text);
void write_csv(const std::filesystem::path& path, const DataMatrix& data);
std::string format_csv(const DataMatrix& data);
/// Shortest text that reads back to the same double.
std::string format_number(double v);

}  // namespace bilevel
