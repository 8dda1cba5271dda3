#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "bilevel/dataset.hpp"
#include "bilevel/error.hpp"
#include "doctest.h"

using namespace bilevel;

namespace {

DataMatrix column(std::vector<double> v, const std::string& name = "a") {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = v[i];
  return DataMatrix({name}, m);
}

DataMatrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 50.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  std::vector<std::string> names;
  for (Eigen::Index j = 0; j < cols; ++j) names.push_back("c" + std::to_string(j));
  return DataMatrix(names, m);
}

std::vector<double> first_column(const DataMatrix& d) {
  const auto c = d.values().col(0);
  return {c.data(), c.data() + c.size()};
}

}  // namespace

TEST_CASE("data matrix rejects bad shapes and values") {
  CHECK_THROWS_AS(DataMatrix({"a"}, Eigen::MatrixXd(0, 1)), SchemaError);
  CHECK_THROWS_AS(DataMatrix({"a", "a"}, Eigen::MatrixXd::Zero(2, 2)), SchemaError);
  Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(2, 1);
  bad(1, 0) = std::nan("");
  CHECK_THROWS_AS(DataMatrix({"a"}, bad), SchemaError);
  CHECK_THROWS_AS(DataMatrix({"a"}, Eigen::MatrixXd::Zero(2, 1), "b"), SchemaError);
}

TEST_CASE("minmax_fit records extremes and flags constant columns") {
  const auto s = minmax_fit(column({2, 4, 6}));
  CHECK(s.ranges[0].min == 2.0);
  CHECK(s.ranges[0].max == 6.0);
  CHECK_FALSE(s.ranges[0].constant());

  const auto c = minmax_fit(column({5, 5, 5}));
  CHECK(c.ranges[0].min == 5.0);
  CHECK(c.ranges[0].max == 5.0);
  CHECK(c.constant_columns() == std::vector<std::string>{"a"});
  CHECK(minmax_apply(c, column({5, 5, 5})).values().isZero());
}

TEST_CASE("minmax_fit on a uniform column recovers its box") {
  const auto d = uniform_sample({{0.0, 8.0}}, 10000, 3, {"x"});
  // Oracle: the extremes of the sample itself.
  const auto v = first_column(d);
  const auto s = minmax_fit(d);
  CHECK(s.ranges[0].min == *std::min_element(v.begin(), v.end()));
  CHECK(s.ranges[0].max == *std::max_element(v.begin(), v.end()));
  // Expected gap from the box edge is 8/(n+1); allow ten times that.
  CHECK(s.ranges[0].min < 0.008);
  CHECK(s.ranges[0].max > 8.0 - 0.008);
}

TEST_CASE("minmax_apply maps min, max and midpoint") {
  const auto s = minmax_fit(column({-3, 7}));
  const auto out = minmax_apply(s, column({-3, 7, 2}));
  CHECK(out.values()(0, 0) == 0.0);
  CHECK(out.values()(1, 0) == 1.0);
  CHECK(out.values()(2, 0) == doctest::Approx(0.5).epsilon(1e-15));

  const auto back = minmax_invert(s, column({0, 1, 1.2}));
  CHECK(back.values()(0, 0) == -3.0);
  CHECK(back.values()(1, 0) == 7.0);
  CHECK(back.values()(2, 0) == doctest::Approx(9.0));  // not clamped
}

TEST_CASE("minmax round trip is the identity on random matrices") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto d = random_matrix(200, 4, seed);
    const auto s = minmax_fit(d);
    const auto back = minmax_invert(s, minmax_apply(s, d));
    CHECK((back.values() - d.values()).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + d.values().cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("minmax_apply rejects schema mismatch") {
  const auto s = minmax_fit(column({1, 2}, "a"));
  CHECK_THROWS_AS(minmax_apply(s, column({1, 2}, "b")), SchemaError);
}

TEST_CASE("scaling spec JSON round trip") {
  const auto d = random_matrix(20, 3, 9);
  const auto s = minmax_fit(d);
  const auto back = scaling_from_json(to_json(s));
  REQUIRE(back.columns == s.columns);
  for (std::size_t j = 0; j < s.ranges.size(); ++j) {
    CHECK(back.ranges[j].min == s.ranges[j].min);
    CHECK(back.ranges[j].max == s.ranges[j].max);
  }
}

TEST_CASE("split sizes follow rounded fractions with remainder to training") {
  const auto d = random_matrix(10000, 2, 1);
  const auto s = split(d, SplitSpec{0.7, 0.15, 0.15, 4});
  CHECK(s.train.rows() == 7000);
  CHECK(s.validation.rows() == 1500);
  REQUIRE(s.test.has_value());
  CHECK(s.test->rows() == 1500);

  const auto two = split(random_matrix(1279, 2, 2), SplitSpec{0.7, 0.3, 0.0, 4});
  CHECK(two.train.rows() == 895);
  CHECK(two.validation.rows() == 384);
  CHECK_FALSE(two.test.has_value());
}

TEST_CASE("split is a seeded partition") {
  Eigen::MatrixXd ids(10, 1);
  for (int i = 0; i < 10; ++i) ids(i, 0) = i;
  const DataMatrix d({"id"}, ids);
  auto order = [&](std::uint64_t seed) {
    const auto s = split(d, SplitSpec{0.7, 0.15, 0.15, seed});
    std::vector<double> all = first_column(s.train);
    for (double v : first_column(s.validation)) all.push_back(v);
    for (double v : first_column(*s.test)) all.push_back(v);
    // round(1.5) = 2 for both held-out parts; training keeps the remaining 6.
    CHECK(s.train.rows() == 6);
    CHECK(s.validation.rows() == 2);
    CHECK(s.test->rows() == 2);
    return all;
  };
  const auto a = order(1), b = order(2), a2 = order(1);
  CHECK(a == a2);
  CHECK(a != b);
  std::set<double> seen(a.begin(), a.end());
  CHECK(seen.size() == 10);
}

TEST_CASE("split rejects invalid fractions") {
  const auto d = random_matrix(10, 1, 0);
  CHECK_THROWS_AS(split(d, SplitSpec{0.7, 0.2, 0.2, 0}), UsageError);
  CHECK_THROWS_AS(split(d, SplitSpec{0.0, 0.5, 0.5, 0}), UsageError);
  CHECK_THROWS_AS(split(random_matrix(2, 1, 0), SplitSpec{}), SchemaError);
}

TEST_CASE("uniform_sample stays in the box and is seeded") {
  const auto d = uniform_sample({{0.0, 8.0}, {0.0, 6.0}}, 10000, 11);
  CHECK(d.columns() == std::vector<std::string>{"x0", "x1"});
  CHECK(d.values().col(0).minCoeff() >= 0.0);
  CHECK(d.values().col(0).maxCoeff() <= 8.0);
  CHECK(d.values().col(1).minCoeff() >= 0.0);
  CHECK(d.values().col(1).maxCoeff() <= 6.0);
  CHECK(uniform_sample({{0.0, 8.0}}, 50, 11).values() == uniform_sample({{0.0, 8.0}}, 50, 11).values());

  const auto flat = uniform_sample({{3.0, 3.0}}, 100, 1);
  CHECK((flat.values().array() == 3.0).all());

  // Sample mean of U[0,1]; standard error 1/sqrt(12 n) ~ 0.0029.
  const auto u = uniform_sample({{0.0, 1.0}}, 10000, 5);
  CHECK(std::abs(u.values().mean() - 0.5) <= 0.02);

  CHECK_THROWS_AS(uniform_sample({{1.0, 0.0}}, 10, 0), UsageError);
  CHECK_THROWS_AS(uniform_sample({{0.0, 1.0}}, 0, 0), UsageError);
}

TEST_CASE("r_squared and rmse against hand-computed values") {
  Eigen::VectorXd y(3), yhat(3);
  y << 1, 2, 3;
  yhat << 1, 2, 4;
  // SSE = 1, SST = 2.
  CHECK(r_squared(y, yhat) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(r_squared(y, y) == 1.0);
  CHECK(r_squared(y, Eigen::VectorXd::Constant(3, 2.0)) == 0.0);

  Eigen::VectorXd z = Eigen::VectorXd::Zero(2), one = Eigen::VectorXd::Ones(2);
  CHECK(rmse(z, one) == 1.0);
  CHECK(rmse(y, y) == 0.0);
  CHECK(rmse(y, Eigen::VectorXd::Constant(3, 2.0)) == doctest::Approx(std::sqrt(2.0 / 3.0)).epsilon(1e-15));

  CHECK_THROWS_AS(r_squared(Eigen::VectorXd::Ones(3), y), NumericalError);
  CHECK_THROWS_AS(rmse(y, z), SchemaError);
}

TEST_CASE("metrics invariants on random data") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  for (int t = 0; t < 20; ++t) {
    Eigen::VectorXd y(30), yhat(30);
    for (int i = 0; i < 30; ++i) {
      y(i) = n(rng);
      yhat(i) = y(i) + 0.3 * n(rng);
    }
    const auto m = compute_metrics(y, yhat);
    CHECK(m.r_squared <= 1.0);
    CHECK(m.rmse >= 0.0);
  }
}

TEST_CASE("CSV round trip and rejection of malformed input") {
  const auto d = random_matrix(7, 3, 4);
  const auto back = parse_csv(format_csv(d));
  CHECK(back.columns() == d.columns());
  CHECK(back.values() == d.values());

  const auto path = std::filesystem::temp_directory_path() / "bilevel_test_dataset.csv";
  write_csv(path, d);
  CHECK(read_csv(path).values() == d.values());
  std::filesystem::remove(path);

  CHECK_THROWS_AS(parse_csv(""), SchemaError);
  CHECK_THROWS_AS(parse_csv("a,b\n1\n"), SchemaError);
  CHECK_THROWS_AS(parse_csv("a,b\n1,\n"), SchemaError);
  CHECK_THROWS_AS(parse_csv("a,b\n1,x\n"), SchemaError);
  CHECK_THROWS_AS(parse_csv("a,b\n1,nan\n"), SchemaError);
  CHECK_THROWS_AS(parse_csv("a,b\n"), SchemaError);
}

TEST_CASE("format_number reads back exactly") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 12345678.9, 5.0})
    CHECK(std::stod(format_number(v)) == v);
}
