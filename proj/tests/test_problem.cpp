#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "bilevel/error.hpp"
#include "bilevel/expression.hpp"
#include "bilevel/problem.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace bilevel;
using testutil::fd_gradient;
using testutil::rel_err;

namespace {

Eigen::VectorXd pt(std::initializer_list<double> v) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double e : v) x(k++) = e;
  return x;
}

double eval_row(const std::vector<Constraint>& rows, std::size_t k, const Eigen::VectorXd& x) {
  return rows.at(k).expr.eval(x);
}

// One expression of every node kind over three variables.
std::vector<Expression> zoo(std::shared_ptr<const TrainedModel> model) {
  const auto a = Expression::variable(0), b = Expression::variable(1), c = Expression::variable(2);
  Eigen::Matrix2d A;
  A << 2.0, 0.3, 0.3, 1.0;
  return {
      a * b - 3.0 * c + 1.0,
      pow(a - b, 3) + pow(c, 2),
      a / (1.5 + b * b),
      sqrt(2.0 + a * a + c * c),
      exp(0.3 * a) * sin(b) + cos(a * c),
      log(3.0 + a + b * c),
      pow(4.0 + a * a, -0.5),
      Expression::linear({0, 2}, {1.5, -2.0}, 0.25),
      Expression::quadratic_form(A, pt({0.1, -0.2}), {0, 2}),
      model_expression(model, {0, 1, 2}),
      model_expression(model, {2, 0, 1}, true) * a - exp(b),
  };
}

std::shared_ptr<const TrainedModel> zoo_model() {
  std::mt19937_64 rng(21);
  return testutil::make_model(testutil::random_net(rng, 3, 5), {"a", "b", "c"},
                              {{-1.0, 1.0}, {-2.0, 2.0}, {0.0, 3.0}}, {10.0, 30.0});
}

}  // namespace

TEST_CASE("benchmark values at the known solutions") {
  const auto cc = build_benchmark("cc");
  const auto p = pt({1.0, 3.0});
  CHECK(cc.upper_objective.eval(p) == 5.0);
  CHECK(cc.lower_objective.eval(p) == 4.0);
  REQUIRE(cc.lower_inequalities.size() == 3);
  CHECK(eval_row(cc.lower_inequalities, 0, p) == 0.0);   // -2x + y - 1
  CHECK(eval_row(cc.lower_inequalities, 1, p) == -5.0);  // x - 2y
  CHECK(eval_row(cc.lower_inequalities, 2, p) == -7.0);  // x + 2y - 14
  CHECK(cc.upper_indices() == std::vector<int>{0});
  CHECK(cc.lower_indices() == std::vector<int>{1});

  const auto cnc = build_benchmark("cnc");
  CHECK(cnc.upper_objective.eval(pt({1.0, 0.0})) == 0.0);
  CHECK(cnc.lower_objective.eval(pt({1.0, 0.0})) == 0.0);
  CHECK(cnc.lower_inequalities.empty());

  const auto ncnc = build_benchmark("ncnc");
  const auto q = pt({-0.4191, -1.0});
  CHECK(ncnc.upper_objective.eval(q) == doctest::Approx(0.4191 * 0.4191));
  CHECK(std::abs(ncnc.upper_objective.eval(q) - 0.1756) < 1e-4);
  CHECK(eval_row(ncnc.lower_inequalities, 0, q) == doctest::Approx(-0.9191));
  CHECK(eval_row(ncnc.upper_inequalities, 0, q) <= 1e-3);

  CHECK_THROWS_AS(build_benchmark("sc9"), UsageError);
}

TEST_CASE("expression derivative basics") {
  const auto x = Expression::variable(0), y = Expression::variable(1);
  const auto e = pow(x - 3.0, 2) + pow(y - 2.0, 2);
  CHECK(e.gradient(pt({3.0, 2.0})).isZero());
  for (double v : {-4.0, 0.0, 2.5}) CHECK(pow(x, 2).hessian(pt({v}))(0, 0) == 2.0);
  CHECK(e.support() == std::vector<int>{0, 1});
  CHECK(Expression(4.0).is_constant());
  CHECK(Expression(4.0).constant_value() == 4.0);
  CHECK_THROWS_AS(x.constant_value(), UsageError);
  CHECK_THROWS_AS(x.eval(Eigen::VectorXd()), SchemaError);
  CHECK_THROWS_AS(log(x).eval(pt({-1.0})), NumericalError);
  CHECK_THROWS_AS(x / Expression(0.0), NumericalError);
}

TEST_CASE("gradients and Hessians of every node kind match finite differences") {
  const auto model = zoo_model();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-0.9, 0.9);
  double worst_g = 0.0, worst_h = 0.0, worst_diff = 0.0;
  for (const auto& e : zoo(model)) {
    for (int t = 0; t < 20; ++t) {
      const Eigen::VectorXd x = pt({u(rng), u(rng), 1.0 + u(rng)});
      const auto f = [&](const Eigen::VectorXd& z) { return e.eval(z); };
      const Eigen::VectorXd g = e.gradient(x);
      worst_g = std::max(worst_g, rel_err(g, fd_gradient(f, x)));
      const Eigen::MatrixXd H = e.hessian(x);
      CHECK((H - H.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + H.cwiseAbs().maxCoeff()));
      for (int k = 0; k < 3; ++k) {
        const auto gk = [&](const Eigen::VectorXd& z) { return e.gradient(z)(k); };
        worst_h = std::max(worst_h, rel_err(H.col(k), fd_gradient(gk, x, 1e-5)));
        // Symbolic partial agrees with the propagated gradient.
        worst_diff = std::max(worst_diff, std::abs(e.diff(k).eval(x) - g(k)) / (1.0 + std::abs(g(k))));
      }
    }
  }
  CHECK(worst_g < 1e-6);
  CHECK(worst_h < 1e-5);
  CHECK(worst_diff < 1e-12);
}

TEST_CASE("second symbolic partials match the Hessian") {
  const auto model = zoo_model();
  const Eigen::VectorXd x = pt({0.2, -0.4, 1.3});
  for (const auto& e : zoo(model)) {
    const Eigen::MatrixXd H = e.hessian(x);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        CHECK(std::abs(e.diff(i).diff(j).eval(x) - H(i, j)) <= 1e-10 * (1.0 + std::abs(H(i, j))));
  }
}

TEST_CASE("local evaluation is restricted to the support") {
  const auto e = Expression::variable(4) * Expression::variable(1) + 2.0;
  CHECK(e.support() == std::vector<int>{1, 4});
  Eigen::VectorXd x = Eigen::VectorXd::Zero(5);
  x(1) = 3.0;
  x(4) = -2.0;
  const auto le = e.eval_local(x, 2);
  CHECK(le.value == -4.0);
  CHECK(le.gradient == pt({-2.0, 3.0}));
  CHECK(le.hessian(0, 1) == 1.0);
  CHECK(le.hessian(0, 0) == 0.0);
  CHECK(e.gradient(x)(0) == 0.0);
}

TEST_CASE("model expression applies input and output scaling") {
  const auto model = zoo_model();
  const Eigen::VectorXd x = pt({0.5, -1.0, 2.0});
  const auto e = model_expression(model, {0, 1, 2});
  CHECK(e.eval(x) == doctest::Approx(model->predict(x)).epsilon(1e-13));
  const auto scaled = model_expression(model, {0, 1, 2}, true);
  CHECK(scaled.eval(x) == doctest::Approx(forward(model->net, model->scale_inputs(x))).epsilon(1e-13));
  CHECK(e.eval(x) == doctest::Approx(10.0 + 20.0 * scaled.eval(x)).epsilon(1e-13));

  // Physical inputs as an affine function of other variables: phys = M z + c.
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(3, 2);
  M << 2.0, 0.0, 0.0, 1.0, 1.0, 1.0;
  const Eigen::VectorXd c = pt({0.1, 0.0, 1.0});
  const auto mapped = model_expression(model, {0, 1}, M, c);
  const Eigen::VectorXd z = pt({0.3, -0.6});
  CHECK(mapped.eval(z) == doctest::Approx(model->predict(M * z + c)).epsilon(1e-13));
  const auto f = [&](const Eigen::VectorXd& v) { return mapped.eval(v); };
  CHECK(rel_err(mapped.gradient(z), fd_gradient(f, z)) < 1e-6);

  CHECK_THROWS_AS(model_expression(model, {0, 1}), SchemaError);
}

TEST_CASE("brute-force oracle on the convex benchmark") {
  const auto p = build_benchmark("cc");
  const auto o = brute_force_bilevel_oracle(p, 2001, 4);
  CHECK(std::abs(o.F_star - 5.0) <= 0.01);
  CHECK(std::abs(o.x_star(0) - 1.0) <= 0.01);
  CHECK(std::abs(o.y_star(0) - 3.0) <= 0.01);
  CHECK(o.grid_resolution == 2001);
  CHECK(oracle_lower_optimal(p, o.point, 2001));
  for (const auto& g : p.lower_inequalities) CHECK(g.expr.eval(o.point) <= 1e-6);
}

TEST_CASE("brute-force oracle breaks follower ties for the leader") {
  const auto p = build_benchmark("cnc");
  const auto o = brute_force_bilevel_oracle(p, 2001, 4);
  CHECK(o.F_star <= 0.001);
  CHECK(std::abs(o.x_star(0) - 1.0) <= 0.01);
  CHECK(std::abs(o.y_star(0)) <= 1e-12);
  CHECK(oracle_lower_optimal(p, o.point, 2001));
  // At x = 1 both ends solve the follower problem; y = 1 is also lower optimal.
  CHECK(oracle_lower_optimal(p, pt({1.0, 1.0}), 2001));
  CHECK(p.upper_objective.eval(pt({1.0, 1.0})) > o.F_star);
}

TEST_CASE("brute-force oracle on the nonconvex benchmark") {
  // For x < 0.5 the follower picks y = -1; the leader's constraint becomes
  // 9x^2 - x - 2 >= 0 whose negative root minimises x^2.
  const double x_exact = (1.0 - std::sqrt(73.0)) / 18.0;
  const auto p = build_benchmark("ncnc");
  const auto o = brute_force_bilevel_oracle(p, 2001, 4);
  CHECK(std::abs(o.x_star(0) - x_exact) <= 0.001);
  CHECK(std::abs(o.F_star - x_exact * x_exact) <= 0.001);
  CHECK(std::abs(o.F_star - 0.1756) <= 0.001);
  CHECK(o.y_star(0) == -1.0);
  CHECK(oracle_lower_optimal(p, o.point, 2001));
}

TEST_CASE("oracle argument checks") {
  CHECK_THROWS_AS(brute_force_bilevel_oracle(build_benchmark("cc"), 50), UsageError);
  CHECK_FALSE(oracle_lower_optimal(build_benchmark("cc"), pt({1.0, 1.0}), 201));
}

TEST_CASE("benchmark data columns agree with the analytic objectives") {
  const auto d = benchmark_data("ncnc", 50, 3);
  CHECK(d.columns() == std::vector<std::string>{"x", "y", "F", "f"});
  const auto p = build_benchmark("ncnc");
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    const Eigen::VectorXd z = d.values().row(i).head(2).transpose();
    CHECK(d.values()(i, 2) == p.upper_objective.eval(z));
    CHECK(d.values()(i, 3) == p.lower_objective.eval(z));
    CHECK(z(0) >= -1.0);
    CHECK(z(0) <= 1.0);
  }
}

TEST_CASE("prefix parser") {
  const std::vector<std::string> names{"x", "y"};
  const auto e = parse_expression("(+ (^ (- x 3) 2) (* 2 y))", names);
  CHECK(e.eval(pt({1.0, 4.0})) == 12.0);
  CHECK(parse_expression("(- x)", names).eval(pt({2.0, 0.0})) == -2.0);
  CHECK(parse_expression("(/ x y)", names).eval(pt({3.0, 4.0})) == 0.75);
  CHECK(parse_expression("(sqrt (exp (log 16)))", names).eval(pt({0.0, 0.0})) == doctest::Approx(4.0));
  CHECK(parse_expression("-2.5e-1", names).eval(pt({0.0, 0.0})) == -0.25);
  CHECK(parse_expression("(+ x y 1)", names).eval(pt({1.0, 2.0})) == 4.0);

  CHECK_THROWS_AS(parse_expression("(+ x z)", names), SchemaError);
  CHECK_THROWS_AS(parse_expression("(+ x y", names), SchemaError);
  CHECK_THROWS_AS(parse_expression("(foo x)", names), SchemaError);
  CHECK_THROWS_AS(parse_expression("(^ x y)", names), SchemaError);
  CHECK_THROWS_AS(parse_expression("x y", names), SchemaError);
  CHECK_THROWS_AS(parse_expression("(surrogate \"m.json\" x)", names), UsageError);
}

TEST_CASE("problem JSON reproduces the convex benchmark") {
  const nlohmann::json j = {
      {"name", "cc-file"},
      {"variables",
       {{{"name", "x"}, {"role", "upper"}, {"lo", 0}, {"hi", 8}}, {{"name", "y"}, {"role", "lower"}, {"lo", 0}, {"hi", 6}}}},
      {"upper", {{"objective", "(+ (^ (- x 3) 2) (^ (- y 2) 2))"}}},
      {"lower",
       {{"objective", "(^ (- y 5) 2)"},
        {"inequalities", {"(- (+ (* -2 x) y) 1)", "(- x (* 2 y))", {{"label", "cap"}, {"expr", "(- (+ x (* 2 y)) 14)"}}}}}}};
  const auto p = problem_from_json(j);
  const auto ref = build_benchmark("cc");
  CHECK(p.name == "cc-file");
  CHECK(p.lower_inequalities.size() == 3);
  CHECK(p.lower_inequalities[2].label == "cap");
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 6.0);
  for (int t = 0; t < 20; ++t) {
    const auto z = pt({u(rng), u(rng)});
    CHECK(p.upper_objective.eval(z) == doctest::Approx(ref.upper_objective.eval(z)));
    for (std::size_t k = 0; k < 3; ++k)
      CHECK(p.lower_inequalities[k].expr.eval(z) == doctest::Approx(ref.lower_inequalities[k].expr.eval(z)));
  }

  const auto path = std::filesystem::temp_directory_path() / "bilevel_test_problem.json";
  std::ofstream(path) << j.dump();
  CHECK(load_problem(path).variables.size() == 2);
  std::filesystem::remove(path);
}

TEST_CASE("problem JSON resolves surrogate references") {
  const auto model = zoo_model();
  int calls = 0;
  const ModelLoader loader = [&](const std::string& file) {
    CHECK(file == "m.json");
    ++calls;
    return model;
  };
  const nlohmann::json j = {
      {"variables",
       {{{"name", "a"}, {"role", "upper"}, {"lo", -1}, {"hi", 1}},
        {{"name", "b"}, {"lo", -2}, {"hi", 2}},
        {{"name", "c"}, {"lo", 0}, {"hi", 3}}}},
      {"upper", {{"objective", "(surrogate \"m.json\")"}, {"sense", "max"}}},
      {"lower", {{"objective", "(surrogate \"m.json\" a b c)"}}},
      {"shared", {"b"}}};
  const auto p = problem_from_json(j, loader);
  CHECK(calls == 2);
  CHECK(p.sense == Sense::Maximize);
  CHECK(p.shared_map == std::vector<int>{1});
  const auto z = pt({0.2, 0.5, 1.0});
  CHECK(p.upper_objective.eval(z) == doctest::Approx(model->predict(z)));
}

TEST_CASE("problem validation") {
  const nlohmann::json base = {{"variables", {{{"name", "x"}, {"role", "upper"}, {"lo", 0}, {"hi", 1}}}},
                               {"upper", {{"objective", "x"}}},
                               {"lower", {{"objective", "x"}}}};
  CHECK_THROWS_AS(problem_from_json(base), SchemaError);  // no lower variable
  auto j = base;
  j["variables"].push_back({{"name", "y"}, {"lo", 2}, {"hi", 1}});
  CHECK_THROWS_AS(problem_from_json(j), SchemaError);
  j = base;
  j["variables"].push_back({{"name", "y"}, {"role", "middle"}, {"lo", 0}, {"hi", 1}});
  CHECK_THROWS_AS(problem_from_json(j), SchemaError);
  j = base;
  j["variables"].push_back({{"name", "y"}, {"lo", 0}, {"hi", 1}});
  j["shared"] = {"x"};
  CHECK_THROWS_AS(problem_from_json(j), SchemaError);
  j.erase("shared");
  j["upper"]["sense"] = "up";
  CHECK_THROWS_AS(problem_from_json(j), SchemaError);
  CHECK_THROWS_AS(load_problem("/nonexistent/problem.json"), SchemaError);
}
