#pragma once

#include <Eigen/Dense>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "bilevel/surrogate.hpp"

namespace testutil {

inline bilevel::ShallowNet random_net(std::mt19937_64& rng, Eigen::Index in, Eigen::Index hidden, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  bilevel::ShallowNet net;
  net.W1 = Eigen::MatrixXd::NullaryExpr(hidden, in, [&] { return n(rng); });
  net.b1 = Eigen::VectorXd::NullaryExpr(hidden, [&] { return n(rng); });
  net.w2 = Eigen::VectorXd::NullaryExpr(hidden, [&] { return n(rng); });
  net.b2 = n(rng);
  return net;
}

/// Wraps a network with explicit input and output ranges.
inline std::shared_ptr<bilevel::TrainedModel> make_model(bilevel::ShallowNet net, std::vector<std::string> names,
                                                         const std::vector<bilevel::ColumnRange>& in_ranges,
                                                         bilevel::ColumnRange out_range, std::string target = "t") {
  auto m = std::make_shared<bilevel::TrainedModel>();
  m->net = std::move(net);
  m->input_names = names;
  m->target_name = target;
  m->input_scaling.columns = std::move(names);
  m->input_scaling.ranges = in_ranges;
  m->output_scaling.columns = {std::move(target)};
  m->output_scaling.ranges = {out_range};
  return m;
}

/// Central-difference gradient of any callable.
template <class F>
Eigen::VectorXd fd_gradient(F&& f, const Eigen::VectorXd& x, double h = 1e-6) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    Eigen::VectorXd p = x, m = x;
    p(k) += h;
    m(k) -= h;
    g(k) = (f(p) - f(m)) / (2 * h);
  }
  return g;
}

inline double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return ((a - b).array().abs() / (1.0 + b.array().abs())).maxCoeff();
}

}  // namespace testutil
