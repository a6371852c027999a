#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <vector>

#include "refage/estimators/blr.hpp"

namespace refage::testing {

using est::BlrModel;

struct BlrInstance {
  BlrModel model;
  std::vector<double> xs;
  double vs;
  std::vector<std::vector<double>> phis;
  std::vector<double> vh, y;
};

BlrInstance random_blr_instance(int d, int n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> u(0.2, 2.0);
  BlrInstance in;
  for (int k = 0; k <= d; ++k) {
    in.model.theta_global.push_back(nd(rng) * 3);
    in.model.log_s2.push_back(std::log(u(rng)));
  }
  in.model.log_gamma1 = std::log(u(rng));
  in.model.log_gamma2 = std::log(u(rng));
  auto vec = [&] {
    std::vector<double> v;
    for (int k = 0; k < d; ++k) v.push_back(nd(rng));
    v.push_back(1.0);
    return v;
  };
  in.xs = vec();
  in.vs = u(rng);
  for (int j = 0; j < n; ++j) {
    in.phis.push_back(vec());
    in.vh.push_back(u(rng));
    in.y.push_back(40 + 10 * nd(rng));
  }
  return in;
}

// Naive oracle: posterior over the personal weights by explicit matrix inversion.
Prediction naive_blr(const BlrInstance& in) {
  const auto D = static_cast<Eigen::Index>(in.xs.size());
  Eigen::MatrixXd S0 = Eigen::MatrixXd::Zero(D, D);
  Eigen::VectorXd m0(D), x(D);
  for (Eigen::Index k = 0; k < D; ++k) {
    S0(k, k) = std::exp(in.model.log_s2[k]);
    m0(k) = in.model.theta_global[k];
    x(k) = in.xs[k];
  }
  Eigen::MatrixXd prec = S0.inverse();
  Eigen::VectorXd b = prec * m0;
  const double g1 = std::exp(in.model.log_gamma1), g2 = std::exp(in.model.log_gamma2);
  for (std::size_t j = 0; j < in.y.size(); ++j) {
    Eigen::VectorXd p(D);
    for (Eigen::Index k = 0; k < D; ++k) p(k) = in.phis[j][k];
    const double lam = g1 * in.vh[j] + g2;
    prec += p * p.transpose() / lam;
    b += p * in.y[j] / lam;
  }
  const Eigen::MatrixXd cov = prec.inverse();
  return {x.dot(cov * b), x.dot(cov * x) + g1 * in.vs + g2};
}

}  // namespace refage::testing
