#include "refage/estimators/blr.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "refage/core/errors.hpp"
#include "refage/numcore/optim.hpp"

namespace refage::est {

using json = nlohmann::json;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kDualJitter = 1e-8;

// Bias term first so the N=0 path reproduces global_mean bit for bit.
double dot_aug(std::span<const double> w, std::span<const double> phi_aug) {
  const std::size_t d = w.size() - 1;
  double s = w[d] * phi_aug[d];
  for (std::size_t k = 0; k < d; ++k) s += w[k] * phi_aug[k];
  return s;
}

MatrixXd design(std::span<const std::vector<double>> rows, std::size_t width) {
  MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != width) throw std::invalid_argument("BLR feature width mismatch");
    for (std::size_t k = 0; k < width; ++k) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
  }
  return m;
}

}  // namespace

std::vector<double> augment(std::span<const float> phi) {
  std::vector<double> out(phi.begin(), phi.end());
  out.push_back(1.0);
  return out;
}

json to_json(const BlrFitConfig& c) {
  return {{"iterations", c.iterations},         {"lr", c.lr},
          {"init_log_s2", c.init_log_s2},       {"init_log_gamma1", c.init_log_gamma1},
          {"init_log_gamma2", c.init_log_gamma2}, {"identities", c.identities},
          {"validation_fraction", c.validation_fraction}, {"seed", c.seed}};
}

BlrFitConfig blr_fit_config_from_json(const json& j) {
  BlrFitConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "iterations") c.iterations = value.get<int>();
      else if (key == "lr") c.lr = value.get<double>();
      else if (key == "init_log_s2") c.init_log_s2 = value.get<double>();
      else if (key == "init_log_gamma1") c.init_log_gamma1 = value.get<double>();
      else if (key == "init_log_gamma2") c.init_log_gamma2 = value.get<double>();
      else if (key == "identities") c.identities = value.get<std::string>();
      else if (key == "validation_fraction") c.validation_fraction = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("/" + key, "unknown key");
    } catch (const json::exception& e) {
      throw ConfigError("/" + key, e.what());
    }
  }
  if (c.iterations < 1) throw ConfigError("/iterations", "must be >= 1");
  if (!(c.lr > 0)) throw ConfigError("/lr", "must be > 0");
  if (c.identities != "validation" && c.identities != "all") {
    throw ConfigError("/identities", "expected \"validation\" or \"all\"");
  }
  return c;
}

std::vector<BlrGroup> blr_groups(const GlobalHead& head, const Dataset& ds, std::span<const std::int64_t> identities) {
  const auto index = IdentityIndex::build(ds);
  std::vector<BlrGroup> groups;
  for (std::int64_t id : identities) {
    auto it = index.rows_of.find(id);
    if (it == index.rows_of.end() || it->second.empty()) continue;
    BlrGroup g;
    for (std::size_t row : it->second) {
      const auto phi = ds.feature(ds.records[row].feature_row);
      g.phi.push_back(augment(phi));
      g.y.push_back(ds.records[row].age_years);
      g.vhat.push_back(global_variance(head, phi));
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

double blr_log_marginal(const BlrModel& model, std::span<const BlrGroup> groups, BlrGradient* grad) {
  const std::size_t width = model.theta_global.size();
  VectorXd s2(static_cast<Eigen::Index>(width));
  for (std::size_t k = 0; k < width; ++k) s2(static_cast<Eigen::Index>(k)) = std::exp(model.log_s2[k]);
  const double g1 = std::exp(model.log_gamma1);
  const double g2 = std::exp(model.log_gamma2);
  const VectorXd theta = Eigen::Map<const VectorXd>(model.theta_global.data(), static_cast<Eigen::Index>(width));
  if (grad) {
    grad->d_log_s2.assign(width, 0.0);
    grad->d_log_gamma1 = 0.0;
    grad->d_log_gamma2 = 0.0;
  }
  double total = 0.0;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    const auto n = static_cast<Eigen::Index>(g.y.size());
    if (n == 0) continue;
    const MatrixXd phi = design(g.phi, width);
    const VectorXd vhat = Eigen::Map<const VectorXd>(g.vhat.data(), n);
    const VectorXd r = Eigen::Map<const VectorXd>(g.y.data(), n) - phi * theta;
    MatrixXd K = phi * s2.asDiagonal() * phi.transpose();
    K.diagonal().array() += g1 * vhat.array() + g2;
    Eigen::LLT<MatrixXd> llt(K);
    if (llt.info() != Eigen::Success) {
      throw NumericError("blr_log_marginal: Cholesky failed for identity group " + std::to_string(gi));
    }
    const VectorXd alpha = llt.solve(r);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    total += -0.5 * r.dot(alpha) - 0.5 * logdet - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
    if (grad) {
      const MatrixXd kinv = llt.solve(MatrixXd::Identity(n, n));
      const MatrixXd G = 0.5 * (alpha * alpha.transpose() - kinv);
      const MatrixXd gphi = G * phi;
      const VectorXd quad = (phi.array() * gphi.array()).colwise().sum().transpose();
      for (std::size_t k = 0; k < width; ++k) {
        grad->d_log_s2[k] += s2(static_cast<Eigen::Index>(k)) * quad(static_cast<Eigen::Index>(k));
      }
      grad->d_log_gamma1 += g1 * G.diagonal().dot(vhat);
      grad->d_log_gamma2 += g2 * G.diagonal().sum();
    }
  }
  return total;
}

BlrModel blr_fit_groups(const GlobalHead& head, std::span<const BlrGroup> groups, const BlrFitConfig& cfg,
                        BlrFitLog* log) {
  if (head.theta_mu.empty()) throw std::invalid_argument("blr_fit: untrained global head");
  BlrModel model;
  model.theta_global = head.theta_mu;
  model.log_s2.assign(head.theta_mu.size(), cfg.init_log_s2);
  model.log_gamma1 = cfg.init_log_gamma1;
  model.log_gamma2 = cfg.init_log_gamma2;
  if (groups.empty()) return model;

  const std::size_t width = model.log_s2.size();
  num::Buffers<double> params{model.log_s2, {model.log_gamma1, model.log_gamma2}};
  auto state = num::AdamState<double>::zeros_like(params);
  num::Buffers<double> grads = params;
  num::AdamWConfig opt;
  BlrGradient g;
  for (int it = 0; it < cfg.iterations; ++it) {
    model.log_s2 = params[0];
    model.log_gamma1 = params[1][0];
    model.log_gamma2 = params[1][1];
    const double obj = blr_log_marginal(model, groups, &g);
    if (!std::isfinite(obj)) {
      std::ostringstream os;
      os << "blr_fit: non-finite objective at iteration " << it << " (log_gamma1=" << model.log_gamma1
         << ", log_gamma2=" << model.log_gamma2 << ")";
      throw NumericError(os.str());
    }
    if (log) log->objective.push_back(obj);
    // Ascent on the objective, expressed as descent on its negative.
    for (std::size_t k = 0; k < width; ++k) grads[0][k] = -g.d_log_s2[k];
    grads[1][0] = -g.d_log_gamma1;
    grads[1][1] = -g.d_log_gamma2;
    opt.lr = cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * it / cfg.iterations));
    num::adamw_step(params, grads, state, opt);
  }
  model.log_s2 = params[0];
  model.log_gamma1 = params[1][0];
  model.log_gamma2 = params[1][1];
  return model;
}

BlrModel blr_fit(const GlobalHead& head, const Dataset& train, const BlrFitConfig& cfg, BlrFitLog* log) {
  std::vector<std::int64_t> ids;
  if (cfg.identities == "all") {
    ids = IdentityIndex::build(train).identities;
  } else {
    ids = validation_identities(train, cfg.validation_fraction, cfg.seed);
  }
  const auto groups = blr_groups(head, train, ids);
  return blr_fit_groups(head, groups, cfg, log);
}

Prediction blr_predict(const BlrModel& model, std::span<const double> target_phi_aug, double target_vhat,
                       std::span<const std::vector<double>> ref_phi_aug, std::span<const double> ref_vhat,
                       std::span<const double> ref_y) {
  return blr_predict(model, target_phi_aug, target_vhat, ref_phi_aug, ref_vhat, ref_y, BlrForm::kAuto);
}

Prediction blr_predict(const BlrModel& model, std::span<const double> target_phi_aug, double target_vhat,
                       std::span<const std::vector<double>> ref_phi_aug, std::span<const double> ref_vhat,
                       std::span<const double> ref_y, BlrForm form) {
  const std::size_t width = model.theta_global.size();
  if (target_phi_aug.size() != width) throw std::invalid_argument("blr_predict: target dimension mismatch");
  if (ref_phi_aug.size() != ref_y.size() || ref_vhat.size() != ref_y.size()) {
    throw std::invalid_argument("blr_predict: reference arrays differ in length");
  }
  const double g1 = std::exp(model.log_gamma1);
  const double g2 = std::exp(model.log_gamma2);
  const double noise = g1 * target_vhat + g2;
  const auto D = static_cast<Eigen::Index>(width);
  const auto n = static_cast<Eigen::Index>(ref_y.size());
  VectorXd s2(D);
  for (Eigen::Index k = 0; k < D; ++k) s2(k) = std::exp(model.log_s2[static_cast<std::size_t>(k)]);
  const VectorXd xs = Eigen::Map<const VectorXd>(target_phi_aug.data(), D);
  const VectorXd theta = Eigen::Map<const VectorXd>(model.theta_global.data(), D);

  if (n == 0) {
    const double prior_var = (xs.array() * xs.array() * s2.array()).sum();
    return {dot_aug(model.theta_global, target_phi_aug), prior_var + noise};
  }

  const MatrixXd phi = design(ref_phi_aug, width);
  const VectorXd vhat = Eigen::Map<const VectorXd>(ref_vhat.data(), n);
  const VectorXd lambda = (g1 * vhat.array() + g2).matrix();
  const VectorXd y = Eigen::Map<const VectorXd>(ref_y.data(), n);

  if (form == BlrForm::kAuto) form = n < D ? BlrForm::kDual : BlrForm::kPrimal;
  Prediction p;
  if (form == BlrForm::kDual) {
    MatrixXd K = phi * s2.asDiagonal() * phi.transpose();
    K.diagonal() += lambda;
    K.diagonal().array() += kDualJitter;
    Eigen::LLT<MatrixXd> llt(K);
    if (llt.info() != Eigen::Success) throw NumericError("blr_predict: dual Cholesky failed");
    const VectorXd r = y - phi * theta;
    const VectorXd kstar = phi * (s2.array() * xs.array()).matrix();
    const VectorXd alpha = llt.solve(r);
    const VectorXd beta = llt.solve(kstar);
    p.mean = dot_aug(model.theta_global, target_phi_aug) + kstar.dot(alpha);
    p.variance = (xs.array() * xs.array() * s2.array()).sum() - kstar.dot(beta) + noise;
  } else {
    const VectorXd inv_lambda = lambda.cwiseInverse();
    MatrixXd A = phi.transpose() * inv_lambda.asDiagonal() * phi;
    A.diagonal() += s2.cwiseInverse();
    Eigen::LLT<MatrixXd> llt(A);
    if (llt.info() != Eigen::Success) throw NumericError("blr_predict: primal Cholesky failed");
    const VectorXd b = theta.cwiseQuotient(s2) + phi.transpose() * inv_lambda.cwiseProduct(y);
    const VectorXd mu_post = llt.solve(b);
    p.mean = xs.dot(mu_post);
    p.variance = xs.dot(llt.solve(xs)) + noise;
  }
  if (!std::isfinite(p.mean) || !std::isfinite(p.variance) || p.variance <= 0.0) {
    throw NumericError("blr_predict: non-finite or non-positive predictive moments");
  }
  p.variance = std::max(p.variance, kVarianceFloor);
  return p;
}

json to_json(const BlrModel& m) {
  return {{"theta_global", m.theta_global},
          {"log_s2", m.log_s2},
          {"log_gamma1", m.log_gamma1},
          {"log_gamma2", m.log_gamma2}};
}

BlrModel blr_model_from_json(const json& j) {
  BlrModel m;
  m.theta_global = j.at("theta_global").get<std::vector<double>>();
  m.log_s2 = j.at("log_s2").get<std::vector<double>>();
  m.log_gamma1 = j.at("log_gamma1").get<double>();
  m.log_gamma2 = j.at("log_gamma2").get<double>();
  if (m.log_s2.size() != m.theta_global.size()) throw std::invalid_argument("BLR model sizes differ");
  return m;
}

Prediction BlrEstimator::predict(const Query& q) const {
  const Dataset& ds = *q.data;
  const auto target_phi = ds.feature(ds.records[q.target_row].feature_row);
  const auto xs = augment(target_phi);
  const double vs = global_variance(head_, target_phi);
  std::vector<std::vector<double>> phis;
  std::vector<double> vh, ys;
  phis.reserve(q.context.size());
  for (const auto& e : q.context) {
    const auto phi = ds.feature(ds.records[e.row].feature_row);
    phis.push_back(augment(phi));
    vh.push_back(global_variance(head_, phi));
    ys.push_back(e.age);
  }
  return blr_predict(model_, xs, vs, phis, vh, ys);
}

}  // namespace refage::est
