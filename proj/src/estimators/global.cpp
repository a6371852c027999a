#include "refage/estimators/global.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "refage/core/errors.hpp"
#include "refage/core/rng.hpp"
#include "refage/numcore/optim.hpp"

namespace refage::est {

using json = nlohmann::json;

json to_json(const GlobalFitConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"ema_decay", c.ema_decay},
          {"validation_fraction", c.validation_fraction},
          {"patience", c.patience},
          {"ridge_init", c.ridge_init},
          {"seed", c.seed}};
}

GlobalFitConfig global_fit_config_from_json(const json& j) {
  GlobalFitConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "lr") c.lr = value.get<double>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else if (key == "ema_decay") c.ema_decay = value.get<double>();
      else if (key == "validation_fraction") c.validation_fraction = value.get<double>();
      else if (key == "patience") c.patience = value.get<int>();
      else if (key == "ridge_init") c.ridge_init = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("/" + key, "unknown key");
    } catch (const json::exception& e) {
      throw ConfigError("/" + key, e.what());
    }
  }
  if (c.epochs < 1) throw ConfigError("/epochs", "must be >= 1");
  if (c.batch_size < 1) throw ConfigError("/batch_size", "must be >= 1");
  if (!(c.lr > 0)) throw ConfigError("/lr", "must be > 0");
  if (c.validation_fraction < 0 || c.validation_fraction >= 1) {
    throw ConfigError("/validation_fraction", "must be in [0, 1)");
  }
  return c;
}

std::vector<std::int64_t> validation_identities(const Dataset& ds, double fraction, std::uint64_t seed) {
  const auto index = IdentityIndex::build(ds);
  std::vector<std::int64_t> out;
  for (std::int64_t id : index.identities) {
    Rng rng = make_stream(seed, Stream::kGlobalFit, {static_cast<std::uint64_t>(id)});
    if (uniform01(rng) < fraction) out.push_back(id);
  }
  return out;
}

namespace {

double dot_aug(std::span<const double> w, std::span<const float> phi) {
  double s = w.back();
  for (std::size_t k = 0; k < phi.size(); ++k) s += w[k] * static_cast<double>(phi[k]);
  return s;
}

struct Standardized {
  std::size_t d = 0;
  std::vector<double> mean, inv_sd;
  std::vector<double> x;  // rows x d
  std::vector<double> y;
};

// Per-row NLL terms and gradients for parameters laid out as
// [w_mu (d), b_mu] and [w_lv (d), b_lv].
double nll_and_grad(const Standardized& s, std::span<const std::size_t> rows, const num::Buffers<double>& p,
                    num::Buffers<double>* g) {
  const std::size_t d = s.d;
  double total = 0.0;
  if (g) {
    for (auto& v : *g) std::fill(v.begin(), v.end(), 0.0);
  }
  for (std::size_t r : rows) {
    const double* x = s.x.data() + r * d;
    double mu = p[0][d], lv = p[1][d];
    for (std::size_t k = 0; k < d; ++k) {
      mu += p[0][k] * x[k];
      lv += p[1][k] * x[k];
    }
    const double e = std::exp(lv);
    const double s2 = std::max(e, kVarianceFloor);
    const double res = s.y[r] - mu;
    total += res * res / (2.0 * s2) + 0.5 * std::log(s2);
    if (g) {
      const double dmu = -res / s2;
      const double dlv = e > kVarianceFloor ? 0.5 - res * res / (2.0 * s2) : 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        (*g)[0][k] += dmu * x[k];
        (*g)[1][k] += dlv * x[k];
      }
      (*g)[0][d] += dmu;
      (*g)[1][d] += dlv;
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(rows.size(), 1));
  if (g) {
    for (auto& v : *g) {
      for (double& x : v) x /= n;
    }
  }
  return total / n;
}

GlobalHead fold(const Standardized& s, const num::Buffers<double>& p) {
  const std::size_t d = s.d;
  GlobalHead h;
  h.theta_mu.assign(d + 1, 0.0);
  h.theta_logvar.assign(d + 1, 0.0);
  double bmu = p[0][d], blv = p[1][d];
  for (std::size_t k = 0; k < d; ++k) {
    h.theta_mu[k] = p[0][k] * s.inv_sd[k];
    h.theta_logvar[k] = p[1][k] * s.inv_sd[k];
    bmu -= h.theta_mu[k] * s.mean[k];
    blv -= h.theta_logvar[k] * s.mean[k];
  }
  h.theta_mu[d] = bmu;
  h.theta_logvar[d] = blv;
  return h;
}

}  // namespace

GlobalHead global_fit(const Dataset& train, const GlobalFitConfig& cfg, GlobalFitLog* log) {
  if (train.size() == 0) throw std::invalid_argument("global_fit: empty dataset");
  const std::size_t n = train.size();
  const std::size_t d = train.dim();

  Standardized s;
  s.d = d;
  s.mean.assign(d, 0.0);
  s.inv_sd.assign(d, 1.0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto phi = train.feature(train.records[r].feature_row);
    for (std::size_t k = 0; k < d; ++k) s.mean[k] += phi[k];
  }
  for (double& m : s.mean) m /= static_cast<double>(n);
  std::vector<double> var(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto phi = train.feature(train.records[r].feature_row);
    for (std::size_t k = 0; k < d; ++k) var[k] += (phi[k] - s.mean[k]) * (phi[k] - s.mean[k]);
  }
  for (std::size_t k = 0; k < d; ++k) {
    const double sd = std::sqrt(var[k] / static_cast<double>(n));
    s.inv_sd[k] = sd > 1e-12 ? 1.0 / sd : 1.0;
  }
  s.x.resize(n * d);
  s.y.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto phi = train.feature(train.records[r].feature_row);
    for (std::size_t k = 0; k < d; ++k) s.x[r * d + k] = (phi[k] - s.mean[k]) * s.inv_sd[k];
    s.y[r] = train.records[r].age_years;
  }

  const auto val_ids = validation_identities(train, cfg.validation_fraction, cfg.seed);
  std::vector<std::size_t> fit_rows, val_rows;
  for (std::size_t r = 0; r < n; ++r) {
    const bool is_val = std::binary_search(val_ids.begin(), val_ids.end(), train.records[r].identity_id);
    (is_val ? val_rows : fit_rows).push_back(r);
  }
  if (fit_rows.empty()) std::swap(fit_rows, val_rows);
  if (val_rows.empty()) val_rows = fit_rows;

  const double ymean = std::accumulate(s.y.begin(), s.y.end(), 0.0) / static_cast<double>(n);
  double yvar = 0.0;
  for (double y : s.y) yvar += (y - ymean) * (y - ymean);
  yvar = std::max(yvar / static_cast<double>(n), 1.0);

  num::Buffers<double> params{std::vector<double>(d + 1, 0.0), std::vector<double>(d + 1, 0.0)};
  params[0][d] = ymean;
  params[1][d] = std::log(yvar);
  if (cfg.ridge_init >= 0.0) {
    // Features are often rank deficient, where first-order steps crawl; start
    // the mean head at the ridge solution and let the NLL refine both heads.
    const auto nf = static_cast<Eigen::Index>(fit_rows.size());
    const auto de = static_cast<Eigen::Index>(d);
    Eigen::MatrixXd X(nf, de);
    Eigen::VectorXd y(nf);
    for (Eigen::Index i = 0; i < nf; ++i) {
      const std::size_t r = fit_rows[static_cast<std::size_t>(i)];
      for (Eigen::Index k = 0; k < de; ++k) X(i, k) = s.x[r * d + static_cast<std::size_t>(k)];
      y(i) = s.y[r];
    }
    const double ym = y.mean();
    const Eigen::VectorXd xm = X.colwise().mean();
    X.rowwise() -= xm.transpose();
    Eigen::MatrixXd A = X.transpose() * X;
    A.diagonal().array() += cfg.ridge_init * static_cast<double>(nf) + 1e-12;
    const Eigen::VectorXd w = A.ldlt().solve(X.transpose() * (y.array() - ym).matrix());
    if (w.allFinite()) {
      for (std::size_t k = 0; k < d; ++k) params[0][k] = w(static_cast<Eigen::Index>(k));
      params[0][d] = ym - xm.dot(w);
      const Eigen::VectorXd res = (X * w).array() + ym - y.array();
      params[1][d] = std::log(std::max(res.squaredNorm() / static_cast<double>(nf), kVarianceFloor));
    }
  }
  num::Buffers<double> ema = params, best = params, grads = params;
  auto state = num::AdamState<double>::zeros_like(params);
  num::AdamWConfig opt;
  opt.weight_decay = cfg.weight_decay;

  Rng rng = make_stream(cfg.seed, Stream::kGlobalFit, {0xF17ULL});
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (fit_rows.size() + bs - 1) / bs;
  const double total_steps = static_cast<double>(steps_per_epoch) * cfg.epochs;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  std::int64_t step = 0;
  std::vector<std::size_t> order = fit_rows;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double train_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::span<const std::size_t> batch(order.data() + b, std::min(bs, order.size() - b));
      train_sum += nll_and_grad(s, batch, params, &grads) * static_cast<double>(batch.size());
      opt.lr = cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
      if (opt.lr <= 0.0) opt.lr = 1e-12;
      num::adamw_step(params, grads, state, opt);
      num::ema_update(ema, params, cfg.ema_decay);
      ++step;
    }
    const double val = nll_and_grad(s, val_rows, ema, nullptr);
    if (!std::isfinite(val)) throw NumericError("global_fit: non-finite validation NLL at epoch " + std::to_string(epoch));
    if (log) {
      log->train_nll.push_back(train_sum / static_cast<double>(order.size()));
      log->val_nll.push_back(val);
    }
    if (val < best_val) {
      best_val = val;
      best = ema;
      best_epoch = epoch;
    } else if (epoch - best_epoch >= cfg.patience) {
      break;
    }
  }
  if (log) log->best_epoch = best_epoch;
  return fold(s, best);
}

double global_mean(const GlobalHead& head, std::span<const float> phi) {
  if (phi.size() != head.dim()) {
    throw std::invalid_argument("global head expects dim " + std::to_string(head.dim()) + ", got " +
                                std::to_string(phi.size()));
  }
  return dot_aug(head.theta_mu, phi);
}

double global_variance(const GlobalHead& head, std::span<const float> phi) {
  if (phi.size() != head.dim()) {
    throw std::invalid_argument("global head expects dim " + std::to_string(head.dim()) + ", got " +
                                std::to_string(phi.size()));
  }
  return std::max(std::exp(dot_aug(head.theta_logvar, phi)), kVarianceFloor);
}

Prediction global_predict(const GlobalHead& head, std::span<const float> phi) {
  return {global_mean(head, phi), global_variance(head, phi)};
}

Prediction offset_predict(const GlobalHead& head, const Dataset& ds, std::size_t target_row,
                          std::span<const ContextEntry> context) {
  Prediction p = global_predict(head, ds.feature(ds.records[target_row].feature_row));
  if (context.empty()) return p;
  double residual = 0.0;
  for (const auto& e : context) residual += e.age - global_mean(head, ds.feature(ds.records[e.row].feature_row));
  p.mean += residual / static_cast<double>(context.size());
  return p;
}

json to_json(const GlobalHead& head) {
  return {{"theta_mu", head.theta_mu}, {"theta_logvar", head.theta_logvar}};
}

GlobalHead global_head_from_json(const json& j) {
  GlobalHead h;
  h.theta_mu = j.at("theta_mu").get<std::vector<double>>();
  h.theta_logvar = j.at("theta_logvar").get<std::vector<double>>();
  if (h.theta_mu.size() != h.theta_logvar.size() || h.theta_mu.empty()) {
    throw std::invalid_argument("global head weight vectors must be non-empty and equally sized");
  }
  return h;
}

Prediction GlobalEstimator::predict(const Query& q) const {
  return global_predict(head_, q.data->feature(q.data->records[q.target_row].feature_row));
}

Prediction OffsetEstimator::predict(const Query& q) const {
  return offset_predict(head_, *q.data, q.target_row, q.context);
}

}  // namespace refage::est
