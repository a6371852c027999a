#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "refage/core/estimator.hpp"
#include "refage/estimators/global.hpp"

namespace refage::est {

/// Identity-specific linear head with prior N(theta_global, diag(s2)) and
/// heteroscedastic noise gamma1 * vhat(x) + gamma2. Hyperparameters live in
/// log space.
struct BlrModel {
  std::vector<double> theta_global;
  std::vector<double> log_s2;
  double log_gamma1 = 0.0;
  double log_gamma2 = 0.0;

  std::size_t dim() const { return theta_global.empty() ? 0 : theta_global.size() - 1; }
  bool operator==(const BlrModel&) const = default;
};

struct BlrFitConfig {
  int iterations = 2000;
  double lr = 1e-3;
  double init_log_s2 = -4.0;
  double init_log_gamma1 = 0.0;
  double init_log_gamma2 = -4.0;
  /// "validation": the global fit's held-out identities; "all": every identity.
  std::string identities = "validation";
  double validation_fraction = 0.1;  ///< must match the global fit
  std::uint64_t seed = 1;
};

nlohmann::json to_json(const BlrFitConfig& cfg);
BlrFitConfig blr_fit_config_from_json(const nlohmann::json& j);

/// Observations of one identity prepared for the marginal likelihood.
struct BlrGroup {
  std::vector<std::vector<double>> phi;  ///< one-augmented features
  std::vector<double> y;
  std::vector<double> vhat;
};

std::vector<BlrGroup> blr_groups(const GlobalHead& head, const Dataset& ds, std::span<const std::int64_t> identities);

struct BlrGradient {
  std::vector<double> d_log_s2;
  double d_log_gamma1 = 0.0;
  double d_log_gamma2 = 0.0;
};

/// Sum over groups of log N(y | Phi theta_global, Phi S Phi^T + Lambda), with
/// the gradient w.r.t. the log hyperparameters when `grad` is non-null.
double blr_log_marginal(const BlrModel& model, std::span<const BlrGroup> groups, BlrGradient* grad = nullptr);

struct BlrFitLog {
  std::vector<double> objective;  ///< per iteration, before the update
};

/// Empirical Bayes: Adam on the log hyperparameters with cosine annealing to 0.
BlrModel blr_fit(const GlobalHead& head, const Dataset& train, const BlrFitConfig& cfg, BlrFitLog* log = nullptr);
BlrModel blr_fit_groups(const GlobalHead& head, std::span<const BlrGroup> groups, const BlrFitConfig& cfg,
                        BlrFitLog* log = nullptr);

/// Closed-form posterior predictive. Uses the N-dimensional dual form with
/// 1e-8 jitter when N < d+1, the primal (d+1)-dimensional form otherwise.
Prediction blr_predict(const BlrModel& model, std::span<const double> target_phi_aug, double target_vhat,
                       std::span<const std::vector<double>> ref_phi_aug, std::span<const double> ref_vhat,
                       std::span<const double> ref_y);

enum class BlrForm { kAuto, kPrimal, kDual };
Prediction blr_predict(const BlrModel& model, std::span<const double> target_phi_aug, double target_vhat,
                       std::span<const std::vector<double>> ref_phi_aug, std::span<const double> ref_vhat,
                       std::span<const double> ref_y, BlrForm form);

std::vector<double> augment(std::span<const float> phi);

nlohmann::json to_json(const BlrModel& m);
BlrModel blr_model_from_json(const nlohmann::json& j);

class BlrEstimator final : public Estimator {
 public:
  BlrEstimator(BlrModel model, GlobalHead head) : model_(std::move(model)), head_(std::move(head)) {}
  std::string name() const override { return "blr"; }
  Prediction predict(const Query& q) const override;

 private:
  BlrModel model_;
  GlobalHead head_;
};

}  // namespace refage::est
