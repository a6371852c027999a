#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "refage/core/estimator.hpp"
#include "refage/core/types.hpp"

namespace refage::est {

inline constexpr double kVarianceFloor = 1e-3;

/// Linear mean and log-variance heads over one-augmented features: the last
/// entry of each weight vector multiplies the constant 1.
struct GlobalHead {
  std::vector<double> theta_mu;
  std::vector<double> theta_logvar;

  std::size_t dim() const { return theta_mu.empty() ? 0 : theta_mu.size() - 1; }
  bool operator==(const GlobalHead&) const = default;
};

struct GlobalFitConfig {
  int epochs = 300;
  int batch_size = 256;
  double lr = 1e-2;
  double weight_decay = 1e-4;
  double ema_decay = 0.99;
  double validation_fraction = 0.1;
  int patience = 30;  ///< epochs without validation improvement before stopping
  /// Start the mean head from a ridge least-squares solution (penalty ridge * n)
  /// instead of the constant mean; negative disables it.
  double ridge_init = 1e-6;
  std::uint64_t seed = 1;
};

nlohmann::json to_json(const GlobalFitConfig& cfg);
GlobalFitConfig global_fit_config_from_json(const nlohmann::json& j);

struct GlobalFitLog {
  std::vector<double> train_nll;  ///< per epoch, raw weights
  std::vector<double> val_nll;    ///< per epoch, EMA weights
  int best_epoch = -1;
};

/// Deterministic identity-level hold-out used for early stopping. Also the
/// default identity set for fitting BLR hyperparameters.
std::vector<std::int64_t> validation_identities(const Dataset& ds, double fraction, std::uint64_t seed);

/// Minimizes the Gaussian NLL with AdamW on a 90/10 identity split. Features
/// are standardized internally and the result folded back, so the returned
/// head is exactly linear in the raw features.
GlobalHead global_fit(const Dataset& train, const GlobalFitConfig& cfg, GlobalFitLog* log = nullptr);

double global_mean(const GlobalHead& head, std::span<const float> phi);
/// Floored predictive variance, also the v-hat input of BLR.
double global_variance(const GlobalHead& head, std::span<const float> phi);
Prediction global_predict(const GlobalHead& head, std::span<const float> phi);

/// Global mean shifted by the mean residual of the references; variance
/// passes through. Empty context falls back to global_predict.
Prediction offset_predict(const GlobalHead& head, const Dataset& ds, std::size_t target_row,
                          std::span<const ContextEntry> context);

nlohmann::json to_json(const GlobalHead& head);
GlobalHead global_head_from_json(const nlohmann::json& j);

class GlobalEstimator final : public Estimator {
 public:
  explicit GlobalEstimator(GlobalHead head) : head_(std::move(head)) {}
  std::string name() const override { return "global"; }
  Prediction predict(const Query& q) const override;
  const GlobalHead& head() const { return head_; }

 private:
  GlobalHead head_;
};

class OffsetEstimator final : public Estimator {
 public:
  explicit OffsetEstimator(GlobalHead head) : head_(std::move(head)) {}
  std::string name() const override { return "offset"; }
  Prediction predict(const Query& q) const override;

 private:
  GlobalHead head_;
};

}  // namespace refage::est
