#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "refage/core/estimator.hpp"
#include "refage/core/rng.hpp"
#include "refage/core/types.hpp"

namespace refage::synth {

enum class WorldKind { kConstantBias, kLinearRate, kNonlinear };

std::string to_string(WorldKind kind);
WorldKind world_kind_from_string(const std::string& s);

/// Distribution of images per identity. Log-uniform mimics the long tail of
/// real face datasets; constant is for tests.
struct ImagesLaw {
  enum class Kind { kConstant, kLogUniform } kind = Kind::kLogUniform;
  int min_count = 2;
  int max_count = 40;

  int sample(Rng& rng) const;
};

/// Hyperparameters of the hierarchical generative world. Every field is part
/// of the canonical digest.
struct WorldConfig {
  int dim = 64;
  WorldKind kind = WorldKind::kNonlinear;
  int n_domains = 4;
  std::int64_t domain_base = 0;  ///< first domain id; shifted test worlds use fresh ids
  double domain_offset_scale = 0.03;
  double source_offset_scale = 0.01;
  double feature_noise_base = 0.01;
  double quality_noise_gain = 0.03;
  int tokens_per_image = 9;
  int age_lo = 0;
  int age_hi = 100;

  // Identity prior.
  double bias_sd = 3.0;
  double rate_sd = 0.1;
  double nl_amplitude_sd = 5.0;
  double nl_center_lo = 25.0;
  double nl_center_hi = 65.0;
  /// Per-image deviation of apparent age from the identity's curve.
  double label_noise_sd = 1.0;

  // Photographed lifespan and scene structure.
  double window_min = 5.0;
  double window_max = 40.0;
  double edge_margin = 10.0;
  double images_per_source = 3.0;
  ImagesLaw images;

  double test_fraction = 0.5;
  std::int64_t identity_base = 0;
  std::uint64_t seed = 1;

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

nlohmann::json to_json(const WorldConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
WorldConfig world_config_from_json(const nlohmann::json& j);
/// Hex SHA-256 of the canonical (sorted-key, compact) JSON form.
std::string world_digest(const WorldConfig& cfg);

/// Latent aging parameters of one identity.
struct IdentityLatent {
  std::int64_t identity_id = 0;
  double theta_bias = 0.0;
  double theta_rate = 0.0;
  double theta_nl_amp = 0.0;
  double theta_nl_center = 40.0;
  double window_start = 20.0;  ///< photographed lifespan [start, end]
  double window_end = 30.0;
  std::int64_t domain_id = 0;
};

IdentityLatent sample_identity(const WorldConfig& cfg, std::int64_t identity_id, Rng& rng);
/// Uses the canonical per-identity stream derived from (cfg.seed, identity_id).
IdentityLatent sample_identity(const WorldConfig& cfg, std::int64_t identity_id);

/// age + bias + rate*(age-40) + amp*tanh((age-center)/10), clamped to the world's age range.
double apparent_age(const WorldConfig& cfg, const IdentityLatent& latent, double age);

/// Sinusoidal basis of apparent age (dim/2 entries) followed by [1, q].
std::vector<double> age_basis(const WorldConfig& cfg, double apparent, double quality);

struct RenderedImage {
  ImageRecord record;         ///< feature_row left at 0; the caller assigns it
  double apparent = 0.0;      ///< apparent age actually encoded in the features
  std::vector<float> tokens;  ///< T x dim, row-major
  std::vector<float> cls;     ///< mean of the tokens
};

/// Fixed per-world projections and offsets, shared by every render call.
class Renderer {
 public:
  explicit Renderer(const WorldConfig& cfg);

  RenderedImage render(const IdentityLatent& latent, int age, std::int64_t source_id,
                       std::int64_t domain_id, Rng& rng) const;

  std::span<const double> projection(int token) const;  // dim x (dim/2+2), row-major
  std::vector<double> source_offset(std::int64_t source_id) const;
  std::vector<double> domain_offset(std::int64_t domain_id) const;

 private:
  WorldConfig cfg_;
  int basis_dim_ = 0;
  std::vector<std::vector<double>> projections_;
};

RenderedImage render_image(const WorldConfig& cfg, const IdentityLatent& latent, int age,
                           std::int64_t source_id, std::int64_t domain_id, Rng& rng);

/// Deterministic train/test membership from a seeded hash of the identity id.
bool identity_in_test_split(const WorldConfig& cfg, std::int64_t identity_id);

/// Generated split together with the ground truth only tests and oracles see.
struct GeneratedSplit {
  Dataset dataset;
  std::vector<double> apparent;         ///< per record row
  std::vector<IdentityLatent> latents;  ///< ascending identity id
};

/// Generates the identities in [identity_base, identity_base + n_identities)
/// that fall into `split` ("train" or "test"). Identities are rendered
/// independently on `jobs` threads; output is identical for any job count.
GeneratedSplit generate_split(const WorldConfig& cfg, int n_identities, const std::string& split,
                              int jobs = 1);

Dataset generate_dataset(const WorldConfig& cfg, int n_identities, const std::string& split, int jobs = 1);

/// Closed-form posterior predictive for the constant-bias world given true
/// apparent ages. Residuals are y_j - a_j of the references.
Prediction constant_bias_posterior_predictive(double target_apparent, std::span<const double> residuals,
                                              double bias_sd, double obs_sd);

/// Test oracle with access to the true apparent ages of every row.
class BayesOracle final : public Estimator {
 public:
  BayesOracle(const WorldConfig& cfg, std::vector<double> apparent_by_row);
  std::string name() const override { return "bayes_oracle"; }
  Prediction predict(const Query& query) const override;

 private:
  WorldConfig cfg_;
  std::vector<double> apparent_;
};

}  // namespace refage::synth
