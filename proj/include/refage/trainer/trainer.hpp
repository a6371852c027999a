#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "refage/core/rng.hpp"
#include "refage/core/types.hpp"
#include "refage/estimators/attention.hpp"

namespace refage::train {

struct TrainConfig {
  int max_batches = 20000;
  double lr = 1e-4;
  double lr_input = -1.0;  ///< input projection; negative means "same as lr"
  std::string lr_schedule = "constant";  ///< or "cosine"
  double weight_decay = 1e-4;
  double ema_decay = 0.999;
  double ref_age_noise_sd = 2.0;
  double grad_clip = 1.0;
  int n_min = 1;
  int n_max = 20;
  int identities_per_batch = 10;
  double holdout_fraction = 0.1;
  int holdout_refs = 5;
  int log_every = 100;
  int eval_every = 1000;
  bool log_wall_time = false;
  std::uint64_t seed = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct Episode {
  std::int64_t identity_id = 0;
  std::size_t target_row = 0;
  std::vector<ContextEntry> context;  ///< ages carry the training noise
  double target_age = 0.0;
};

struct EpisodeBatch {
  int n_refs = 0;
  std::vector<Episode> episodes;
};

/// Identities eligible for sampling, bucketed by how many references they can
/// supply.
class EpisodeSampler {
 public:
  EpisodeSampler(const Dataset& ds, std::span<const std::int64_t> identities, const TrainConfig& cfg);
  /// Throws std::invalid_argument when no identity has two images.
  EpisodeBatch sample(Rng& rng) const;

 private:
  const Dataset* ds_;
  TrainConfig cfg_;
  IdentityIndex index_;
  std::vector<std::vector<std::int64_t>> eligible_;  ///< [n] -> identities with >= n+1 images
};

/// Convenience: sampler over every identity of the dataset.
EpisodeBatch sample_episode_batch(const Dataset& ds, const TrainConfig& cfg, Rng& rng);

/// Batch-mean (y - mu)^2 / (2 s2) + log(s2) / 2 with s2 = max(exp(logvar), floor).
double loss_gaussian_nll(std::span<const double> mu, std::span<const double> logvar, std::span<const double> y,
                         double var_floor = est::kVarianceFloor);

struct StepStats {
  double loss = 0.0;
  double grad_norm = 0.0;          ///< before clipping
  double clipped_grad_norm = 0.0;  ///< after clipping
};

/// Owns raw weights, EMA weights and optimizer state of one model.
class AttnTrainer {
 public:
  AttnTrainer(est::AttnModel model, const TrainConfig& cfg);

  /// Forward, NLL, backward, clip, AdamW, EMA. Throws NumericError on a
  /// non-finite loss.
  StepStats step(const Dataset& ds, const EpisodeBatch& batch);
  /// Multiplies both learning rates for subsequent steps (schedules).
  void set_lr_scale(double scale) { lr_scale_ = scale; }

  est::AttnModel raw_model() const;
  est::AttnModel ema_model() const;
  std::int64_t steps() const { return steps_; }

 private:
  est::AttnModel model_;
  TrainConfig cfg_;
  num::Buffers<float> params_, ema_;
  std::vector<std::size_t> input_group_, main_group_;
  num::AdamState<float> input_state_, main_state_;
  std::int64_t steps_ = 0;
  double lr_scale_ = 1.0;
};

struct TrainResult {
  est::AttnModel model;  ///< EMA weights
  est::AttnModel raw;
  std::vector<nlohmann::json> log;
  double final_holdout_ema = 0.0;
  double final_holdout_raw = 0.0;
};

/// Episodic training on the non-holdout identities of `ds`. Every log record is
/// also written to `log_sink` as one JSON line when given.
TrainResult train_attention_model(est::AttnModel model, const Dataset& ds, const TrainConfig& cfg,
                                  std::ostream* log_sink = nullptr);

}  // namespace refage::train
