#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "refage/core/estimator.hpp"
#include "refage/estimators/global.hpp"
#include "refage/numcore/checkpoint.hpp"
#include "refage/numcore/optim.hpp"
#include "refage/numcore/tape.hpp"

namespace refage::est {

/// kJoint: masked self-attention over [references..., target] using one
/// feature vector per image. kSpatial: target tokens cross-attend to a memory
/// bank of all reference tokens.
enum class AttnKind { kJoint, kSpatial };

std::string to_string(AttnKind kind);
AttnKind attn_kind_from_string(const std::string& s);

struct AttnConfig {
  AttnKind kind = AttnKind::kJoint;
  int in_dim = 64;
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;  ///< self-attention blocks of the joint model
  int ff_mult = 4;
  double omega = 10000.0;
  std::uint64_t seed = 1;

  void validate() const;
};

nlohmann::json to_json(const AttnConfig& cfg);
AttnConfig attn_config_from_json(const nlohmann::json& j);

/// emb[2k] = sin(age / omega^(2k/d)), emb[2k+1] = cos(age / omega^(2k/d)).
std::vector<double> sinusoidal_age_embedding(double age, int d_model, double omega = 10000.0);

/// (N+1)x(N+1) additive mask for the sequence [ref_1..ref_N, target]:
/// references see only references, the target sees everything.
std::vector<double> build_attention_mask(int n_refs);

struct AttnModel {
  AttnConfig cfg;
  num::ParamSet params;

  static AttnModel init(const AttnConfig& cfg);
};

num::Checkpoint to_checkpoint(const AttnModel& model, std::int64_t step, bool ema);
AttnModel attn_model_from_checkpoint(const num::Checkpoint& ckpt);

/// B episodes sharing one reference count N. Each image contributes T rows of
/// width in_dim (T = 1 for the joint model).
struct AttnBatch {
  int batch = 0;
  int n_refs = 0;
  int tokens = 1;
  int in_dim = 0;
  std::vector<double> target;  ///< B*T*in_dim
  std::vector<double> refs;    ///< B*N*T*in_dim
  std::vector<double> ages;    ///< B*N
};

/// Gathers features (joint) or token blocks (spatial) for the given targets and
/// equally sized contexts; ages are taken from the context entries.
AttnBatch make_attn_batch(const Dataset& ds, AttnKind kind, std::span<const std::size_t> target_rows,
                          std::span<const std::span<const ContextEntry>> contexts);

template <class T>
struct AttnGraph {
  num::Var mu;      ///< [B, 1], in (0, 100)
  num::Var logvar;  ///< [B, 1]
  /// Sequence state after each block, [B, L, d_model].
  std::vector<num::Var> hidden;
};

/// Records every parameter on the tape, in ParamSet order.
template <class T>
std::vector<num::Var> bind_params(num::Tape<T>& tape, const num::ParamSet& layout, const num::Buffers<T>& values,
                                  bool trainable);

template <class T>
AttnGraph<T> attn_forward(num::Tape<T>& tape, const AttnModel& model, std::span<const num::Var> params,
                          const AttnBatch& batch);

template <class T>
num::Buffers<T> param_buffers(const num::ParamSet& params);

/// Inference in double precision. Variances are floored at kVarianceFloor.
std::vector<Prediction> attn_predict(const AttnModel& model, const num::Buffers<double>& params,
                                     const AttnBatch& batch);

/// Joint or spatial model behind the estimator interface; N=0 delegates to the
/// global head. With pair_average, the model is run once per reference and the
/// means averaged (variance sum / N^2).
class AttnEstimator final : public Estimator {
 public:
  AttnEstimator(AttnModel model, GlobalHead head, bool pair_average = false);
  std::string name() const override;
  Prediction predict(const Query& q) const override;
  const AttnModel& model() const { return model_; }

 private:
  AttnModel model_;
  num::Buffers<double> params_;
  GlobalHead head_;
  bool pair_average_;
};

/// Mean of single-reference passes, variance (1/N^2) sum var_j.
Prediction pair_avg_predict(const AttnModel& model, const num::Buffers<double>& params, const Dataset& ds,
                            std::size_t target_row, std::span<const ContextEntry> context);

}  // namespace refage::est
