#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "refage/estimators/attention.hpp"
#include "refage/estimators/blr.hpp"
#include "refage/estimators/global.hpp"
#include "refage/synthworld/world.hpp"
#include "refage/trainer/trainer.hpp"

namespace refage::cli {

struct ProtocolConfig {
  std::vector<int> n_values{0, 1, 3, 5, 10};
  int trials_per_target = 1;
  int max_refs = 20;
  bool cross_source = true;
  std::vector<std::string> swap_modes{"same"};
  std::vector<std::string> estimators{"global", "offset", "blr", "attn_joint", "attn_spatial", "pair_avg"};
  double bucket_width = 5.0;
  int swap_max_refs = 10;
  /// Keep every k-th task (1 keeps all); trims evaluation cost on large worlds.
  int task_stride = 1;
};

/// Complete pipeline configuration. Module seeds are all replaced by `seed`.
struct RunConfig {
  std::filesystem::path output_dir = "run";
  std::uint64_t seed = 1;
  bool checked_numerics = false;
  int jobs = 1;
  synth::WorldConfig world;
  int identities = 1000;  ///< candidate ids; each lands in train or test
  /// Optional evaluation world with shifted domains; overrides applied on top of `world`.
  std::optional<nlohmann::json> shifted_world;
  est::GlobalFitConfig global;
  est::BlrFitConfig blr;
  est::AttnConfig attn_joint;
  est::AttnConfig attn_spatial;
  train::TrainConfig train;
  ProtocolConfig protocol;

  /// Pushes the run seed into every module config and aligns dims.
  void propagate();
};

nlohmann::json to_json(const RunConfig& cfg);
/// Unknown keys and invalid values raise ConfigError with a JSON pointer.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// JSON-Schema style description of the config file.
nlohmann::json run_config_schema();

synth::WorldConfig shifted_world_config(const RunConfig& cfg);

}  // namespace refage::cli
