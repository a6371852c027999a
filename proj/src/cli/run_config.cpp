#include "refage/cli/run_config.hpp"

#include "refage/core/dataset_io.hpp"
#include "refage/core/errors.hpp"

namespace refage::cli {

using json = nlohmann::json;

namespace {

json protocol_to_json(const ProtocolConfig& p) {
  return {{"n_values", p.n_values},         {"trials_per_target", p.trials_per_target},
          {"max_refs", p.max_refs},         {"cross_source", p.cross_source},
          {"swap_modes", p.swap_modes},     {"estimators", p.estimators},
          {"bucket_width", p.bucket_width}, {"swap_max_refs", p.swap_max_refs},
          {"task_stride", p.task_stride}};
}

const std::vector<std::string> kEstimators = {"global", "offset", "blr", "attn_joint", "attn_spatial", "pair_avg"};

ProtocolConfig protocol_from_json(const json& j) {
  ProtocolConfig p;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "n_values") p.n_values = v.get<std::vector<int>>();
      else if (key == "trials_per_target") p.trials_per_target = v.get<int>();
      else if (key == "max_refs") p.max_refs = v.get<int>();
      else if (key == "cross_source") p.cross_source = v.get<bool>();
      else if (key == "swap_modes") p.swap_modes = v.get<std::vector<std::string>>();
      else if (key == "estimators") p.estimators = v.get<std::vector<std::string>>();
      else if (key == "bucket_width") p.bucket_width = v.get<double>();
      else if (key == "swap_max_refs") p.swap_max_refs = v.get<int>();
      else if (key == "task_stride") p.task_stride = v.get<int>();
      else throw ConfigError("/" + key, "unknown key");
    } catch (const json::exception& e) {
      throw ConfigError("/" + key, e.what());
    }
  }
  for (std::size_t i = 0; i < p.n_values.size(); ++i) {
    if (p.n_values[i] < 0) throw ConfigError("/n_values/" + std::to_string(i), "must be >= 0");
  }
  if (p.trials_per_target < 1) throw ConfigError("/trials_per_target", "must be >= 1");
  if (p.max_refs < 1) throw ConfigError("/max_refs", "must be >= 1");
  if (!(p.bucket_width > 0)) throw ConfigError("/bucket_width", "must be > 0");
  if (p.swap_max_refs < 1) throw ConfigError("/swap_max_refs", "must be >= 1");
  if (p.task_stride < 1) throw ConfigError("/task_stride", "must be >= 1");
  for (std::size_t i = 0; i < p.swap_modes.size(); ++i) {
    try {
      swap_mode_from_string(p.swap_modes[i]);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("/swap_modes/" + std::to_string(i), e.what());
    }
  }
  for (std::size_t i = 0; i < p.estimators.size(); ++i) {
    if (std::find(kEstimators.begin(), kEstimators.end(), p.estimators[i]) == kEstimators.end()) {
      throw ConfigError("/estimators/" + std::to_string(i), "unknown estimator '" + p.estimators[i] + "'");
    }
  }
  return p;
}

// Re-roots a ConfigError raised by a sub-parser under `prefix`.
template <class Fn>
auto nested(const std::string& prefix, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.pointer(), std::string(e.what()).substr(e.pointer().size() + 2));
  }
}

}  // namespace

void RunConfig::propagate() {
  world.seed = seed;
  global.seed = seed;
  blr.seed = seed;
  blr.validation_fraction = global.validation_fraction;
  attn_joint.seed = seed;
  attn_spatial.seed = seed;
  attn_joint.kind = est::AttnKind::kJoint;
  attn_spatial.kind = est::AttnKind::kSpatial;
  attn_joint.in_dim = world.dim;
  attn_spatial.in_dim = world.dim;
  train.seed = seed;
}

json to_json(const RunConfig& c) {
  json j{{"output_dir", c.output_dir.string()},
         {"seed", c.seed},
         {"checked_numerics", c.checked_numerics},
         {"jobs", c.jobs},
         {"world", synth::to_json(c.world)},
         {"identities", c.identities},
         {"global", est::to_json(c.global)},
         {"blr", est::to_json(c.blr)},
         {"attn_joint", est::to_json(c.attn_joint)},
         {"attn_spatial", est::to_json(c.attn_spatial)},
         {"train", train::to_json(c.train)},
         {"protocol", protocol_to_json(c.protocol)}};
  if (c.shifted_world) j["shifted_world"] = *c.shifted_world;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("", "run config must be a JSON object");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    const std::string ptr = "/" + key;
    try {
      if (key == "output_dir") c.output_dir = v.get<std::string>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "checked_numerics") c.checked_numerics = v.get<bool>();
      else if (key == "jobs") c.jobs = v.get<int>();
      else if (key == "identities") c.identities = v.get<int>();
      else if (key == "world") c.world = nested(ptr, [&] { return synth::world_config_from_json(v); });
      else if (key == "shifted_world") {
        if (!v.is_object()) throw ConfigError(ptr, "expected an object of world overrides");
        c.shifted_world = v;
      } else if (key == "global") c.global = nested(ptr, [&] { return est::global_fit_config_from_json(v); });
      else if (key == "blr") c.blr = nested(ptr, [&] { return est::blr_fit_config_from_json(v); });
      else if (key == "attn_joint") c.attn_joint = nested(ptr, [&] { return est::attn_config_from_json(v); });
      else if (key == "attn_spatial") c.attn_spatial = nested(ptr, [&] { return est::attn_config_from_json(v); });
      else if (key == "train") c.train = nested(ptr, [&] { return train::train_config_from_json(v); });
      else if (key == "protocol") c.protocol = nested(ptr, [&] { return protocol_from_json(v); });
      else throw ConfigError(ptr, "unknown key");
    } catch (const json::exception& e) {
      throw ConfigError(ptr, e.what());
    }
  }
  if (c.identities < 2) throw ConfigError("/identities", "must be >= 2");
  if (c.jobs < 1) throw ConfigError("/jobs", "must be >= 1");
  c.propagate();
  if (c.shifted_world) nested("/shifted_world", [&] { return shifted_world_config(c); });
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw DatasetError(DatasetError::Kind::kMissingFile, "config file not found: " + path.string());
  }
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("malformed JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

synth::WorldConfig shifted_world_config(const RunConfig& cfg) {
  json base = synth::to_json(cfg.world);
  if (cfg.shifted_world) base.merge_patch(*cfg.shifted_world);
  base["seed"] = cfg.world.seed;
  return synth::world_config_from_json(base);
}

json run_config_schema() {
  auto obj = [](json props) { return json{{"type", "object"}, {"additionalProperties", false}, {"properties", props}}; };
  const json num{{"type", "number"}};
  const json integer{{"type", "integer"}};
  const json boolean{{"type", "boolean"}};
  const json str{{"type", "string"}};
  const json pair{{"type", "array"}, {"items", num}, {"minItems", 2}, {"maxItems", 2}};
  const json world = obj({{"dim", integer},
                          {"world_kind", {{"enum", {"constant-bias", "linear-rate", "nonlinear"}}}},
                          {"n_domains", integer},
                          {"domain_base", integer},
                          {"domain_offset_scale", num},
                          {"source_offset_scale", num},
                          {"feature_noise_base", num},
                          {"quality_noise_gain", num},
                          {"tokens_per_image", integer},
                          {"age_range", pair},
                          {"bias_sd", num},
                          {"rate_sd", num},
                          {"nl_amplitude_sd", num},
                          {"nl_center_range", pair},
                          {"label_noise_sd", num},
                          {"window", pair},
                          {"edge_margin", num},
                          {"images_per_source", num},
                          {"images_per_identity",
                           obj({{"law", {{"enum", {"constant", "log-uniform"}}}}, {"min", integer}, {"max", integer}})},
                          {"test_fraction", num},
                          {"identity_base", integer},
                          {"seed", integer}});
  const json attn = obj({{"kind", {{"enum", {"joint", "spatial"}}}},
                         {"in_dim", integer},
                         {"d_model", integer},
                         {"n_heads", integer},
                         {"n_layers", integer},
                         {"ff_mult", integer},
                         {"omega", num},
                         {"seed", integer}});
  json schema = obj({{"output_dir", str},
                     {"seed", integer},
                     {"checked_numerics", boolean},
                     {"jobs", integer},
                     {"identities", integer},
                     {"world", world},
                     {"shifted_world", {{"type", "object"}, {"description", "overrides applied to world"}}},
                     {"global", obj({{"epochs", integer},
                                     {"batch_size", integer},
                                     {"lr", num},
                                     {"weight_decay", num},
                                     {"ema_decay", num},
                                     {"validation_fraction", num},
                                     {"patience", integer},
                                     {"ridge_init", num},
                                     {"seed", integer}})},
                     {"blr", obj({{"iterations", integer},
                                  {"lr", num},
                                  {"init_log_s2", num},
                                  {"init_log_gamma1", num},
                                  {"init_log_gamma2", num},
                                  {"identities", {{"enum", {"validation", "all"}}}},
                                  {"validation_fraction", num},
                                  {"seed", integer}})},
                     {"attn_joint", attn},
                     {"attn_spatial", attn},
                     {"train", obj({{"max_batches", integer},
                                    {"lr", num},
                                    {"lr_input", num},
                                    {"lr_schedule", {{"enum", {"constant", "cosine"}}}},
                                    {"weight_decay", num},
                                    {"ema_decay", num},
                                    {"ref_age_noise_sd", num},
                                    {"grad_clip", num},
                                    {"n_range", {{"type", "array"}, {"items", integer}, {"minItems", 2}, {"maxItems", 2}}},
                                    {"identities_per_batch", integer},
                                    {"holdout_fraction", num},
                                    {"holdout_refs", integer},
                                    {"log_every", integer},
                                    {"eval_every", integer},
                                    {"log_wall_time", boolean},
                                    {"seed", integer}})},
                     {"protocol", obj({{"n_values", {{"type", "array"}, {"items", integer}}},
                                       {"trials_per_target", integer},
                                       {"max_refs", integer},
                                       {"cross_source", boolean},
                                       {"swap_modes", {{"type", "array"}, {"items", {{"enum", {"same", "mix", "single"}}}}}},
                                       {"estimators", {{"type", "array"}, {"items", {{"enum", kEstimators}}}}},
                                       {"bucket_width", num},
                                       {"swap_max_refs", integer},
                                       {"task_stride", integer}})}});
  schema["$schema"] = "https://json-schema.org/draft/2020-12/schema";
  schema["title"] = "refage run config";
  return schema;
}

}  // namespace refage::cli
