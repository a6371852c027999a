#include "refage/synthworld/world.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <thread>

#include "refage/core/dataset_io.hpp"
#include "refage/core/errors.hpp"

namespace refage::synth {

using json = nlohmann::json;

std::string to_string(WorldKind kind) {
  switch (kind) {
    case WorldKind::kConstantBias: return "constant-bias";
    case WorldKind::kLinearRate: return "linear-rate";
    case WorldKind::kNonlinear: return "nonlinear";
  }
  return "nonlinear";
}

WorldKind world_kind_from_string(const std::string& s) {
  if (s == "constant-bias") return WorldKind::kConstantBias;
  if (s == "linear-rate") return WorldKind::kLinearRate;
  if (s == "nonlinear") return WorldKind::kNonlinear;
  throw ConfigError("/world_kind", "unknown world kind '" + s + "'");
}

int ImagesLaw::sample(Rng& rng) const {
  if (kind == Kind::kConstant) return min_count;
  const double lo = std::log(static_cast<double>(min_count));
  const double hi = std::log(static_cast<double>(max_count) + 1.0);
  const int n = static_cast<int>(std::floor(std::exp(lo + (hi - lo) * uniform01(rng))));
  return std::clamp(n, min_count, max_count);
}

void WorldConfig::validate() const {
  auto require = [](bool ok, const char* key, const char* msg) {
    if (!ok) throw ConfigError(std::string("/") + key, msg);
  };
  require(dim >= 4 && dim % 4 == 0, "dim", "must be a positive multiple of 4");
  require(n_domains >= 1, "n_domains", "must be >= 1");
  require(domain_offset_scale >= 0, "domain_offset_scale", "must be >= 0");
  require(source_offset_scale >= 0, "source_offset_scale", "must be >= 0");
  require(feature_noise_base >= 0, "feature_noise_base", "must be >= 0");
  require(quality_noise_gain >= 0, "quality_noise_gain", "must be >= 0");
  require(tokens_per_image >= 1, "tokens_per_image", "must be >= 1");
  require(age_lo < age_hi, "age_range", "lo must be < hi");
  require(bias_sd >= 0, "bias_sd", "must be >= 0");
  require(rate_sd >= 0, "rate_sd", "must be >= 0");
  require(nl_amplitude_sd >= 0, "nl_amplitude_sd", "must be >= 0");
  require(nl_center_lo <= nl_center_hi, "nl_center_range", "lo must be <= hi");
  require(label_noise_sd >= 0, "label_noise_sd", "must be >= 0");
  require(window_min >= 0 && window_min <= window_max, "window", "need 0 <= min <= max");
  require(edge_margin >= 0, "edge_margin", "must be >= 0");
  require(age_lo + 2 * edge_margin + window_max <= age_hi, "window",
          "lifespan window plus margins exceeds the age range");
  require(images_per_source > 0, "images_per_source", "must be > 0");
  require(images.min_count >= 1 && images.min_count <= images.max_count, "images_per_identity",
          "need 1 <= min <= max");
  require(images.max_count < 4096, "images_per_identity", "max must be < 4096");
  require(test_fraction >= 0 && test_fraction <= 1, "test_fraction", "must be in [0,1]");
  require(identity_base >= 0, "identity_base", "must be >= 0");
}

json to_json(const WorldConfig& c) {
  json j;
  j["dim"] = c.dim;
  j["world_kind"] = to_string(c.kind);
  j["n_domains"] = c.n_domains;
  j["domain_base"] = c.domain_base;
  j["domain_offset_scale"] = c.domain_offset_scale;
  j["source_offset_scale"] = c.source_offset_scale;
  j["feature_noise_base"] = c.feature_noise_base;
  j["quality_noise_gain"] = c.quality_noise_gain;
  j["tokens_per_image"] = c.tokens_per_image;
  j["age_range"] = {c.age_lo, c.age_hi};
  j["bias_sd"] = c.bias_sd;
  j["rate_sd"] = c.rate_sd;
  j["nl_amplitude_sd"] = c.nl_amplitude_sd;
  j["nl_center_range"] = {c.nl_center_lo, c.nl_center_hi};
  j["label_noise_sd"] = c.label_noise_sd;
  j["window"] = {c.window_min, c.window_max};
  j["edge_margin"] = c.edge_margin;
  j["images_per_source"] = c.images_per_source;
  j["images_per_identity"] = {
      {"law", c.images.kind == ImagesLaw::Kind::kConstant ? "constant" : "log-uniform"},
      {"min", c.images.min_count},
      {"max", c.images.max_count}};
  j["test_fraction"] = c.test_fraction;
  j["identity_base"] = c.identity_base;
  j["seed"] = c.seed;
  return j;
}

namespace {

template <class V>
void read_key(const json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("/") + key, e.what());
  }
}

void read_pair(const json& j, const char* key, auto& lo, auto& hi) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2) throw ConfigError(std::string("/") + key, "expected [lo, hi]");
  try {
    lo = v[0].get<std::remove_reference_t<decltype(lo)>>();
    hi = v[1].get<std::remove_reference_t<decltype(hi)>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("/") + key, e.what());
  }
}

}  // namespace

WorldConfig world_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("", "world config must be a JSON object");
  static const std::vector<std::string> known = {
      "dim", "world_kind", "n_domains", "domain_base", "domain_offset_scale", "source_offset_scale",
      "feature_noise_base", "quality_noise_gain", "tokens_per_image", "age_range", "bias_sd", "rate_sd",
      "nl_amplitude_sd", "nl_center_range", "label_noise_sd", "window", "edge_margin",
      "images_per_source", "images_per_identity", "test_fraction", "identity_base", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("/" + key, "unknown world config key");
    }
  }
  WorldConfig c;
  read_key(j, "dim", c.dim);
  if (j.contains("world_kind")) {
    if (!j["world_kind"].is_string()) throw ConfigError("/world_kind", "expected a string");
    c.kind = world_kind_from_string(j["world_kind"].get<std::string>());
  }
  read_key(j, "n_domains", c.n_domains);
  read_key(j, "domain_base", c.domain_base);
  read_key(j, "domain_offset_scale", c.domain_offset_scale);
  read_key(j, "source_offset_scale", c.source_offset_scale);
  read_key(j, "feature_noise_base", c.feature_noise_base);
  read_key(j, "quality_noise_gain", c.quality_noise_gain);
  read_key(j, "tokens_per_image", c.tokens_per_image);
  read_pair(j, "age_range", c.age_lo, c.age_hi);
  read_key(j, "bias_sd", c.bias_sd);
  read_key(j, "rate_sd", c.rate_sd);
  read_key(j, "nl_amplitude_sd", c.nl_amplitude_sd);
  read_pair(j, "nl_center_range", c.nl_center_lo, c.nl_center_hi);
  read_key(j, "label_noise_sd", c.label_noise_sd);
  read_pair(j, "window", c.window_min, c.window_max);
  read_key(j, "edge_margin", c.edge_margin);
  read_key(j, "images_per_source", c.images_per_source);
  if (j.contains("images_per_identity")) {
    const auto& law = j["images_per_identity"];
    if (!law.is_object()) throw ConfigError("/images_per_identity", "expected an object");
    const std::string kind = law.value("law", std::string("log-uniform"));
    if (kind == "constant") {
      c.images.kind = ImagesLaw::Kind::kConstant;
    } else if (kind == "log-uniform") {
      c.images.kind = ImagesLaw::Kind::kLogUniform;
    } else {
      throw ConfigError("/images_per_identity/law", "unknown law '" + kind + "'");
    }
    try {
      c.images.min_count = law.value("min", c.images.min_count);
      c.images.max_count = law.value("max", c.images.kind == ImagesLaw::Kind::kConstant
                                                ? c.images.min_count
                                                : c.images.max_count);
    } catch (const json::exception& e) {
      throw ConfigError("/images_per_identity", e.what());
    }
  }
  read_key(j, "test_fraction", c.test_fraction);
  read_key(j, "identity_base", c.identity_base);
  read_key(j, "seed", c.seed);
  c.validate();
  return c;
}

std::string world_digest(const WorldConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

IdentityLatent sample_identity(const WorldConfig& cfg, std::int64_t identity_id, Rng& rng) {
  IdentityLatent z;
  z.identity_id = identity_id;
  // Draw every component unconditionally so the stream layout does not depend
  // on the world kind.
  const double bias = normal(rng, 0.0, 1.0) * cfg.bias_sd;
  const double rate = normal(rng, 0.0, 1.0) * cfg.rate_sd;
  const double amp = normal(rng, 0.0, 1.0) * cfg.nl_amplitude_sd;
  const double center = cfg.nl_center_lo + (cfg.nl_center_hi - cfg.nl_center_lo) * uniform01(rng);
  z.theta_bias = bias;
  z.theta_rate = cfg.kind == WorldKind::kConstantBias ? 0.0 : rate;
  z.theta_nl_amp = cfg.kind == WorldKind::kNonlinear ? amp : 0.0;
  z.theta_nl_center = center;

  const double width = cfg.window_min + (cfg.window_max - cfg.window_min) * uniform01(rng);
  const double lo = cfg.age_lo + cfg.edge_margin;
  const double hi = cfg.age_hi - cfg.edge_margin - width;
  z.window_start = lo + (hi - lo) * uniform01(rng);
  z.window_end = z.window_start + width;
  z.domain_id = cfg.domain_base + static_cast<std::int64_t>(uniform01(rng) * cfg.n_domains);
  z.domain_id = std::min<std::int64_t>(z.domain_id, cfg.domain_base + cfg.n_domains - 1);
  return z;
}

IdentityLatent sample_identity(const WorldConfig& cfg, std::int64_t identity_id) {
  Rng rng = make_stream(cfg.seed, Stream::kIdentity, {static_cast<std::uint64_t>(identity_id)});
  return sample_identity(cfg, identity_id, rng);
}

double apparent_age(const WorldConfig& cfg, const IdentityLatent& z, double age) {
  const double a = age + z.theta_bias + z.theta_rate * (age - 40.0) +
                   z.theta_nl_amp * std::tanh((age - z.theta_nl_center) / 10.0);
  return std::clamp(a, static_cast<double>(cfg.age_lo), static_cast<double>(cfg.age_hi));
}

std::vector<double> age_basis(const WorldConfig& cfg, double apparent, double quality) {
  // Periods grow geometrically from 30 to 600 years so that a linear readout
  // can recover age over the whole range.
  const int k = cfg.dim / 4;
  std::vector<double> z(static_cast<std::size_t>(cfg.dim / 2 + 2));
  for (int i = 0; i < k; ++i) {
    const double period = k > 1 ? 30.0 * std::pow(20.0, static_cast<double>(i) / (k - 1)) : 100.0;
    const double w = 2.0 * std::numbers::pi / period;
    z[static_cast<std::size_t>(i)] = std::sin(w * apparent);
    z[static_cast<std::size_t>(k + i)] = std::cos(w * apparent);
  }
  z[static_cast<std::size_t>(2 * k)] = 1.0;
  z[static_cast<std::size_t>(2 * k + 1)] = quality;
  return z;
}

Renderer::Renderer(const WorldConfig& cfg) : cfg_(cfg), basis_dim_(cfg.dim / 2 + 2) {
  cfg_.validate();
  const double sd = 1.0 / std::sqrt(static_cast<double>(basis_dim_));
  for (int t = 0; t < cfg_.tokens_per_image; ++t) {
    Rng rng = make_stream(cfg_.seed, Stream::kProjection, {static_cast<std::uint64_t>(t)});
    std::vector<double> w(static_cast<std::size_t>(cfg_.dim * basis_dim_));
    for (double& v : w) v = normal(rng, 0.0, sd);
    projections_.push_back(std::move(w));
  }
}

std::span<const double> Renderer::projection(int token) const {
  return projections_.at(static_cast<std::size_t>(token));
}

std::vector<double> Renderer::source_offset(std::int64_t source_id) const {
  Rng rng = make_stream(cfg_.seed, Stream::kSource, {static_cast<std::uint64_t>(source_id)});
  std::vector<double> u(static_cast<std::size_t>(cfg_.dim));
  for (double& v : u) v = normal(rng, 0.0, 1.0) * cfg_.source_offset_scale;
  return u;
}

std::vector<double> Renderer::domain_offset(std::int64_t domain_id) const {
  Rng rng = make_stream(cfg_.seed, Stream::kDomain, {static_cast<std::uint64_t>(domain_id)});
  std::vector<double> u(static_cast<std::size_t>(cfg_.dim));
  for (double& v : u) v = normal(rng, 0.0, 1.0) * cfg_.domain_offset_scale;
  return u;
}

RenderedImage Renderer::render(const IdentityLatent& latent, int age, std::int64_t source_id,
                               std::int64_t domain_id, Rng& rng) const {
  RenderedImage img;
  const double quality = 1.0 - 0.7 * uniform01(rng);  // (0.3, 1.0]
  const double jitter = normal(rng, 0.0, 1.0) * cfg_.label_noise_sd;
  img.apparent = std::clamp(apparent_age(cfg_, latent, age) + jitter, static_cast<double>(cfg_.age_lo),
                            static_cast<double>(cfg_.age_hi));
  const std::vector<double> z = age_basis(cfg_, img.apparent, quality);
  const std::vector<double> us = source_offset(source_id);
  const std::vector<double> ud = domain_offset(domain_id);
  const double noise_sd = cfg_.feature_noise_base + cfg_.quality_noise_gain * (1.0 - quality);

  const auto dim = static_cast<std::size_t>(cfg_.dim);
  const auto T = static_cast<std::size_t>(cfg_.tokens_per_image);
  img.tokens.resize(T * dim);
  std::vector<double> cls(dim, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const auto& w = projections_[t];
    for (std::size_t r = 0; r < dim; ++r) {
      double v = us[r] + ud[r];
      const double* wr = w.data() + r * static_cast<std::size_t>(basis_dim_);
      for (std::size_t c = 0; c < z.size(); ++c) v += wr[c] * z[c];
      v += normal(rng, 0.0, 1.0) * noise_sd;
      img.tokens[t * dim + r] = static_cast<float>(v);
      cls[r] += v;
    }
  }
  img.cls.resize(dim);
  for (std::size_t r = 0; r < dim; ++r) img.cls[r] = static_cast<float>(cls[r] / static_cast<double>(T));

  img.record.identity_id = latent.identity_id;
  img.record.age_years = age;
  img.record.source_id = source_id;
  img.record.domain_id = domain_id;
  img.record.quality = quality;
  return img;
}

RenderedImage render_image(const WorldConfig& cfg, const IdentityLatent& latent, int age, std::int64_t source_id,
                           std::int64_t domain_id, Rng& rng) {
  return Renderer(cfg).render(latent, age, source_id, domain_id, rng);
}

bool identity_in_test_split(const WorldConfig& cfg, std::int64_t identity_id) {
  const std::uint64_t h = hash_keys(cfg.seed, {static_cast<std::uint64_t>(Stream::kSplit),
                                               static_cast<std::uint64_t>(identity_id)});
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  return u < cfg.test_fraction;
}

namespace {

constexpr std::int64_t kPerIdentityStride = 4096;

struct IdentityBlock {
  IdentityLatent latent;
  std::vector<RenderedImage> images;
};

IdentityBlock render_identity(const WorldConfig& cfg, const Renderer& renderer, std::int64_t id) {
  IdentityBlock block;
  Rng rng = make_stream(cfg.seed, Stream::kIdentity, {static_cast<std::uint64_t>(id)});
  block.latent = sample_identity(cfg, id, rng);
  const int n = cfg.images.sample(rng);
  const int n_sources = std::max(1, static_cast<int>(std::ceil(n / cfg.images_per_source)));
  std::vector<double> source_time(static_cast<std::size_t>(n_sources));
  const double width = block.latent.window_end - block.latent.window_start;
  for (double& t : source_time) t = block.latent.window_start + width * uniform01(rng);

  for (int j = 0; j < n; ++j) {
    const int s = j % n_sources;
    Rng img_rng = make_stream(cfg.seed, Stream::kImage,
                              {static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(j)});
    // Stills of one scene are taken within a year of each other.
    const double when = source_time[static_cast<std::size_t>(s)] + uniform01(img_rng);
    const int age = std::clamp(static_cast<int>(std::lround(when)), cfg.age_lo, cfg.age_hi);
    const std::int64_t source_id = id * kPerIdentityStride + s;
    RenderedImage img = renderer.render(block.latent, age, source_id, block.latent.domain_id, img_rng);
    img.record.image_id = id * kPerIdentityStride + j;
    block.images.push_back(std::move(img));
  }
  return block;
}

}  // namespace

GeneratedSplit generate_split(const WorldConfig& cfg, int n_identities, const std::string& split, int jobs) {
  cfg.validate();
  if (n_identities <= 0) throw std::invalid_argument("n_identities must be positive");
  if (split != "train" && split != "test") throw std::invalid_argument("split must be 'train' or 'test'");
  const bool want_test = split == "test";

  std::vector<std::int64_t> ids;
  for (int k = 0; k < n_identities; ++k) {
    const std::int64_t id = cfg.identity_base + k;
    if (identity_in_test_split(cfg, id) == want_test) ids.push_back(id);
  }

  const Renderer renderer(cfg);
  std::vector<IdentityBlock> blocks(ids.size());
  const std::size_t workers = static_cast<std::size_t>(std::max(1, jobs));
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < ids.size(); i += workers) blocks[i] = render_identity(cfg, renderer, ids[i]);
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
  }

  GeneratedSplit out;
  auto& ds = out.dataset;
  std::size_t count = 0;
  for (const auto& b : blocks) count += b.images.size();
  const auto dim = static_cast<std::size_t>(cfg.dim);
  const auto T = static_cast<std::size_t>(cfg.tokens_per_image);
  ds.header.dim = dim;
  ds.header.count = count;
  ds.header.seed = cfg.seed;
  ds.header.world_digest = world_digest(cfg);
  ds.header.split = split;
  ds.header.age_lo = cfg.age_lo;
  ds.header.age_hi = cfg.age_hi;
  ds.header.tokens_per_image = T;
  ds.features = FeatureMatrix(count, dim);
  ds.tokens = FeatureMatrix(count * T, dim);
  ds.records.reserve(count);
  out.apparent.reserve(count);

  std::size_t row = 0;
  for (auto& b : blocks) {
    for (auto& img : b.images) {
      img.record.feature_row = row;
      ds.records.push_back(img.record);
      out.apparent.push_back(img.apparent);
      std::copy(img.cls.begin(), img.cls.end(), ds.features.row(row).begin());
      std::copy(img.tokens.begin(), img.tokens.end(), ds.tokens.data().begin() + static_cast<std::ptrdiff_t>(row * T * dim));
      ++row;
    }
    out.latents.push_back(b.latent);
  }
  ds.validate();
  return out;
}

Dataset generate_dataset(const WorldConfig& cfg, int n_identities, const std::string& split, int jobs) {
  return generate_split(cfg, n_identities, split, jobs).dataset;
}

Prediction constant_bias_posterior_predictive(double target_apparent, std::span<const double> residuals,
                                              double bias_sd, double obs_sd) {
  const double obs_var = obs_sd * obs_sd;
  const double n = static_cast<double>(residuals.size());
  if (residuals.empty()) return {target_apparent, bias_sd * bias_sd + obs_var};
  double sum = 0.0;
  for (double r : residuals) sum += r;
  double post_mean = 0.0;
  double post_var = 0.0;
  if (!std::isfinite(bias_sd)) {
    post_mean = sum / n;
    post_var = obs_var / n;
  } else if (bias_sd == 0.0) {
    post_mean = 0.0;
    post_var = 0.0;
  } else if (obs_var == 0.0) {
    post_mean = sum / n;
    post_var = 0.0;
  } else {
    const double precision = 1.0 / (bias_sd * bias_sd) + n / obs_var;
    post_var = 1.0 / precision;
    post_mean = post_var * sum / obs_var;
  }
  // Residuals observe -theta_bias; the target's label sits at a* plus that offset.
  return {target_apparent + post_mean, post_var + obs_var};
}

BayesOracle::BayesOracle(const WorldConfig& cfg, std::vector<double> apparent_by_row)
    : cfg_(cfg), apparent_(std::move(apparent_by_row)) {
  if (cfg_.kind != WorldKind::kConstantBias) {
    throw std::invalid_argument("the analytic Bayes oracle exists only for the constant-bias world");
  }
}

Prediction BayesOracle::predict(const Query& q) const {
  std::vector<double> residuals;
  residuals.reserve(q.context.size());
  for (const auto& e : q.context) residuals.push_back(e.age - apparent_.at(e.row));
  return constant_bias_posterior_predictive(apparent_.at(q.target_row), residuals, cfg_.bias_sd,
                                            cfg_.label_noise_sd);
}

}  // namespace refage::synth
