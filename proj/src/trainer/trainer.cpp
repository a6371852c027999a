#include "refage/trainer/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>

#include "refage/core/errors.hpp"
#include "refage/protocol/protocol.hpp"

namespace refage::train {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (max_batches < 0) throw ConfigError("/max_batches", "must be >= 0");
  if (lr < 0) throw ConfigError("/lr", "must be >= 0");
  if (lr_schedule != "constant" && lr_schedule != "cosine") {
    throw ConfigError("/lr_schedule", "expected \"constant\" or \"cosine\"");
  }
  if (weight_decay < 0) throw ConfigError("/weight_decay", "must be >= 0");
  if (ema_decay < 0 || ema_decay > 1) throw ConfigError("/ema_decay", "must be in [0, 1]");
  if (ref_age_noise_sd < 0) throw ConfigError("/ref_age_noise_sd", "must be >= 0");
  if (!(grad_clip > 0)) throw ConfigError("/grad_clip", "must be > 0");
  if (n_min < 1 || n_max < n_min) throw ConfigError("/n_range", "need 1 <= n_min <= n_max");
  if (identities_per_batch < 1) throw ConfigError("/identities_per_batch", "must be >= 1");
  if (holdout_fraction < 0 || holdout_fraction >= 1) throw ConfigError("/holdout_fraction", "must be in [0, 1)");
  if (holdout_refs < 1) throw ConfigError("/holdout_refs", "must be >= 1");
  if (log_every < 1) throw ConfigError("/log_every", "must be >= 1");
  if (eval_every < 0) throw ConfigError("/eval_every", "must be >= 0");
}

json to_json(const TrainConfig& c) {
  return {{"max_batches", c.max_batches},
          {"lr", c.lr},
          {"lr_input", c.lr_input},
          {"lr_schedule", c.lr_schedule},
          {"weight_decay", c.weight_decay},
          {"ema_decay", c.ema_decay},
          {"ref_age_noise_sd", c.ref_age_noise_sd},
          {"grad_clip", c.grad_clip},
          {"n_range", {c.n_min, c.n_max}},
          {"identities_per_batch", c.identities_per_batch},
          {"holdout_fraction", c.holdout_fraction},
          {"holdout_refs", c.holdout_refs},
          {"log_every", c.log_every},
          {"eval_every", c.eval_every},
          {"log_wall_time", c.log_wall_time},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "max_batches") c.max_batches = v.get<int>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "lr_input") c.lr_input = v.get<double>();
      else if (key == "lr_schedule") c.lr_schedule = v.get<std::string>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "ema_decay") c.ema_decay = v.get<double>();
      else if (key == "ref_age_noise_sd") c.ref_age_noise_sd = v.get<double>();
      else if (key == "grad_clip") c.grad_clip = v.get<double>();
      else if (key == "n_range") {
        const auto r = v.get<std::vector<int>>();
        if (r.size() != 2) throw ConfigError("/n_range", "expected [min, max]");
        c.n_min = r[0];
        c.n_max = r[1];
      } else if (key == "identities_per_batch") c.identities_per_batch = v.get<int>();
      else if (key == "holdout_fraction") c.holdout_fraction = v.get<double>();
      else if (key == "holdout_refs") c.holdout_refs = v.get<int>();
      else if (key == "log_every") c.log_every = v.get<int>();
      else if (key == "eval_every") c.eval_every = v.get<int>();
      else if (key == "log_wall_time") c.log_wall_time = v.get<bool>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw ConfigError("/" + key, "unknown key");
    } catch (const json::exception& e) {
      throw ConfigError("/" + key, e.what());
    }
  }
  c.validate();
  return c;
}

EpisodeSampler::EpisodeSampler(const Dataset& ds, std::span<const std::int64_t> identities, const TrainConfig& cfg)
    : ds_(&ds), cfg_(cfg), index_(IdentityIndex::build(ds)) {
  eligible_.resize(static_cast<std::size_t>(cfg.n_max) + 1);
  for (std::int64_t id : identities) {
    auto it = index_.rows_of.find(id);
    if (it == index_.rows_of.end()) continue;
    const std::size_t count = it->second.size();
    for (int n = 1; n <= cfg.n_max; ++n) {
      if (count >= static_cast<std::size_t>(n) + 1) eligible_[static_cast<std::size_t>(n)].push_back(id);
    }
  }
  if (eligible_[1].empty()) throw std::invalid_argument("no identity has at least two images");
}

EpisodeBatch EpisodeSampler::sample(Rng& rng) const {
  std::uniform_int_distribution<int> pick_n(cfg_.n_min, cfg_.n_max);
  const std::size_t want = static_cast<std::size_t>(cfg_.identities_per_batch);
  int n = pick_n(rng);
  // Resample N until enough identities can supply N+1 images; the batch shrinks
  // only when even N = n_min cannot fill it.
  for (int attempt = 0; eligible_[static_cast<std::size_t>(n)].size() < want; ++attempt) {
    if (attempt >= 64) {
      n = cfg_.n_min;
      while (n > 1 && eligible_[static_cast<std::size_t>(n)].empty()) --n;
      break;
    }
    n = pick_n(rng);
  }
  std::vector<std::int64_t> pool = eligible_[static_cast<std::size_t>(n)];
  const std::size_t take = std::min(want, pool.size());
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> u(i, pool.size() - 1);
    std::swap(pool[i], pool[u(rng)]);
  }
  EpisodeBatch batch;
  batch.n_refs = n;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < take; ++i) {
    const std::int64_t id = pool[i];
    std::vector<std::size_t> rows = index_.rows(id);
    std::shuffle(rows.begin(), rows.end(), rng);
    const std::size_t target = rows[0];
    const auto& tr = ds_->records[target];
    std::vector<std::size_t> others(rows.begin() + 1, rows.end());
    std::stable_partition(others.begin(), others.end(),
                          [&](std::size_t r) { return ds_->records[r].source_id != tr.source_id; });
    Episode ep;
    ep.identity_id = id;
    ep.target_row = target;
    ep.target_age = tr.age_years;
    for (int k = 0; k < n; ++k) {
      const std::size_t r = others[static_cast<std::size_t>(k)];
      double age = ds_->records[r].age_years;
      if (cfg_.ref_age_noise_sd > 0) age = std::max(0.0, age + cfg_.ref_age_noise_sd * noise(rng));
      ep.context.push_back({r, age});
    }
    batch.episodes.push_back(std::move(ep));
  }
  return batch;
}

EpisodeBatch sample_episode_batch(const Dataset& ds, const TrainConfig& cfg, Rng& rng) {
  const auto ids = IdentityIndex::build(ds).identities;
  return EpisodeSampler(ds, ids, cfg).sample(rng);
}

double loss_gaussian_nll(std::span<const double> mu, std::span<const double> logvar, std::span<const double> y,
                         double var_floor) {
  if (mu.size() != y.size() || logvar.size() != y.size() || y.empty()) {
    throw std::invalid_argument("loss_gaussian_nll: inputs must have equal non-zero length");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double s2 = std::max(std::exp(logvar[i]), var_floor);
    total += (y[i] - mu[i]) * (y[i] - mu[i]) / (2.0 * s2) + 0.5 * std::log(s2);
  }
  return total / static_cast<double>(y.size());
}

AttnTrainer::AttnTrainer(est::AttnModel model, const TrainConfig& cfg)
    : model_(std::move(model)), cfg_(cfg), params_(est::param_buffers<float>(model_.params)), ema_(params_) {
  cfg_.validate();
  for (std::size_t i = 0; i < model_.params.size(); ++i) {
    const auto& name = model_.params.names[i];
    (name.rfind("in.", 0) == 0 ? input_group_ : main_group_).push_back(i);
  }
}

namespace {

void group_step(num::Buffers<float>& params, num::Buffers<float>& grads, const std::vector<std::size_t>& group,
                num::AdamState<float>& state, const num::AdamWConfig& cfg) {
  if (group.empty()) return;
  num::Buffers<float> p, g;
  for (std::size_t i : group) {
    p.push_back(std::move(params[i]));
    g.push_back(std::move(grads[i]));
  }
  num::adamw_step(p, g, state, cfg);
  for (std::size_t k = 0; k < group.size(); ++k) params[group[k]] = std::move(p[k]);
}

}  // namespace

StepStats AttnTrainer::step(const Dataset& ds, const EpisodeBatch& batch) {
  std::vector<std::size_t> targets;
  std::vector<std::span<const ContextEntry>> contexts;
  std::vector<float> y;
  for (const auto& ep : batch.episodes) {
    targets.push_back(ep.target_row);
    contexts.emplace_back(ep.context);
    y.push_back(static_cast<float>(ep.target_age));
  }
  const auto ab = est::make_attn_batch(ds, model_.cfg.kind, targets, contexts);

  num::Tape<float> tape;
  const auto vars = est::bind_params(tape, model_.params, params_, true);
  const auto g = est::attn_forward(tape, model_, vars, ab);
  const num::Var loss = tape.gaussian_nll(g.mu, g.logvar, y, static_cast<float>(est::kVarianceFloor));
  StepStats st;
  st.loss = tape.value(loss)[0];
  if (!std::isfinite(st.loss)) {
    std::ostringstream os;
    os << "non-finite training loss at step " << steps_ << " (N=" << batch.n_refs << ", identities:";
    for (const auto& ep : batch.episodes) os << ' ' << ep.identity_id;
    os << ")";
    throw NumericError(os.str());
  }
  tape.backward(loss);
  num::Buffers<float> grads;
  grads.reserve(vars.size());
  for (const auto& v : vars) {
    const auto gr = tape.grad(v);
    grads.emplace_back(gr.begin(), gr.end());
  }
  st.grad_norm = num::clip_grad_norm(grads, cfg_.grad_clip);
  st.clipped_grad_norm = num::global_norm(grads);

  if (cfg_.lr > 0) {
    num::AdamWConfig main{cfg_.lr * lr_scale_, 0.9, 0.999, 1e-8, cfg_.weight_decay};
    num::AdamWConfig input = main;
    if (cfg_.lr_input >= 0) input.lr = cfg_.lr_input * lr_scale_;
    if (main.lr > 0) group_step(params_, grads, main_group_, main_state_, main);
    if (input.lr > 0) group_step(params_, grads, input_group_, input_state_, input);
  }
  num::ema_update(ema_, params_, cfg_.ema_decay);
  ++steps_;
  return st;
}

namespace {

est::AttnModel with_values(const est::AttnModel& base, const num::Buffers<float>& values) {
  est::AttnModel m = base;
  m.params.values = values;
  return m;
}

}  // namespace

est::AttnModel AttnTrainer::raw_model() const { return with_values(model_, params_); }
est::AttnModel AttnTrainer::ema_model() const { return with_values(model_, ema_); }

namespace {

struct Holdout {
  std::vector<std::size_t> targets;
  std::vector<std::vector<ContextEntry>> contexts;
  std::vector<std::int64_t> identities;
};

Holdout make_holdout(const Dataset& ds, std::span<const std::int64_t> ids, int refs, std::uint64_t seed) {
  const auto index = IdentityIndex::build(ds);
  Holdout h;
  for (std::int64_t id : ids) {
    auto rows = index.rows(id);
    if (rows.size() < 2) continue;
    Rng rng = make_stream(seed, Stream::kEpisodes, {0x401DULL, static_cast<std::uint64_t>(id)});
    std::shuffle(rows.begin(), rows.end(), rng);
    std::vector<ContextEntry> ctx;
    for (std::size_t k = 1; k < rows.size() && static_cast<int>(ctx.size()) < refs; ++k) {
      ctx.push_back({rows[k], static_cast<double>(ds.records[rows[k]].age_years)});
    }
    h.targets.push_back(rows[0]);
    h.contexts.push_back(std::move(ctx));
    h.identities.push_back(id);
  }
  return h;
}

double holdout_mae_id(const est::AttnModel& model, const Dataset& ds, const Holdout& h) {
  if (h.targets.empty()) return 0.0;
  const auto params = est::param_buffers<double>(model.params);
  std::vector<std::pair<std::int64_t, double>> errors;
  for (std::size_t i = 0; i < h.targets.size(); ++i) {
    const std::size_t t[] = {h.targets[i]};
    const std::span<const ContextEntry> c[] = {h.contexts[i]};
    const auto p = est::attn_predict(model, params, est::make_attn_batch(ds, model.cfg.kind, t, c))[0];
    errors.emplace_back(h.identities[i], std::abs(p.mean - ds.records[h.targets[i]].age_years));
  }
  return proto::mae_id(errors);
}

}  // namespace

TrainResult train_attention_model(est::AttnModel model, const Dataset& ds, const TrainConfig& cfg,
                                  std::ostream* log_sink) {
  cfg.validate();
  const auto holdout_ids = est::validation_identities(ds, cfg.holdout_fraction, cfg.seed);
  std::vector<std::int64_t> train_ids;
  for (std::int64_t id : IdentityIndex::build(ds).identities) {
    if (!std::binary_search(holdout_ids.begin(), holdout_ids.end(), id)) train_ids.push_back(id);
  }
  const EpisodeSampler sampler(ds, train_ids, cfg);
  const Holdout holdout = make_holdout(ds, holdout_ids, cfg.holdout_refs, cfg.seed);
  Rng rng = make_stream(cfg.seed, Stream::kEpisodes);
  AttnTrainer trainer(std::move(model), cfg);
  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  auto emit = [&](json rec) {
    if (cfg.log_wall_time) {
      rec["wall_time"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    if (log_sink) *log_sink << rec.dump() << '\n';
    result.log.push_back(std::move(rec));
  };

  double running = 0.0;
  int running_count = 0;
  for (int step = 0; step < cfg.max_batches; ++step) {
    double scale = 1.0;
    if (cfg.lr_schedule == "cosine") {
      scale = 0.5 * (1.0 + std::cos(std::numbers::pi * step / cfg.max_batches));
    }
    trainer.set_lr_scale(scale);
    const auto batch = sampler.sample(rng);
    const auto st = trainer.step(ds, batch);
    running += st.loss;
    ++running_count;
    const bool last = step + 1 == cfg.max_batches;
    if (step % cfg.log_every == 0 || last) {
      emit({{"step", step},
            {"loss", st.loss},
            {"loss_avg", running / running_count},
            {"grad_norm", st.grad_norm},
            {"clipped_grad_norm", st.clipped_grad_norm},
            {"n_refs", batch.n_refs},
            {"lr_scale", scale}});
      running = 0.0;
      running_count = 0;
    }
    if (cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || last)) {
      emit({{"step", step},
            {"holdout_mae_id_ema", holdout_mae_id(trainer.ema_model(), ds, holdout)},
            {"holdout_mae_id_raw", holdout_mae_id(trainer.raw_model(), ds, holdout)}});
    }
  }
  result.model = trainer.ema_model();
  result.raw = trainer.raw_model();
  result.final_holdout_ema = holdout_mae_id(result.model, ds, holdout);
  result.final_holdout_raw = holdout_mae_id(result.raw, ds, holdout);
  emit({{"final", true},
        {"steps", trainer.steps()},
        {"holdout_mae_id_ema", result.final_holdout_ema},
        {"holdout_mae_id_raw", result.final_holdout_raw},
        {"ema_guard_ok", result.final_holdout_ema <= 1.5 * result.final_holdout_raw}});
  return result;
}

}  // namespace refage::train
