#include "refage/estimators/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "refage/core/errors.hpp"
#include "refage/core/rng.hpp"

namespace refage::est {

using json = nlohmann::json;
using num::Shape;
using num::Tape;
using num::Var;

std::string to_string(AttnKind kind) { return kind == AttnKind::kJoint ? "joint" : "spatial"; }

AttnKind attn_kind_from_string(const std::string& s) {
  if (s == "joint") return AttnKind::kJoint;
  if (s == "spatial") return AttnKind::kSpatial;
  throw std::invalid_argument("unknown attention kind '" + s + "' (expected joint or spatial)");
}

void AttnConfig::validate() const {
  if (in_dim < 1) throw ConfigError("/in_dim", "must be >= 1");
  if (d_model < 2 || d_model % 2 != 0) throw ConfigError("/d_model", "must be even and >= 2");
  if (n_heads < 1 || d_model % n_heads != 0) throw ConfigError("/n_heads", "must divide d_model");
  if (n_layers < 1) throw ConfigError("/n_layers", "must be >= 1");
  if (ff_mult < 1) throw ConfigError("/ff_mult", "must be >= 1");
  if (!(omega > 0)) throw ConfigError("/omega", "must be > 0");
}

json to_json(const AttnConfig& c) {
  return {{"kind", to_string(c.kind)}, {"in_dim", c.in_dim},   {"d_model", c.d_model}, {"n_heads", c.n_heads},
          {"n_layers", c.n_layers},    {"ff_mult", c.ff_mult}, {"omega", c.omega},     {"seed", c.seed}};
}

AttnConfig attn_config_from_json(const json& j) {
  AttnConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "kind") c.kind = attn_kind_from_string(value.get<std::string>());
      else if (key == "in_dim") c.in_dim = value.get<int>();
      else if (key == "d_model") c.d_model = value.get<int>();
      else if (key == "n_heads") c.n_heads = value.get<int>();
      else if (key == "n_layers") c.n_layers = value.get<int>();
      else if (key == "ff_mult") c.ff_mult = value.get<int>();
      else if (key == "omega") c.omega = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("/" + key, "unknown key");
    } catch (const json::exception& e) {
      throw ConfigError("/" + key, e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError("/" + key, e.what());
    }
  }
  c.validate();
  return c;
}

std::vector<double> sinusoidal_age_embedding(double age, int d_model, double omega) {
  if (d_model <= 0 || d_model % 2 != 0) throw std::invalid_argument("age embedding needs an even d_model");
  std::vector<double> emb(static_cast<std::size_t>(d_model));
  for (int k = 0; k < d_model / 2; ++k) {
    const double freq = std::pow(omega, 2.0 * k / d_model);
    emb[static_cast<std::size_t>(2 * k)] = std::sin(age / freq);
    emb[static_cast<std::size_t>(2 * k + 1)] = std::cos(age / freq);
  }
  return emb;
}

std::vector<double> build_attention_mask(int n_refs) {
  if (n_refs < 0) throw std::invalid_argument("negative reference count");
  const auto L = static_cast<std::size_t>(n_refs + 1);
  const auto N = static_cast<std::size_t>(n_refs);
  std::vector<double> m(L * L, num::kMaskedLogit);
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < L; ++j) {
      if ((i < N && j < N) || i == N) m[i * L + j] = 0.0;
    }
  }
  return m;
}

namespace {

struct Init {
  Rng rng;
  num::ParamSet* ps;

  void linear(const std::string& name, int fan_in, int fan_out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<float> w(static_cast<std::size_t>(fan_in) * static_cast<std::size_t>(fan_out));
    for (float& v : w) v = static_cast<float>(u(rng));
    ps->add(name + ".w", {fan_in, fan_out}, std::move(w));
    ps->add(name + ".b", {fan_out}, std::vector<float>(static_cast<std::size_t>(fan_out), 0.0f));
  }
  void norm(const std::string& name, int d) {
    ps->add(name + ".g", {d}, std::vector<float>(static_cast<std::size_t>(d), 1.0f));
    ps->add(name + ".b", {d}, std::vector<float>(static_cast<std::size_t>(d), 0.0f));
  }
  void block(const std::string& name, int d, int ff) {
    norm(name + ".ln1", d);
    linear(name + ".q", d, d);
    linear(name + ".k", d, d);
    linear(name + ".v", d, d);
    linear(name + ".o", d, d);
    norm(name + ".ln2", d);
    linear(name + ".ff1", d, ff);
    linear(name + ".ff2", ff, d);
  }
};

}  // namespace

AttnModel AttnModel::init(const AttnConfig& cfg) {
  cfg.validate();
  AttnModel m;
  m.cfg = cfg;
  Init in{make_stream(cfg.seed, Stream::kInit, {static_cast<std::uint64_t>(cfg.kind)}), &m.params};
  const int D = cfg.d_model, F = cfg.d_model * cfg.ff_mult;
  in.linear("in", cfg.in_dim, D);
  m.params.add("placeholder", {D}, std::vector<float>(static_cast<std::size_t>(D), 0.0f));
  if (cfg.kind == AttnKind::kJoint) {
    for (int l = 0; l < cfg.n_layers; ++l) in.block("block" + std::to_string(l), D, F);
  } else {
    in.norm("memory_ln", D);
    in.block("cross", D, F);
    in.block("self", D, F);
  }
  in.norm("final_ln", D);
  in.linear("head_mu", D, 1);
  in.linear("head_logvar", D, 1);
  return m;
}

num::Checkpoint to_checkpoint(const AttnModel& model, std::int64_t step, bool ema) {
  return num::Checkpoint{to_json(model.cfg), step, ema, model.params};
}

AttnModel attn_model_from_checkpoint(const num::Checkpoint& ckpt) {
  AttnModel m;
  m.cfg = attn_config_from_json(ckpt.config);
  const AttnModel fresh = AttnModel::init(m.cfg);
  if (fresh.params.names != ckpt.params.names || fresh.params.shapes != ckpt.params.shapes) {
    throw std::invalid_argument("checkpoint parameters do not match the architecture config");
  }
  m.params = ckpt.params;
  return m;
}

AttnBatch make_attn_batch(const Dataset& ds, AttnKind kind, std::span<const std::size_t> target_rows,
                          std::span<const std::span<const ContextEntry>> contexts) {
  if (target_rows.size() != contexts.size()) throw std::invalid_argument("one context per target required");
  AttnBatch b;
  b.batch = static_cast<int>(target_rows.size());
  b.n_refs = contexts.empty() ? 0 : static_cast<int>(contexts[0].size());
  b.in_dim = static_cast<int>(ds.dim());
  if (kind == AttnKind::kSpatial) {
    if (!ds.has_tokens()) throw std::invalid_argument("spatial model needs a dataset with tokens");
    b.tokens = static_cast<int>(ds.header.tokens_per_image);
  }
  auto append = [&](std::vector<double>& dst, std::size_t row) {
    const std::size_t fr = ds.records[row].feature_row;
    const auto src = kind == AttnKind::kSpatial ? ds.token_block(fr) : ds.feature(fr);
    dst.insert(dst.end(), src.begin(), src.end());
  };
  for (std::size_t i = 0; i < target_rows.size(); ++i) {
    if (static_cast<int>(contexts[i].size()) != b.n_refs) throw std::invalid_argument("contexts differ in size");
    append(b.target, target_rows[i]);
    for (const auto& e : contexts[i]) {
      append(b.refs, e.row);
      b.ages.push_back(e.age);
    }
  }
  return b;
}

template <class T>
std::vector<Var> bind_params(Tape<T>& tape, const num::ParamSet& layout, const num::Buffers<T>& values,
                             bool trainable) {
  if (values.size() != layout.size()) throw std::invalid_argument("parameter buffer count mismatch");
  std::vector<Var> vars;
  vars.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    vars.push_back(trainable ? tape.parameter(layout.shapes[i], values[i]) : tape.constant(layout.shapes[i], values[i]));
  }
  return vars;
}

template <class T>
num::Buffers<T> param_buffers(const num::ParamSet& params) {
  num::Buffers<T> out;
  out.reserve(params.size());
  for (const auto& v : params.values) out.emplace_back(v.begin(), v.end());
  return out;
}

namespace {

template <class T>
class Net {
 public:
  Net(Tape<T>& tape, const AttnModel& model, std::span<const Var> params)
      : t_(tape), model_(model), params_(params) {}

  Var p(const std::string& name) const { return params_[model_.params.index(name)]; }

  Var linear(Var x, const std::string& name) { return t_.add(t_.matmul(x, p(name + ".w")), p(name + ".b")); }

  Var norm(Var x, const std::string& name) {
    return t_.add(t_.mul(t_.layer_norm(x), p(name + ".g")), p(name + ".b"));
  }

  // Multi-head attention of q_in [B, Lq, D] over kv_in [B, Lk, D].
  Var attention(Var q_in, Var kv_in, const std::string& name, std::span<const T> mask) {
    const int D = model_.cfg.d_model, H = model_.cfg.n_heads, dh = D / H;
    const Var q = linear(q_in, name + ".q");
    const Var k = linear(kv_in, name + ".k");
    const Var v = linear(kv_in, name + ".v");
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Var> heads;
    heads.reserve(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) {
      const Var qh = t_.slice(q, 2, h * dh, (h + 1) * dh);
      const Var kh = t_.slice(k, 2, h * dh, (h + 1) * dh);
      const Var vh = t_.slice(v, 2, h * dh, (h + 1) * dh);
      const Var scores = t_.affine(t_.matmul(qh, kh, true), scale, T(0));
      heads.push_back(t_.matmul(t_.masked_softmax(scores, mask), vh));
    }
    const Var joined = H == 1 ? heads[0] : t_.concat(heads, 2);
    return linear(joined, name + ".o");
  }

  Var feed_forward(Var x, const std::string& name) {
    return linear(t_.gelu(linear(x, name + ".ff1")), name + ".ff2");
  }

  // Pre-LN block; with `memory` set, the attention is cross-attention.
  Var block(Var x, const std::string& name, std::span<const T> mask, const Var* memory = nullptr) {
    const Var h = norm(x, name + ".ln1");
    x = t_.add(x, attention(h, memory ? *memory : h, name, mask));
    return t_.add(x, feed_forward(norm(x, name + ".ln2"), name));
  }

  void heads(Var pooled, AttnGraph<T>& out) {
    const Var h = norm(pooled, "final_ln");
    out.mu = t_.affine(t_.sigmoid(linear(h, "head_mu")), T(100), T(0));
    out.logvar = linear(h, "head_logvar");
  }

  std::vector<T> age_embeddings(const AttnBatch& b, int repeat) const {
    const int D = model_.cfg.d_model;
    std::vector<T> out;
    out.reserve(b.ages.size() * static_cast<std::size_t>(repeat * D));
    for (double age : b.ages) {
      const auto e = sinusoidal_age_embedding(age, D, model_.cfg.omega);
      for (int r = 0; r < repeat; ++r) {
        for (double v : e) out.push_back(static_cast<T>(v));
      }
    }
    return out;
  }

 private:
  Tape<T>& t_;
  const AttnModel& model_;
  std::span<const Var> params_;
};

template <class T>
std::vector<T> cast(const std::vector<double>& v) {
  return std::vector<T>(v.begin(), v.end());
}

}  // namespace

template <class T>
AttnGraph<T> attn_forward(Tape<T>& tape, const AttnModel& model, std::span<const Var> params, const AttnBatch& b) {
  const auto& cfg = model.cfg;
  if (b.in_dim != cfg.in_dim) {
    throw std::invalid_argument("model expects input dim " + std::to_string(cfg.in_dim) + ", got " +
                                std::to_string(b.in_dim));
  }
  if (b.batch < 1 || b.n_refs < 1) throw std::invalid_argument("attention forward needs B >= 1 and N >= 1");
  if (cfg.kind == AttnKind::kJoint && b.tokens != 1) throw std::invalid_argument("joint model takes one row per image");
  const std::size_t per_image = static_cast<std::size_t>(b.tokens) * static_cast<std::size_t>(b.in_dim);
  if (b.target.size() != static_cast<std::size_t>(b.batch) * per_image ||
      b.refs.size() != static_cast<std::size_t>(b.batch) * static_cast<std::size_t>(b.n_refs) * per_image ||
      b.ages.size() != static_cast<std::size_t>(b.batch) * static_cast<std::size_t>(b.n_refs)) {
    throw std::invalid_argument("attention batch buffers do not match the declared token count");
  }

  Net<T> net(tape, model, params);
  AttnGraph<T> out;
  const int B = b.batch, N = b.n_refs, D = cfg.d_model, Tk = b.tokens;
  const Var target = tape.constant({B, Tk, cfg.in_dim}, cast<T>(b.target));
  const Var refs = tape.constant({B, N * Tk, cfg.in_dim}, cast<T>(b.refs));
  const Var emb = tape.constant({B, N * Tk, D}, net.age_embeddings(b, Tk));
  const Var ref_tokens = tape.add(net.linear(refs, "in"), emb);
  const Var target_tokens = tape.add(net.linear(target, "in"), net.p("placeholder"));

  if (cfg.kind == AttnKind::kJoint) {
    const auto mask_d = build_attention_mask(N);
    const std::vector<T> mask(mask_d.begin(), mask_d.end());
    const Var seq_parts[] = {ref_tokens, target_tokens};
    Var x = tape.concat(seq_parts, 1);
    for (int l = 0; l < cfg.n_layers; ++l) {
      x = net.block(x, "block" + std::to_string(l), mask);
      out.hidden.push_back(x);
    }
    const Var tgt = tape.reshape(tape.slice(x, 1, N, N + 1), {B, D});
    net.heads(tgt, out);
  } else {
    const Var memory = net.norm(ref_tokens, "memory_ln");
    Var x = net.block(target_tokens, "cross", {}, &memory);
    out.hidden.push_back(x);
    x = net.block(x, "self", {});
    out.hidden.push_back(x);
    net.heads(tape.mean(x, 1), out);
  }
  return out;
}

std::vector<Prediction> attn_predict(const AttnModel& model, const num::Buffers<double>& params, const AttnBatch& batch) {
  Tape<double> tape;
  const auto vars = bind_params(tape, model.params, params, false);
  const auto g = attn_forward(tape, model, vars, batch);
  const auto mu = tape.value(g.mu);
  const auto lv = tape.value(g.logvar);
  std::vector<Prediction> out(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    out[i] = {mu[i], std::max(std::exp(lv[i]), kVarianceFloor)};
    if (!std::isfinite(out[i].mean) || !std::isfinite(out[i].variance)) {
      throw NumericError("attention model produced a non-finite prediction");
    }
  }
  return out;
}

Prediction pair_avg_predict(const AttnModel& model, const num::Buffers<double>& params, const Dataset& ds,
                            std::size_t target_row, std::span<const ContextEntry> context) {
  if (context.empty()) throw std::invalid_argument("pair averaging needs at least one reference");
  // One pass per reference; a batched pass is not bit-identical to single passes.
  const std::size_t targets[] = {target_row};
  const double n = static_cast<double>(context.size());
  Prediction p{0.0, 0.0};
  for (std::size_t j = 0; j < context.size(); ++j) {
    const std::span<const ContextEntry> single[] = {context.subspan(j, 1)};
    const auto q = attn_predict(model, params, make_attn_batch(ds, model.cfg.kind, targets, single))[0];
    p.mean += q.mean;
    p.variance += q.variance;
  }
  p.mean /= n;
  p.variance /= n * n;
  return p;
}

AttnEstimator::AttnEstimator(AttnModel model, GlobalHead head, bool pair_average)
    : model_(std::move(model)),
      params_(param_buffers<double>(model_.params)),
      head_(std::move(head)),
      pair_average_(pair_average) {}

std::string AttnEstimator::name() const {
  if (pair_average_) return "pair_avg";
  return model_.cfg.kind == AttnKind::kJoint ? "attn_joint" : "attn_spatial";
}

Prediction AttnEstimator::predict(const Query& q) const {
  if (q.context.empty()) {
    return global_predict(head_, q.data->feature(q.data->records[q.target_row].feature_row));
  }
  if (pair_average_) return pair_avg_predict(model_, params_, *q.data, q.target_row, q.context);
  const std::size_t targets[] = {q.target_row};
  const std::span<const ContextEntry> contexts[] = {q.context};
  return attn_predict(model_, params_, make_attn_batch(*q.data, model_.cfg.kind, targets, contexts))[0];
}

template std::vector<Var> bind_params<float>(Tape<float>&, const num::ParamSet&, const num::Buffers<float>&, bool);
template std::vector<Var> bind_params<double>(Tape<double>&, const num::ParamSet&, const num::Buffers<double>&, bool);
template AttnGraph<float> attn_forward<float>(Tape<float>&, const AttnModel&, std::span<const Var>, const AttnBatch&);
template AttnGraph<double> attn_forward<double>(Tape<double>&, const AttnModel&, std::span<const Var>, const AttnBatch&);
template num::Buffers<float> param_buffers<float>(const num::ParamSet&);
template num::Buffers<double> param_buffers<double>(const num::ParamSet&);

}  // namespace refage::est
