#include "refage/numcore/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace refage::num {

std::size_t ParamSet::add(std::string name, Shape shape, std::vector<float> data) {
  if (num::numel(shape) != data.size()) throw ShapeError("parameter " + name + " does not match " + shape_str(shape));
  for (const auto& n : names) {
    if (n == name) throw std::invalid_argument("duplicate parameter name " + name);
  }
  names.push_back(std::move(name));
  shapes.push_back(std::move(shape));
  values.push_back(std::move(data));
  return values.size() - 1;
}

std::size_t ParamSet::index(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  throw std::out_of_range("no parameter named " + name);
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& v : values) n += v.size();
  return n;
}

namespace {

template <class T>
void require_same_layout(const Buffers<T>& a, const Buffers<T>& b, const char* what) {
  if (a.size() != b.size()) throw ShapeError(std::string(what) + ": tensor count mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) throw ShapeError(std::string(what) + ": size mismatch at tensor " + std::to_string(i));
  }
}

}  // namespace

template <class T>
AdamState<T> AdamState<T>::zeros_like(const Buffers<T>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.size(), T(0));
    s.v.emplace_back(p.size(), T(0));
  }
  return s;
}

template <class T>
void adamw_step(Buffers<T>& params, const Buffers<T>& grads, AdamState<T>& state, const AdamWConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("adamw_step: lr must be positive");
  require_same_layout(params, grads, "adamw_step");
  if (state.m.empty() && !params.empty()) state = AdamState<T>::zeros_like(params);
  require_same_layout(params, state.m, "adamw_step state");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      m[k] = static_cast<T>(cfg.beta1 * static_cast<double>(m[k]) + (1.0 - cfg.beta1) * gk);
      v[k] = static_cast<T>(cfg.beta2 * static_cast<double>(v[k]) + (1.0 - cfg.beta2) * gk * gk);
      const double mhat = static_cast<double>(m[k]) / bc1;
      const double vhat = static_cast<double>(v[k]) / bc2;
      const double pk = static_cast<double>(p[k]) * decay;
      p[k] = static_cast<T>(pk - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template <class T>
void ema_update(Buffers<T>& ema, const Buffers<T>& params, double decay) {
  require_same_layout(ema, params, "ema_update");
  for (std::size_t i = 0; i < ema.size(); ++i) {
    for (std::size_t k = 0; k < ema[i].size(); ++k) {
      ema[i][k] = static_cast<T>(decay * static_cast<double>(ema[i][k]) +
                                 (1.0 - decay) * static_cast<double>(params[i][k]));
    }
  }
}

template <class T>
double global_norm(const Buffers<T>& grads) {
  double s = 0.0;
  for (const auto& g : grads) {
    for (T v : g) s += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(s);
}

template <class T>
double clip_grad_norm(Buffers<T>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads) {
      for (T& v : g) v = static_cast<T>(static_cast<double>(v) * scale);
    }
  }
  return norm;
}

#define REFAGE_INSTANTIATE(T)                                                                  \
  template struct AdamState<T>;                                                                \
  template void adamw_step<T>(Buffers<T>&, const Buffers<T>&, AdamState<T>&, const AdamWConfig&); \
  template void ema_update<T>(Buffers<T>&, const Buffers<T>&, double);                         \
  template double global_norm<T>(const Buffers<T>&);                                           \
  template double clip_grad_norm<T>(Buffers<T>&, double);

REFAGE_INSTANTIATE(float)
REFAGE_INSTANTIATE(double)

#undef REFAGE_INSTANTIATE

}  // namespace refage::num
