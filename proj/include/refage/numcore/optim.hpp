#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refage/numcore/tape.hpp"

namespace refage::num {

/// Ordered, named collection of float tensors owned by a model.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::vector<float>> values;

  std::size_t add(std::string name, Shape shape, std::vector<float> data);
  std::size_t index(const std::string& name) const;  // throws std::out_of_range
  std::size_t size() const { return values.size(); }
  std::size_t numel() const;
  bool operator==(const ParamSet&) const = default;
};

template <class T>
using Buffers = std::vector<std::vector<T>>;

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <class T>
struct AdamState {
  Buffers<T> m;
  Buffers<T> v;
  std::int64_t step = 0;

  static AdamState zeros_like(const Buffers<T>& params);
};

/// One AdamW update in place. Weight decay is decoupled: p <- p (1 - lr wd)
/// before the bias-corrected Adam step. Throws std::invalid_argument for lr <= 0.
template <class T>
void adamw_step(Buffers<T>& params, const Buffers<T>& grads, AdamState<T>& state, const AdamWConfig& cfg);

/// ema <- decay ema + (1 - decay) params.
template <class T>
void ema_update(Buffers<T>& ema, const Buffers<T>& params, double decay = 0.999);

template <class T>
double global_norm(const Buffers<T>& grads);

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(Buffers<T>& grads, double max_norm = 1.0);

}  // namespace refage::num
