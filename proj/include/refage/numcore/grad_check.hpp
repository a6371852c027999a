#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "refage/numcore/optim.hpp"

namespace refage::num {

/// Evaluates the loss at `params`; when `grads` is non-null it must also fill
/// the analytic gradient (same layout as params).
using LossFn = std::function<double(const Buffers<double>& params, Buffers<double>* grads)>;

struct GradCheckEntry {
  std::size_t tensor = 0;
  std::size_t coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;

  bool empty() const { return entries.empty(); }
  bool passed(double tolerance) const { return max_rel_error <= tolerance; }
};

struct GradCheckOptions {
  double step = 1e-4;
  std::size_t coords_per_tensor = 16;  ///< 0 checks every coordinate
  std::uint64_t seed = 0;
};

/// |a - n| / max(|a|, |n|, 1e-6).
double grad_rel_error(double analytic, double numeric);

/// Central finite differences over randomly sampled coordinates of each tensor.
GradCheckReport grad_check(const LossFn& loss, const Buffers<double>& params, const GradCheckOptions& opts = {});

}  // namespace refage::num
