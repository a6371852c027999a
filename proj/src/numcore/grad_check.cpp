#include "refage/numcore/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "refage/core/rng.hpp"

namespace refage::num {

double grad_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

GradCheckReport grad_check(const LossFn& loss, const Buffers<double>& params, const GradCheckOptions& opts) {
  GradCheckReport report;
  Buffers<double> analytic;
  for (const auto& p : params) analytic.emplace_back(p.size(), 0.0);
  loss(params, &analytic);

  Rng rng(mix64(opts.seed));
  Buffers<double> probe = params;
  for (std::size_t t = 0; t < params.size(); ++t) {
    std::vector<std::size_t> coords(params[t].size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.coords_per_tensor > 0 && coords.size() > opts.coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t c : coords) {
      const double saved = probe[t][c];
      probe[t][c] = saved + opts.step;
      const double up = loss(probe, nullptr);
      probe[t][c] = saved - opts.step;
      const double down = loss(probe, nullptr);
      probe[t][c] = saved;
      GradCheckEntry e;
      e.tensor = t;
      e.coord = c;
      e.analytic = analytic[t][c];
      e.numeric = (up - down) / (2.0 * opts.step);
      e.rel_error = grad_rel_error(e.analytic, e.numeric);
      report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
      report.entries.push_back(e);
    }
  }
  return report;
}

}  // namespace refage::num
