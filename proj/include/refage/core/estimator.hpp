#pragma once

#include <string>

#include "refage/core/types.hpp"

namespace refage {

/// Shared predictor interface: target plus context in, predictive Gaussian out.
/// Implementations are immutable once constructed and safe for concurrent use.
class Estimator {
 public:
  virtual ~Estimator() = default;
  virtual std::string name() const = 0;
  virtual Prediction predict(const Query& query) const = 0;
};

}  // namespace refage
