#pragma once

#include <filesystem>

#include "json.hpp"
#include "refage/numcore/optim.hpp"

namespace refage::num {

struct Checkpoint {
  nlohmann::json config;  ///< architecture config
  std::int64_t step = 0;
  bool ema = false;
  ParamSet params;
};

/// Directory layout: header.json plus one `<name>.f32` blob per tensor in the
/// feature-file float format.
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint read_checkpoint(const std::filesystem::path& dir);

}  // namespace refage::num
