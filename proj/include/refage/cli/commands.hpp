#pragma once

#include <filesystem>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "refage/cli/run_config.hpp"
#include "refage/core/estimator.hpp"
#include "refage/protocol/protocol.hpp"

namespace refage::cli {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kOk = 0,
  kUnexpected = 1,
  kConfigError = 2,
  kNumericFailure = 3,
  kMissingInput = 4,
  kDataError = 5,
};

/// File layout under the run's output directory.
struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path data(const std::string& split) const { return root / "data" / split; }
  std::filesystem::path global_head() const { return root / "models" / "global.json"; }
  std::filesystem::path blr_model() const { return root / "models" / "blr.json"; }
  std::filesystem::path attn(const std::string& kind) const { return root / "models" / ("attn_" + kind); }
  std::filesystem::path train_log(const std::string& kind) const { return root / "logs" / ("train_attn_" + kind + ".jsonl"); }
  std::filesystem::path tasks(const std::string& split, const std::string& swap) const {
    return root / "tasks" / (split + (swap == "same" ? "" : "_" + swap) + ".jsonl");
  }
  std::filesystem::path reports() const { return root / "reports"; }
};

/// Splits available for evaluation: "test", plus "shifted" when configured.
std::vector<std::string> eval_splits(const RunConfig& cfg);

/// Writes train/test (and shifted) datasets; prints one "<split> <digest>" line each.
void cmd_gen(const RunConfig& cfg, std::ostream& out);
void cmd_train_global(const RunConfig& cfg, std::ostream& out);
void cmd_fit_blr(const RunConfig& cfg, std::ostream& out);
void cmd_train_attn(const RunConfig& cfg, const std::string& which, std::ostream& out);
void cmd_eval(const RunConfig& cfg, const std::vector<std::string>& estimators, const std::vector<int>& n_values,
              const std::vector<std::string>& swap_modes, const std::vector<std::string>& splits, std::ostream& out);
void cmd_tempdist(const RunConfig& cfg, const std::string& split, std::ostream& out);
/// Consolidates every eval report of a run into summary.csv / summary.json.
void cmd_report(const std::filesystem::path& run_dir, std::ostream& out);
/// gen, train-global, fit-blr, train-attn (both), eval, tempdist, report.
void cmd_pipeline(const RunConfig& cfg, std::ostream& out);

std::unique_ptr<Estimator> load_estimator(const RunPaths& paths, const std::string& name);

/// Keeps every `stride`-th task.
proto::TaskList stride_tasks(const proto::TaskList& list, int stride);

}  // namespace refage::cli
