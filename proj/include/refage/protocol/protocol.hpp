#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "refage/core/estimator.hpp"
#include "refage/core/types.hpp"

namespace refage::proto {

struct TaskListProvenance {
  std::string dataset_digest;
  std::uint64_t seed = 0;
  int trials_per_target = 1;
  int max_refs = 0;
  bool cross_source = true;
  SwapMode swap_mode = SwapMode::kNone;

  bool operator==(const TaskListProvenance&) const = default;
};

struct TaskList {
  TaskListProvenance provenance;
  std::vector<Task> tasks;
};

/// For every identity with >= 2 images, every trial and every image of it as
/// target: a random ordering of up to max_refs other images of the identity.
/// With cross_source, references from the target's source are appended only
/// after all cross-source ones, and cross_source_ok records whether any were
/// needed. Throws std::invalid_argument when trials_per_target < 1.
TaskList build_task_list(const Dataset& ds, int trials_per_target, int max_refs, bool cross_source,
                         std::uint64_t seed, const std::string& dataset_digest = "");

/// One JSON object per line; provenance goes to `<path>.meta.json`.
void write_task_list(const TaskList& list, const Dataset& ds, const std::filesystem::path& path);
TaskList read_task_list(const std::filesystem::path& path, const Dataset& ds);
std::string task_to_json_line(const Task& task, const Dataset& ds);

/// Identity-balanced MAE: mean over identities of the within-identity mean
/// absolute error. Entries are (identity, absolute error). Throws on empty input.
double mae_id(std::span<const std::pair<std::int64_t, double>> errors);

struct IdentityError {
  std::int64_t identity = 0;
  double mae = 0.0;
  std::size_t count = 0;
};

struct EvalResult {
  int n = 0;
  double mae_id = 0.0;
  std::size_t task_count = 0;
  std::vector<IdentityError> per_identity;  ///< ascending identity id
  std::vector<double> predictions;          ///< per task, in task-list order
};

struct EvalReport {
  std::string estimator;
  SwapMode swap_mode = SwapMode::kNone;
  std::uint64_t seed = 0;
  std::string regime;  ///< free-form provenance, e.g. held-out identities vs shifted domains
  std::vector<EvalResult> results;
};

/// Predicts every task at each N on the first min(N, |d_max|) references.
/// Tasks are spread over `jobs` threads; results do not depend on jobs.
EvalReport evaluate(const Estimator& estimator, const Dataset& ds, const TaskList& tasks, std::span<const int> n_values,
                    int jobs = 1);

nlohmann::json to_json(const EvalReport& report);
void write_report_json(const EvalReport& report, const std::filesystem::path& path);
/// Rows = N, columns = estimators, cells = MAE_id.
std::string mae_matrix_csv(std::span<const EvalReport> reports);

struct SwapConfig {
  int max_refs = 10;            ///< only this prefix of each d_max is swapped and kept
  bool same_domain = true;      ///< prefer candidates from the target's domain
  std::uint64_t seed = 0;
};

struct SwapStats {
  std::size_t slots = 0;
  std::size_t fallback_slots = 0;  ///< no exact-age candidate
  std::size_t dropped_tasks = 0;   ///< single mode: no alternative identity
};

/// Each reference is replaced by an image of exactly the same age from another
/// identity, choosing the least-used candidate (seeded tie-break).
TaskList build_swap_mix(const TaskList& tasks, const Dataset& ds, const SwapConfig& cfg, SwapStats* stats = nullptr);

/// All references of a task come from one alternative identity that best covers
/// the required ages (total absolute age gap, then usage).
TaskList build_swap_single(const TaskList& tasks, const Dataset& ds, const SwapConfig& cfg,
                           SwapStats* stats = nullptr);

struct GapBucket {
  double lo = 0.0;  ///< inclusive
  double hi = 0.0;  ///< exclusive
  std::size_t count = 0;
  double density = 0.0;
  double mae_reference = 0.0;  ///< baseline (global) MAE_id in the bucket
  double mae_candidate = 0.0;
  double delta = 0.0;          ///< baseline minus candidate; meaningless when count == 0
};

/// Buckets single-reference tasks by target age minus reference age and
/// compares two estimators per bucket. Buckets span [floor(min/w)w, ...).
std::vector<GapBucket> temporal_distance_report(const Estimator& candidate, const Estimator& baseline,
                                                const Dataset& ds, const TaskList& tasks, double bucket_width,
                                                int jobs = 1);

nlohmann::json to_json(std::span<const GapBucket> buckets);
std::string gap_buckets_csv(std::span<const GapBucket> buckets);

}  // namespace refage::proto
