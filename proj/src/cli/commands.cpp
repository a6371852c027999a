#include "refage/cli/commands.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include "refage/core/dataset_io.hpp"
#include "refage/core/errors.hpp"
#include "refage/estimators/attention.hpp"
#include "refage/estimators/blr.hpp"
#include "refage/estimators/global.hpp"
#include "refage/numcore/checkpoint.hpp"
#include "refage/synthworld/world.hpp"
#include "refage/trainer/trainer.hpp"

namespace refage::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) {
    throw DatasetError(DatasetError::Kind::kMissingFile, "missing " + what + " at " + p.string() + "; run the earlier stage first");
  }
}

Dataset load_split(const RunPaths& paths, const std::string& split) {
  require_exists(paths.data(split) / "header.json", split + " dataset");
  return read_dataset(paths.data(split));
}

est::GlobalHead load_global(const RunPaths& paths) {
  require_exists(paths.global_head(), "global head");
  return est::global_head_from_json(json::parse(read_text_file(paths.global_head())).at("head"));
}

est::BlrModel load_blr(const RunPaths& paths) {
  require_exists(paths.blr_model(), "BLR model");
  return est::blr_model_from_json(json::parse(read_text_file(paths.blr_model())).at("model"));
}

est::AttnModel load_attn(const RunPaths& paths, const std::string& kind) {
  require_exists(paths.attn(kind) / "header.json", "attention checkpoint '" + kind + "'");
  return est::attn_model_from_checkpoint(num::read_checkpoint(paths.attn(kind)));
}

std::string regime_of(const std::string& split) {
  return split == "shifted" ? "shifted domains (unseen domain ids)" : "held-out identities of the training world";
}

}  // namespace

std::vector<std::string> eval_splits(const RunConfig& cfg) {
  std::vector<std::string> s{"test"};
  if (cfg.shifted_world) s.push_back("shifted");
  return s;
}

void cmd_gen(const RunConfig& cfg, std::ostream& out) {
  const RunPaths paths{cfg.output_dir};
  for (const std::string split : {"train", "test"}) {
    write_dataset(synth::generate_dataset(cfg.world, cfg.identities, split, cfg.jobs), paths.data(split));
    out << split << ' ' << dataset_digest(paths.data(split)) << '\n';
  }
  if (cfg.shifted_world) {
    write_dataset(synth::generate_dataset(shifted_world_config(cfg), cfg.identities, "test", cfg.jobs),
                  paths.data("shifted"));
    out << "shifted " << dataset_digest(paths.data("shifted")) << '\n';
  }
}

void cmd_train_global(const RunConfig& cfg, std::ostream& out) {
  const RunPaths paths{cfg.output_dir};
  const Dataset train = load_split(paths, "train");
  est::GlobalFitLog log;
  const auto head = est::global_fit(train, cfg.global, &log);
  fs::create_directories(paths.global_head().parent_path());
  const json j{{"config", est::to_json(cfg.global)},
               {"best_epoch", log.best_epoch},
               {"val_nll", log.val_nll.empty() ? 0.0 : log.val_nll[static_cast<std::size_t>(std::max(log.best_epoch, 0))]},
               {"head", est::to_json(head)}};
  write_text_file(paths.global_head(), j.dump(2) + "\n");
  out << "global head: best epoch " << log.best_epoch << " of " << log.val_nll.size() << '\n';
}

void cmd_fit_blr(const RunConfig& cfg, std::ostream& out) {
  const RunPaths paths{cfg.output_dir};
  const Dataset train = load_split(paths, "train");
  const auto head = load_global(paths);
  est::BlrFitLog log;
  const auto model = est::blr_fit(head, train, cfg.blr, &log);
  fs::create_directories(paths.blr_model().parent_path());
  const json j{{"config", est::to_json(cfg.blr)},
               {"objective_first", log.objective.empty() ? 0.0 : log.objective.front()},
               {"objective_last", log.objective.empty() ? 0.0 : log.objective.back()},
               {"model", est::to_json(model)}};
  write_text_file(paths.blr_model(), j.dump(2) + "\n");
  out << "blr: log-marginal " << j["objective_first"].get<double>() << " -> " << j["objective_last"].get<double>()
      << '\n';
}

void cmd_train_attn(const RunConfig& cfg, const std::string& which, std::ostream& out) {
  const RunPaths paths{cfg.output_dir};
  const auto kind = est::attn_kind_from_string(which);
  const Dataset train = load_split(paths, "train");
  const auto& acfg = kind == est::AttnKind::kJoint ? cfg.attn_joint : cfg.attn_spatial;
  fs::create_directories(paths.train_log(which).parent_path());
  std::ofstream log(paths.train_log(which), std::ios::binary | std::ios::trunc);
  const auto result = train::train_attention_model(est::AttnModel::init(acfg), train, cfg.train, &log);
  num::write_checkpoint(est::to_checkpoint(result.model, cfg.train.max_batches, true), paths.attn(which));
  out << "attn " << which << ": holdout MAE_id " << result.final_holdout_ema << " (EMA), " << result.final_holdout_raw
      << " (raw)\n";
}

std::unique_ptr<Estimator> load_estimator(const RunPaths& paths, const std::string& name) {
  if (name == "global") return std::make_unique<est::GlobalEstimator>(load_global(paths));
  if (name == "offset") return std::make_unique<est::OffsetEstimator>(load_global(paths));
  if (name == "blr") return std::make_unique<est::BlrEstimator>(load_blr(paths), load_global(paths));
  if (name == "attn_joint") return std::make_unique<est::AttnEstimator>(load_attn(paths, "joint"), load_global(paths));
  if (name == "attn_spatial") {
    return std::make_unique<est::AttnEstimator>(load_attn(paths, "spatial"), load_global(paths));
  }
  if (name == "pair_avg") {
    return std::make_unique<est::AttnEstimator>(load_attn(paths, "spatial"), load_global(paths), true);
  }
  throw ConfigError("/protocol/estimators", "unknown estimator '" + name + "'");
}

proto::TaskList stride_tasks(const proto::TaskList& list, int stride) {
  if (stride <= 1) return list;
  proto::TaskList out;
  out.provenance = list.provenance;
  for (std::size_t i = 0; i < list.tasks.size(); i += static_cast<std::size_t>(stride)) out.tasks.push_back(list.tasks[i]);
  return out;
}

namespace {

proto::TaskList base_tasks(const RunConfig& cfg, const RunPaths& paths, const std::string& split, const Dataset& ds) {
  const auto& p = cfg.protocol;
  auto list = proto::build_task_list(ds, p.trials_per_target, p.max_refs, p.cross_source, cfg.seed,
                                     dataset_digest(paths.data(split)));
  return stride_tasks(list, p.task_stride);
}

}  // namespace

void cmd_eval(const RunConfig& cfg, const std::vector<std::string>& estimators, const std::vector<int>& n_values,
              const std::vector<std::string>& swap_modes, const std::vector<std::string>& splits, std::ostream& out) {
  const RunPaths paths{cfg.output_dir};
  fs::create_directories(paths.reports());
  fs::create_directories(paths.tasks("test", "same").parent_path());
  std::vector<std::unique_ptr<Estimator>> models;
  for (const auto& name : estimators) models.push_back(load_estimator(paths, name));
  for (const auto& split : splits) {
    const Dataset ds = load_split(paths, split);
    const auto base = base_tasks(cfg, paths, split, ds);
    for (const auto& swap : swap_modes) {
      const SwapMode mode = swap_mode_from_string(swap);
      proto::SwapConfig sc{cfg.protocol.swap_max_refs, true, cfg.seed};
      proto::TaskList list = mode == SwapMode::kMix      ? proto::build_swap_mix(base, ds, sc)
                             : mode == SwapMode::kSingle ? proto::build_swap_single(base, ds, sc)
                                                         : base;
      proto::write_task_list(list, ds, paths.tasks(split, swap));
      std::vector<proto::EvalReport> reports;
      json arr = json::array();
      for (const auto& m : models) {
        auto r = proto::evaluate(*m, ds, list, n_values, cfg.jobs);
        r.regime = regime_of(split);
        arr.push_back(proto::to_json(r));
        reports.push_back(std::move(r));
      }
      const std::string stem = split + "_" + swap;
      write_text_file(paths.reports() / ("eval_" + stem + ".json"), arr.dump(2) + "\n");
      const std::string csv = proto::mae_matrix_csv(reports);
      write_text_file(paths.reports() / ("mae_" + stem + ".csv"), csv);
      out << "# " << stem << " (" << list.tasks.size() << " tasks)\n" << csv;
    }
  }
}

void cmd_tempdist(const RunConfig& cfg, const std::string& split, std::ostream& out) {
  const RunPaths paths{cfg.output_dir};
  const Dataset ds = load_split(paths, split);
  const auto tasks = base_tasks(cfg, paths, split, ds);
  const auto cand = load_estimator(paths, "pair_avg");
  const auto base = load_estimator(paths, "global");
  const auto buckets = proto::temporal_distance_report(*cand, *base, ds, tasks, cfg.protocol.bucket_width, cfg.jobs);
  fs::create_directories(paths.reports());
  write_text_file(paths.reports() / ("tempdist_" + split + ".json"), proto::to_json(buckets).dump(2) + "\n");
  const std::string csv = proto::gap_buckets_csv(buckets);
  write_text_file(paths.reports() / ("tempdist_" + split + ".csv"), csv);
  out << csv;
}

void cmd_report(const fs::path& run_dir, std::ostream& out) {
  const RunPaths paths{run_dir};
  require_exists(paths.reports(), "reports directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(paths.reports())) {
    const auto name = e.path().filename().string();
    if (name.rfind("eval_", 0) == 0 && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DatasetError(DatasetError::Kind::kMissingFile, "no eval reports under " + paths.reports().string());
  const std::vector<int> columns{0, 1, 3, 5, 10};
  std::string csv = "split,swap,method";
  for (int n : columns) csv += ",N=" + std::to_string(n);
  csv += "\n";
  json rows = json::array();
  for (const auto& f : files) {
    std::string stem = f.stem().string().substr(5);
    const auto cut = stem.rfind('_');
    const std::string split = stem.substr(0, cut), swap = stem.substr(cut + 1);
    for (const auto& r : json::parse(read_text_file(f))) {
      json row{{"split", split}, {"swap", swap}, {"method", r.at("estimator")}, {"mae_id", json::object()}};
      csv += split + "," + swap + "," + r.at("estimator").get<std::string>();
      for (int n : columns) {
        csv += ",";
        for (const auto& res : r.at("results")) {
          if (res.at("n").get<int>() == n) {
            const double v = res.at("mae_id").get<double>();
            row["mae_id"][std::to_string(n)] = v;
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.4f", v);
            csv += buf;
          }
        }
      }
      csv += "\n";
      rows.push_back(row);
    }
  }
  write_text_file(run_dir / "summary.csv", csv);
  write_text_file(run_dir / "summary.json", json{{"columns", columns}, {"rows", rows}}.dump(2) + "\n");
  out << csv;
}

void cmd_pipeline(const RunConfig& cfg, std::ostream& out) {
  cmd_gen(cfg, out);
  cmd_train_global(cfg, out);
  cmd_fit_blr(cfg, out);
  const auto& ests = cfg.protocol.estimators;
  auto wants = [&](const std::string& e) { return std::find(ests.begin(), ests.end(), e) != ests.end(); };
  if (wants("attn_joint")) cmd_train_attn(cfg, "joint", out);
  if (wants("attn_spatial") || wants("pair_avg")) cmd_train_attn(cfg, "spatial", out);
  cmd_eval(cfg, ests, cfg.protocol.n_values, cfg.protocol.swap_modes, eval_splits(cfg), out);
  if (wants("pair_avg")) cmd_tempdist(cfg, "test", out);
  cmd_report(cfg.output_dir, out);
}

}  // namespace refage::cli
