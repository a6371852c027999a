// refage: command-line entry point for the reference-based age estimation pipeline.
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "refage/cli/commands.hpp"
#include "refage/cli/run_config.hpp"
#include "refage/core/dataset_io.hpp"
#include "refage/core/errors.hpp"
#include "refage/numcore/tape.hpp"

namespace {

using json = nlohmann::json;
using namespace refage;
using namespace refage::cli;

constexpr const char* kVersion = "0.1.0";

struct Overrides {
  std::string config;
  std::vector<std::string> sets;  // "/json/pointer=value"
  long long seed = -1;
  int jobs = 0;
  std::string output_dir;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("-c,--config", o.config, "run config (JSON)")->required();
  app->add_option("--seed", o.seed, "overrides the config seed everywhere");
  app->add_option("--jobs", o.jobs, "worker threads for generation and evaluation");
  app->add_option("-o,--output-dir", o.output_dir, "overrides output_dir");
  app->add_option("--set", o.sets, "override a config key: /pointer/to/key=<json value>");
}

RunConfig resolve(const Overrides& o) {
  if (!std::filesystem::exists(o.config)) {
    throw DatasetError(DatasetError::Kind::kMissingFile, "config file not found: " + o.config);
  }
  json j;
  try {
    j = json::parse(read_text_file(o.config));
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("malformed JSON: ") + e.what());
  }
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || s.empty() || s[0] != '/') {
      throw ConfigError("", "--set expects /pointer=value, got '" + s + "'");
    }
    const std::string ptr = s.substr(0, eq), raw = s.substr(eq + 1);
    json v;
    try {
      v = json::parse(raw);
    } catch (const json::parse_error&) {
      v = raw;  // bare strings
    }
    try {
      j[json::json_pointer(ptr)] = v;
    } catch (const json::exception& e) {
      throw ConfigError(ptr, e.what());
    }
  }
  if (o.seed >= 0) j["seed"] = static_cast<std::uint64_t>(o.seed);
  if (o.jobs > 0) j["jobs"] = o.jobs;
  if (!o.output_dir.empty()) j["output_dir"] = o.output_dir;
  RunConfig cfg = run_config_from_json(j);
  if (cfg.checked_numerics) num::set_checked_numerics(true);
  return cfg;
}

std::vector<int> parse_n_list(const std::string& s) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const auto next = s.find(',', pos);
    const std::string tok = s.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
    try {
      std::size_t used = 0;
      const int v = std::stoi(tok, &used);
      if (used != tok.size() || v < 0) throw std::invalid_argument(tok);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("/protocol/n_values", "bad N list '" + s + "'");
    }
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const auto next = s.find(',', pos);
    out.push_back(s.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"refage: personalized age estimation from reference images"};
  app.require_subcommand(1);
  app.set_version_flag("--version", json{{"name", "refage"}, {"version", kVersion}, {"checkpoint_format", 1},
                                         {"dataset_format", 1}}.dump());

  Overrides o;
  auto* gen = app.add_subcommand("gen", "generate train/test (and shifted) datasets");
  auto* tg = app.add_subcommand("train-global", "fit the global mean/variance heads");
  auto* fb = app.add_subcommand("fit-blr", "fit BLR hyperparameters by marginal likelihood");
  auto* ta = app.add_subcommand("train-attn", "episodic training of an attention model");
  auto* ev = app.add_subcommand("eval", "evaluate estimators on fixed task lists");
  auto* td = app.add_subcommand("tempdist", "improvement over Global by reference age gap");
  auto* pl = app.add_subcommand("pipeline", "gen, train, fit, eval, tempdist and report");
  for (auto* sub : {gen, tg, fb, ta, ev, td, pl}) add_common(sub, o);

  std::string which;
  ta->add_option("--which", which, "joint|spatial (g|s)")->required();

  std::string estimators, n_list, swaps, splits;
  ev->add_option("--estimators", estimators, "comma list; default from config");
  ev->add_option("--n", n_list, "comma list of N; default from config");
  ev->add_option("--swap", swaps, "comma list of same|mix|single; default from config");
  ev->add_option("--split", splits, "comma list of test|shifted; default all available");

  std::string td_split = "test";
  td->add_option("--split", td_split, "test|shifted");

  std::string run_dir;
  auto* rp = app.add_subcommand("report", "consolidate eval reports into summary.csv/json");
  rp->add_option("run_dir", run_dir, "run output directory")->required();

  auto* schema = app.add_subcommand("config-schema", "print the run config schema");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  if (const char* env = std::getenv("CHECKED_NUMERICS"); env && std::string(env) == "1") num::set_checked_numerics(true);

  auto& out = std::cout;
  if (*schema) {
    out << run_config_schema().dump(2) << '\n';
  } else if (*rp) {
    cmd_report(run_dir, out);
  } else if (*gen) {
    cmd_gen(resolve(o), out);
  } else if (*tg) {
    cmd_train_global(resolve(o), out);
  } else if (*fb) {
    cmd_fit_blr(resolve(o), out);
  } else if (*ta) {
    std::string kind = which == "g" ? "joint" : which == "s" ? "spatial" : which;
    if (kind != "joint" && kind != "spatial") throw ConfigError("/which", "expected joint|spatial|g|s, got '" + which + "'");
    cmd_train_attn(resolve(o), kind, out);
  } else if (*ev) {
    const RunConfig cfg = resolve(o);
    cmd_eval(cfg, estimators.empty() ? cfg.protocol.estimators : split_list(estimators),
             n_list.empty() ? cfg.protocol.n_values : parse_n_list(n_list),
             swaps.empty() ? cfg.protocol.swap_modes : split_list(swaps),
             splits.empty() ? eval_splits(cfg) : split_list(splits), out);
  } else if (*td) {
    cmd_tempdist(resolve(o), td_split, out);
  } else if (*pl) {
    cmd_pipeline(resolve(o), out);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumericFailure;
  } catch (const DatasetError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.kind() == DatasetError::Kind::kMissingFile ? kMissingInput : kDataError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUnexpected;
  }
}
