#include "refage/protocol/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

#include "refage/core/dataset_io.hpp"
#include "refage/core/errors.hpp"
#include "refage/core/parallel.hpp"
#include "refage/core/rng.hpp"

namespace refage::proto {

namespace fs = std::filesystem;
using json = nlohmann::json;

TaskList build_task_list(const Dataset& ds, int trials_per_target, int max_refs, bool cross_source,
                         std::uint64_t seed, const std::string& dataset_digest) {
  if (trials_per_target < 1) throw std::invalid_argument("trials_per_target must be >= 1");
  if (max_refs < 1) throw std::invalid_argument("max_refs must be >= 1");
  TaskList list;
  list.provenance = {dataset_digest, seed, trials_per_target, max_refs, cross_source, SwapMode::kNone};
  const auto index = IdentityIndex::build(ds);
  for (int trial = 0; trial < trials_per_target; ++trial) {
    for (std::int64_t id : index.identities) {
      const auto& rows = index.rows(id);
      if (rows.size() < 2) continue;
      for (std::size_t target : rows) {
        const auto& tr = ds.records[target];
        Rng rng = make_stream(seed, Stream::kTasks,
                              {static_cast<std::uint64_t>(tr.image_id), static_cast<std::uint64_t>(trial)});
        std::vector<std::size_t> others;
        for (std::size_t r : rows) {
          if (r != target) others.push_back(r);
        }
        std::shuffle(others.begin(), others.end(), rng);
        if (cross_source) {
          std::stable_partition(others.begin(), others.end(),
                                [&](std::size_t r) { return ds.records[r].source_id != tr.source_id; });
        }
        if (others.size() > static_cast<std::size_t>(max_refs)) others.resize(static_cast<std::size_t>(max_refs));
        Task t;
        t.target_row = target;
        t.target_image = tr.image_id;
        t.identity_id = id;
        t.target_age = tr.age_years;
        t.trial_index = trial;
        t.cross_source_ok = true;
        for (std::size_t r : others) {
          t.d_max.entries.push_back({r, static_cast<double>(ds.records[r].age_years)});
          if (ds.records[r].source_id == tr.source_id) t.cross_source_ok = false;
        }
        t.ref_fallback.assign(others.size(), false);
        list.tasks.push_back(std::move(t));
      }
    }
  }
  return list;
}

std::string task_to_json_line(const Task& task, const Dataset& ds) {
  json refs = json::array();
  for (const auto& e : task.d_max.entries) {
    refs.push_back({{"image", ds.records[e.row].image_id}, {"age", e.age}});
  }
  json j{{"target", task.target_image},
         {"target_age", task.target_age},
         {"identity", task.identity_id},
         {"trial", task.trial_index},
         {"cross_source_ok", task.cross_source_ok},
         {"refs", refs}};
  if (task.d_max.swap_mode != SwapMode::kNone) {
    j["swap"] = to_string(task.d_max.swap_mode);
    j["fallback"] = task.ref_fallback;
  }
  return j.dump();
}

namespace {

json provenance_json(const TaskListProvenance& p, std::size_t count) {
  return {{"dataset_digest", p.dataset_digest}, {"seed", p.seed},
          {"trials_per_target", p.trials_per_target}, {"max_refs", p.max_refs},
          {"cross_source", p.cross_source}, {"swap_mode", to_string(p.swap_mode)},
          {"task_count", count}};
}

}  // namespace

void write_task_list(const TaskList& list, const Dataset& ds, const fs::path& path) {
  std::string text;
  for (const auto& t : list.tasks) text += task_to_json_line(t, ds) + "\n";
  write_text_file(path, text);
  write_text_file(fs::path(path.string() + ".meta.json"), provenance_json(list.provenance, list.tasks.size()).dump(2) + "\n");
}

TaskList read_task_list(const fs::path& path, const Dataset& ds) {
  if (!fs::exists(path)) throw DatasetError(DatasetError::Kind::kMissingFile, "missing task list " + path.string());
  const auto rows = image_row_index(ds);
  TaskList list;
  const fs::path meta = fs::path(path.string() + ".meta.json");
  try {
    if (fs::exists(meta)) {
      const json m = json::parse(read_text_file(meta));
      auto& p = list.provenance;
      p.dataset_digest = m.at("dataset_digest").get<std::string>();
      p.seed = m.at("seed").get<std::uint64_t>();
      p.trials_per_target = m.at("trials_per_target").get<int>();
      p.max_refs = m.at("max_refs").get<int>();
      p.cross_source = m.at("cross_source").get<bool>();
      p.swap_mode = swap_mode_from_string(m.at("swap_mode").get<std::string>());
    }
    std::istringstream in(read_text_file(path));
    std::string line;
    std::size_t lineno = 0;
    auto row_of = [&](std::int64_t image) {
      auto it = rows.find(image);
      if (it == rows.end()) {
        throw DatasetError(DatasetError::Kind::kInvariantViolation,
                           "task list line " + std::to_string(lineno) + " names unknown image " + std::to_string(image));
      }
      return it->second;
    };
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const json j = json::parse(line);
      Task t;
      t.target_image = j.at("target").get<std::int64_t>();
      t.target_row = row_of(t.target_image);
      t.target_age = j.at("target_age").get<int>();
      t.identity_id = j.at("identity").get<std::int64_t>();
      t.trial_index = j.at("trial").get<int>();
      t.cross_source_ok = j.at("cross_source_ok").get<bool>();
      for (const auto& r : j.at("refs")) {
        t.d_max.entries.push_back({row_of(r.at("image").get<std::int64_t>()), r.at("age").get<double>()});
      }
      if (j.contains("swap")) {
        t.d_max.swap_mode = swap_mode_from_string(j.at("swap").get<std::string>());
        t.ref_fallback = j.at("fallback").get<std::vector<bool>>();
      } else {
        t.ref_fallback.assign(t.d_max.entries.size(), false);
      }
      list.tasks.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw DatasetError(DatasetError::Kind::kParse, "task list " + path.string() + ": " + e.what());
  }
  return list;
}

double mae_id(std::span<const std::pair<std::int64_t, double>> errors) {
  if (errors.empty()) throw std::invalid_argument("mae_id of an empty error set");
  std::map<std::int64_t, std::pair<double, std::size_t>> per;
  for (const auto& [id, e] : errors) {
    auto& acc = per[id];
    acc.first += std::abs(e);
    acc.second += 1;
  }
  double total = 0.0;
  for (const auto& [id, acc] : per) total += acc.first / static_cast<double>(acc.second);
  return total / static_cast<double>(per.size());
}

namespace {

EvalResult summarize(int n, const TaskList& tasks, std::vector<double> predictions) {
  EvalResult r;
  r.n = n;
  r.task_count = tasks.tasks.size();
  std::map<std::int64_t, std::pair<double, std::size_t>> per;
  std::vector<std::pair<std::int64_t, double>> errors;
  errors.reserve(predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& t = tasks.tasks[i];
    const double e = std::abs(predictions[i] - t.target_age);
    errors.emplace_back(t.identity_id, e);
    auto& acc = per[t.identity_id];
    acc.first += e;
    acc.second += 1;
  }
  for (const auto& [id, acc] : per) r.per_identity.push_back({id, acc.first / static_cast<double>(acc.second), acc.second});
  r.mae_id = errors.empty() ? 0.0 : mae_id(errors);
  r.predictions = std::move(predictions);
  return r;
}

}  // namespace

EvalReport evaluate(const Estimator& estimator, const Dataset& ds, const TaskList& tasks, std::span<const int> n_values,
                    int jobs) {
  EvalReport report;
  report.estimator = estimator.name();
  report.swap_mode = tasks.provenance.swap_mode;
  report.seed = tasks.provenance.seed;
  for (int n : n_values) {
    if (n < 0) throw std::invalid_argument("negative reference count");
    std::vector<double> preds(tasks.tasks.size(), 0.0);
    parallel_for(tasks.tasks.size(), jobs, [&](std::size_t i) {
      const auto& t = tasks.tasks[i];
      Query q{&ds, t.target_row, t.prefix(static_cast<std::size_t>(n))};
      preds[i] = estimator.predict(q).mean;
    });
    report.results.push_back(summarize(n, tasks, std::move(preds)));
  }
  return report;
}

json to_json(const EvalReport& report) {
  json results = json::array();
  for (const auto& r : report.results) {
    json per = json::array();
    for (const auto& p : r.per_identity) per.push_back({{"identity", p.identity}, {"mae", p.mae}, {"count", p.count}});
    results.push_back({{"n", r.n}, {"mae_id", r.mae_id}, {"task_count", r.task_count},
                       {"identity_count", r.per_identity.size()}, {"per_identity", per}});
  }
  return {{"estimator", report.estimator}, {"swap_mode", to_string(report.swap_mode)},
          {"seed", report.seed},           {"regime", report.regime},
          {"results", results}};
}

void write_report_json(const EvalReport& report, const fs::path& path) {
  write_text_file(path, to_json(report).dump(2) + "\n");
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed << v;
  return os.str();
}

}  // namespace

std::string mae_matrix_csv(std::span<const EvalReport> reports) {
  std::vector<int> ns;
  for (const auto& r : reports) {
    for (const auto& res : r.results) ns.push_back(res.n);
  }
  std::sort(ns.begin(), ns.end());
  ns.erase(std::unique(ns.begin(), ns.end()), ns.end());
  std::string out = "n";
  for (const auto& r : reports) out += "," + r.estimator + (r.swap_mode == SwapMode::kNone ? "" : "@" + to_string(r.swap_mode));
  out += "\n";
  for (int n : ns) {
    out += std::to_string(n);
    for (const auto& r : reports) {
      out += ",";
      for (const auto& res : r.results) {
        if (res.n == n) out += fmt(res.mae_id);
      }
    }
    out += "\n";
  }
  return out;
}

namespace {

struct SwapIndex {
  // (domain, age) -> rows, ascending.
  std::map<std::pair<std::int64_t, int>, std::vector<std::size_t>> by_domain_age;
  std::map<int, std::vector<std::size_t>> by_age;
  int age_lo = 0, age_hi = 0;

  explicit SwapIndex(const Dataset& ds) {
    age_lo = ds.header.age_lo;
    age_hi = ds.header.age_hi;
    for (std::size_t r = 0; r < ds.size(); ++r) {
      const auto& rec = ds.records[r];
      by_domain_age[{rec.domain_id, rec.age_years}].push_back(r);
      by_age[rec.age_years].push_back(r);
    }
  }

  const std::vector<std::size_t>* pool(std::int64_t domain, int age, bool use_domain) const {
    if (use_domain) {
      auto it = by_domain_age.find({domain, age});
      return it == by_domain_age.end() ? nullptr : &it->second;
    }
    auto it = by_age.find(age);
    return it == by_age.end() ? nullptr : &it->second;
  }
};

template <class T>
T pick_tie(const std::vector<T>& ties, Rng& rng) {
  if (ties.size() == 1) return ties[0];
  std::uniform_int_distribution<std::size_t> u(0, ties.size() - 1);
  return ties[u(rng)];
}

}  // namespace

TaskList build_swap_mix(const TaskList& tasks, const Dataset& ds, const SwapConfig& cfg, SwapStats* stats) {
  const SwapIndex index(ds);
  std::vector<int> usage(ds.size(), 0);
  Rng rng = make_stream(cfg.seed, Stream::kSwap, {1});
  SwapStats st;
  TaskList out;
  out.provenance = tasks.provenance;
  out.provenance.swap_mode = SwapMode::kMix;
  out.provenance.max_refs = std::min(tasks.provenance.max_refs, cfg.max_refs);
  for (const auto& task : tasks.tasks) {
    const auto& target = ds.records[task.target_row];
    Task t = task;
    t.d_max.entries.clear();
    t.ref_fallback.clear();
    t.d_max.swap_mode = SwapMode::kMix;
    std::vector<std::size_t> chosen_rows;
    for (const auto& slot : task.prefix(static_cast<std::size_t>(cfg.max_refs))) {
      const int age = static_cast<int>(std::lround(slot.age));
      auto eligible = [&](std::size_t r) {
        return ds.records[r].identity_id != task.identity_id && r != task.target_row &&
               std::find(chosen_rows.begin(), chosen_rows.end(), r) == chosen_rows.end();
      };
      std::vector<std::size_t> candidates;
      bool fallback = false;
      // Exact age first; then growing age gaps. Same-domain pools are preferred at each gap.
      for (int gap = 0; candidates.empty() && gap <= index.age_hi - index.age_lo; ++gap) {
        for (bool use_domain : {true, false}) {
          if (use_domain && !cfg.same_domain) continue;
          for (int a : {age - gap, age + gap}) {
            const auto* pool = index.pool(target.domain_id, a, use_domain);
            if (!pool) continue;
            for (std::size_t r : *pool) {
              if (eligible(r) && std::find(candidates.begin(), candidates.end(), r) == candidates.end()) {
                candidates.push_back(r);
              }
            }
            if (gap == 0) break;
          }
          if (!candidates.empty()) break;
        }
        if (candidates.empty()) fallback = true;
      }
      if (candidates.empty()) continue;
      int best_usage = usage[candidates[0]];
      for (std::size_t r : candidates) best_usage = std::min(best_usage, usage[r]);
      std::vector<std::size_t> ties;
      for (std::size_t r : candidates) {
        if (usage[r] == best_usage) ties.push_back(r);
      }
      const std::size_t pick = pick_tie(ties, rng);
      ++usage[pick];
      chosen_rows.push_back(pick);
      t.d_max.entries.push_back({pick, static_cast<double>(ds.records[pick].age_years)});
      t.ref_fallback.push_back(fallback);
      ++st.slots;
      if (fallback) ++st.fallback_slots;
    }
    out.tasks.push_back(std::move(t));
  }
  if (stats) *stats = st;
  return out;
}

TaskList build_swap_single(const TaskList& tasks, const Dataset& ds, const SwapConfig& cfg, SwapStats* stats) {
  const auto index = IdentityIndex::build(ds);
  std::map<std::int64_t, std::vector<std::int64_t>> ids_by_domain;
  for (std::int64_t id : index.identities) ids_by_domain[ds.records[index.rows(id).front()].domain_id].push_back(id);
  std::vector<int> usage(ds.size(), 0);
  Rng rng = make_stream(cfg.seed, Stream::kSwap, {2});
  SwapStats st;
  TaskList out;
  out.provenance = tasks.provenance;
  out.provenance.swap_mode = SwapMode::kSingle;
  out.provenance.max_refs = std::min(tasks.provenance.max_refs, cfg.max_refs);

  struct Plan {
    std::int64_t identity = 0;
    std::vector<std::size_t> rows;
    long gap = 0;
    long penalty = 0;
  };
  auto plan_for = [&](std::int64_t id, std::span<const ContextEntry> slots) {
    Plan p;
    p.identity = id;
    const auto& rows = index.rows(id);
    std::vector<bool> used(rows.size(), false);
    for (const auto& slot : slots) {
      const int age = static_cast<int>(std::lround(slot.age));
      std::size_t best = rows.size();
      bool best_used = true;
      long best_gap = 0;
      for (std::size_t k = 0; k < rows.size(); ++k) {
        const long g = std::labs(static_cast<long>(ds.records[rows[k]].age_years) - age);
        // Prefer unused images, then smaller gap, then lower usage.
        const bool better = best == rows.size() || (best_used && !used[k]) ||
                            (used[k] == best_used && (g < best_gap || (g == best_gap && usage[rows[k]] < usage[rows[best]])));
        if (better) {
          best = k;
          best_used = used[k];
          best_gap = g;
        }
      }
      used[best] = true;
      p.rows.push_back(rows[best]);
      p.gap += best_gap;
      p.penalty += usage[rows[best]];
    }
    return p;
  };

  for (const auto& task : tasks.tasks) {
    const auto slots = task.prefix(static_cast<std::size_t>(cfg.max_refs));
    const auto domain = ds.records[task.target_row].domain_id;
    std::vector<std::int64_t> pool;
    if (cfg.same_domain) {
      for (std::int64_t id : ids_by_domain[domain]) {
        if (id != task.identity_id) pool.push_back(id);
      }
    }
    if (pool.empty()) {
      for (std::int64_t id : index.identities) {
        if (id != task.identity_id) pool.push_back(id);
      }
    }
    if (pool.empty()) {
      ++st.dropped_tasks;
      continue;
    }
    Task t = task;
    t.d_max.entries.clear();
    t.ref_fallback.clear();
    t.d_max.swap_mode = SwapMode::kSingle;
    if (!slots.empty()) {
      std::vector<Plan> ties;
      for (std::int64_t id : pool) {
        Plan p = plan_for(id, slots);
        if (ties.empty() || p.gap < ties[0].gap || (p.gap == ties[0].gap && p.penalty < ties[0].penalty)) {
          ties.clear();
          ties.push_back(std::move(p));
        } else if (p.gap == ties[0].gap && p.penalty == ties[0].penalty) {
          ties.push_back(std::move(p));
        }
      }
      const Plan best = pick_tie(ties, rng);
      for (std::size_t k = 0; k < best.rows.size(); ++k) {
        const std::size_t r = best.rows[k];
        ++usage[r];
        const int age = ds.records[r].age_years;
        t.d_max.entries.push_back({r, static_cast<double>(age)});
        const bool fb = age != static_cast<int>(std::lround(slots[k].age));
        t.ref_fallback.push_back(fb);
        ++st.slots;
        if (fb) ++st.fallback_slots;
      }
    }
    out.tasks.push_back(std::move(t));
  }
  if (stats) *stats = st;
  return out;
}

std::vector<GapBucket> temporal_distance_report(const Estimator& candidate, const Estimator& baseline,
                                                const Dataset& ds, const TaskList& tasks, double bucket_width,
                                                int jobs) {
  if (!(bucket_width > 0)) throw std::invalid_argument("bucket width must be positive");
  TaskList single;
  single.provenance = tasks.provenance;
  for (const auto& t : tasks.tasks) {
    if (!t.d_max.entries.empty()) single.tasks.push_back(t);
  }
  if (single.tasks.empty()) return {};
  const int one[] = {1};
  const auto cand = evaluate(candidate, ds, single, one, jobs).results[0].predictions;
  const auto base = evaluate(baseline, ds, single, one, jobs).results[0].predictions;

  std::vector<long> bucket_of(single.tasks.size());
  long kmin = 0, kmax = 0;
  for (std::size_t i = 0; i < single.tasks.size(); ++i) {
    const auto& t = single.tasks[i];
    const double gap = t.target_age - t.d_max.entries[0].age;
    bucket_of[i] = static_cast<long>(std::floor(gap / bucket_width));
    if (i == 0 || bucket_of[i] < kmin) kmin = bucket_of[i];
    if (i == 0 || bucket_of[i] > kmax) kmax = bucket_of[i];
  }
  std::vector<GapBucket> out;
  for (long k = kmin; k <= kmax; ++k) {
    GapBucket b;
    b.lo = static_cast<double>(k) * bucket_width;
    b.hi = static_cast<double>(k + 1) * bucket_width;
    std::vector<std::pair<std::int64_t, double>> ec, eb;
    for (std::size_t i = 0; i < single.tasks.size(); ++i) {
      if (bucket_of[i] != k) continue;
      const auto& t = single.tasks[i];
      ec.emplace_back(t.identity_id, std::abs(cand[i] - t.target_age));
      eb.emplace_back(t.identity_id, std::abs(base[i] - t.target_age));
    }
    b.count = ec.size();
    b.density = static_cast<double>(b.count) / static_cast<double>(single.tasks.size());
    if (b.count > 0) {
      b.mae_candidate = mae_id(ec);
      b.mae_reference = mae_id(eb);
      b.delta = b.mae_reference - b.mae_candidate;
    }
    out.push_back(b);
  }
  return out;
}

json to_json(std::span<const GapBucket> buckets) {
  json arr = json::array();
  for (const auto& b : buckets) {
    json j{{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"density", b.density}};
    if (b.count > 0) {
      j["mae_id_baseline"] = b.mae_reference;
      j["mae_id_candidate"] = b.mae_candidate;
      j["delta_mae_id"] = b.delta;
    } else {
      j["delta_mae_id"] = nullptr;
    }
    arr.push_back(j);
  }
  return arr;
}

std::string gap_buckets_csv(std::span<const GapBucket> buckets) {
  std::string out = "lo,hi,count,density,mae_id_baseline,mae_id_candidate,delta_mae_id\n";
  for (const auto& b : buckets) {
    out += fmt(b.lo) + "," + fmt(b.hi) + "," + std::to_string(b.count) + "," + fmt(b.density) + ",";
    if (b.count > 0) {
      out += fmt(b.mae_reference) + "," + fmt(b.mae_candidate) + "," + fmt(b.delta);
    } else {
      out += ",,";
    }
    out += "\n";
  }
  return out;
}

}  // namespace refage::proto
