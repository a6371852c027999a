#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "refage/core/dataset_io.hpp"
#include "refage/estimators/blr.hpp"
#include "refage/estimators/global.hpp"
#include "refage/protocol/protocol.hpp"
#include "test_support.hpp"

using namespace refage;
using namespace refage::proto;
using refage::testing::make_toy_dataset;
using refage::testing::TempDir;
using refage::testing::ToyImage;

namespace {

class ConstantEstimator final : public Estimator {
 public:
  explicit ConstantEstimator(double c) : c_(c) {}
  std::string name() const override { return "constant"; }
  Prediction predict(const Query&) const override { return {c_, 1.0}; }

 private:
  double c_;
};

class TruthEstimator final : public Estimator {
 public:
  std::string name() const override { return "truth"; }
  Prediction predict(const Query& q) const override { return {double(q.data->records[q.target_row].age_years), 1.0}; }
};

// Mean of the reference ages, or 0 with no references.
class RefMeanEstimator final : public Estimator {
 public:
  std::string name() const override { return "ref_mean"; }
  Prediction predict(const Query& q) const override {
    double s = 0;
    for (const auto& e : q.context) s += e.age;
    return {q.context.empty() ? 0.0 : s / q.context.size(), 1.0};
  }
};

Dataset mixed_toy(std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::vector<ToyImage> imgs;
  for (int id = 0; id < 12; ++id) {
    const int n = 2 + static_cast<int>(rng() % 8);
    const int start = 20 + static_cast<int>(rng() % 40);
    for (int j = 0; j < n; ++j) imgs.push_back({id, start + static_cast<int>(rng() % 6), j % 3, id % 2});
  }
  return make_toy_dataset(imgs, 4, seed);
}

// Two-loop definition of identity-balanced MAE.
double brute_mae_id(const std::vector<std::pair<std::int64_t, double>>& errs) {
  std::set<std::int64_t> ids;
  for (const auto& e : errs) ids.insert(e.first);
  double total = 0;
  for (auto id : ids) {
    double s = 0;
    int n = 0;
    for (const auto& e : errs) {
      if (e.first == id) {
        s += e.second;
        ++n;
      }
    }
    total += s / n;
  }
  return total / ids.size();
}

// Exact minimum over assignments of the maximum image usage, by max-flow with
// a usage cap k: slot -> (task, image) [1] -> image [k].
int optimal_max_usage(const TaskList& tasks, const Dataset& ds, int max_refs) {
  struct Edge {
    int to, cap, rev;
  };
  auto feasible = [&](int k) {
    std::vector<std::vector<Edge>> g;
    auto node = [&] {
      g.emplace_back();
      return static_cast<int>(g.size()) - 1;
    };
    auto add = [&](int a, int b, int c) {
      g[a].push_back({b, c, static_cast<int>(g[b].size())});
      g[b].push_back({a, 0, static_cast<int>(g[a].size()) - 1});
    };
    const int src = node(), sink = node();
    std::vector<int> image_node(ds.size());
    for (auto& n : image_node) {
      n = node();
      add(n, sink, k);
    }
    int slots = 0;
    for (const auto& t : tasks.tasks) {
      std::map<std::size_t, int> pair_node;
      for (const auto& e : t.prefix(max_refs)) {
        const int s = node();
        add(src, s, 1);
        ++slots;
        for (std::size_t r = 0; r < ds.size(); ++r) {
          if (ds.records[r].identity_id == t.identity_id || ds.records[r].age_years != std::lround(e.age)) continue;
          auto it = pair_node.find(r);
          if (it == pair_node.end()) {
            const int p = node();
            add(p, image_node[r], 1);
            it = pair_node.emplace(r, p).first;
          }
          add(s, it->second, 1);
        }
      }
    }
    int flow = 0;
    while (true) {
      std::vector<int> seen(g.size(), 0);
      std::function<int(int)> dfs = [&](int v) -> int {
        if (v == sink) return 1;
        seen[v] = 1;
        for (auto& e : g[v]) {
          if (e.cap > 0 && !seen[e.to] && dfs(e.to)) {
            e.cap -= 1;
            g[e.to][e.rev].cap += 1;
            return 1;
          }
        }
        return 0;
      };
      if (!dfs(src)) break;
      ++flow;
    }
    return flow == slots;
  };
  int k = 1;
  while (!feasible(k)) ++k;
  return k;
}

}  // namespace

TEST_SUITE("protocol") {
  TEST_CASE("identity with two images gives two one-reference tasks per trial") {
    const auto ds = make_toy_dataset({{0, 30, 0}, {0, 40, 1}, {1, 50, 0}}, 2);
    const auto list = build_task_list(ds, 3, 10, true, 1);
    CHECK(list.tasks.size() == 6);
    for (const auto& t : list.tasks) {
      REQUIRE(t.d_max.size() == 1);
      CHECK(t.d_max.entries[0].row == 1 - t.target_row);
      CHECK(t.d_max.entries[0].age == ds.records[1 - t.target_row].age_years);
      CHECK(t.cross_source_ok);
    }
  }

  TEST_CASE("cross-source references come first; same-source fallback is flagged") {
    const auto ds = make_toy_dataset({{0, 30, 7}, {0, 31, 7}, {0, 32, 7}, {1, 40, 1}, {1, 41, 2}, {1, 42, 1}}, 2);
    const auto list = build_task_list(ds, 2, 10, true, 3);
    for (const auto& t : list.tasks) {
      const auto src = ds.records[t.target_row].source_id;
      if (t.identity_id == 0) {
        CHECK_FALSE(t.cross_source_ok);
        CHECK(t.d_max.size() == 2);
      } else {
        bool seen_same = false;
        for (const auto& e : t.d_max.entries) {
          const bool same = ds.records[e.row].source_id == src;
          CHECK_FALSE((seen_same && !same));  // no cross-source reference after a same-source one
          seen_same = seen_same || same;
        }
      }
    }
  }

  TEST_CASE("max_refs truncates and trials validate") {
    std::vector<ToyImage> imgs;
    for (int j = 0; j < 30; ++j) imgs.push_back({0, 20 + j, j});
    const auto ds = make_toy_dataset(imgs, 2);
    const auto list = build_task_list(ds, 1, 20, true, 1);
    for (const auto& t : list.tasks) CHECK(t.d_max.size() == 20);
    CHECK_THROWS_AS(build_task_list(ds, 0, 20, true, 1), std::invalid_argument);
  }

  TEST_CASE("task list files are deterministic and round trip") {
    const auto ds = mixed_toy();
    TempDir tmp;
    write_task_list(build_task_list(ds, 2, 20, true, 9, "abc"), ds, tmp / "a.jsonl");
    write_task_list(build_task_list(ds, 2, 20, true, 9, "abc"), ds, tmp / "b.jsonl");
    CHECK(read_text_file(tmp / "a.jsonl") == read_text_file(tmp / "b.jsonl"));
    write_task_list(build_task_list(ds, 2, 20, true, 10, "abc"), ds, tmp / "c.jsonl");
    CHECK(read_text_file(tmp / "a.jsonl") != read_text_file(tmp / "c.jsonl"));

    const auto back = read_task_list(tmp / "a.jsonl", ds);
    const auto orig = build_task_list(ds, 2, 20, true, 9, "abc");
    CHECK(back.provenance == orig.provenance);
    REQUIRE(back.tasks.size() == orig.tasks.size());
    for (std::size_t i = 0; i < back.tasks.size(); ++i) {
      CHECK(back.tasks[i].d_max.entries == orig.tasks[i].d_max.entries);
      CHECK(back.tasks[i].target_row == orig.tasks[i].target_row);
    }
  }

  TEST_CASE("mae_id definitions") {
    const std::vector<std::pair<std::int64_t, double>> contrast{{0, 0.0}, {0, 0.0}, {1, 4.0}};
    CHECK(mae_id(contrast) == 2.0);
    const std::vector<std::pair<std::int64_t, double>> single{{5, 1.0}, {5, 2.0}, {5, 6.0}};
    CHECK(mae_id(single) == doctest::Approx(3.0).epsilon(1e-15));
    CHECK_THROWS(mae_id(std::vector<std::pair<std::int64_t, double>>{}));

    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<std::pair<std::int64_t, double>> errs;
      const int n = 1 + static_cast<int>(rng() % 60);
      for (int i = 0; i < n; ++i) {
        errs.push_back({static_cast<std::int64_t>(rng() % 9), std::uniform_real_distribution<double>(0, 20)(rng)});
      }
      CHECK(std::abs(mae_id(errs) - brute_mae_id(errs)) <= 1e-12);
    }
  }

  TEST_CASE("evaluate: oracle, constant and reference-mean estimators") {
    const auto ds = mixed_toy();
    const auto list = build_task_list(ds, 1, 20, true, 4);
    const std::vector<int> ns{0, 1, 3, 10};
    for (const auto& r : evaluate(TruthEstimator(), ds, list, ns).results) CHECK(r.mae_id == 0.0);

    // hand computation for a constant estimator
    const double c = 37.0;
    std::map<std::int64_t, std::pair<double, int>> per;
    for (const auto& t : list.tasks) {
      per[t.identity_id].first += std::abs(c - t.target_age);
      per[t.identity_id].second += 1;
    }
    double expect = 0;
    for (const auto& [id, v] : per) expect += v.first / v.second;
    expect /= per.size();
    const auto rep = evaluate(ConstantEstimator(c), ds, list, ns);
    for (const auto& r : rep.results) CHECK(r.mae_id == doctest::Approx(expect).epsilon(1e-12));
    CHECK(rep.results[0].per_identity.size() == per.size());

    // prefix truncation: the estimator sees exactly min(N, |d_max|) references
    const auto rm = evaluate(RefMeanEstimator(), ds, list, std::vector<int>{1});
    for (std::size_t i = 0; i < list.tasks.size(); ++i) {
      CHECK(rm.results[0].predictions[i] == list.tasks[i].d_max.entries[0].age);
    }
  }

  TEST_CASE("evaluate is independent of the job count") {
    const auto ds = mixed_toy(3);
    const auto list = build_task_list(ds, 2, 20, true, 4);
    const std::vector<int> ns{1, 5};
    const auto a = evaluate(RefMeanEstimator(), ds, list, ns, 1);
    const auto b = evaluate(RefMeanEstimator(), ds, list, ns, 4);
    CHECK(to_json(a) == to_json(b));
  }

  TEST_CASE("N=0 reports coincide for estimators sharing the global head") {
    const auto ds = mixed_toy();
    est::GlobalHead h;
    h.theta_mu = {1.0, -2.0, 0.5, 3.0, 40.0};
    h.theta_logvar = {0.0, 0.1, 0.0, 0.0, 1.0};
    est::BlrModel m;
    m.theta_global = h.theta_mu;
    m.log_s2.assign(5, 0.0);
    const auto list = build_task_list(ds, 1, 20, true, 4);
    const std::vector<int> n0{0};
    const auto g = evaluate(est::GlobalEstimator(h), ds, list, n0).results[0];
    const auto o = evaluate(est::OffsetEstimator(h), ds, list, n0).results[0];
    const auto b = evaluate(est::BlrEstimator(m, h), ds, list, n0).results[0];
    CHECK(g.mae_id == o.mae_id);
    CHECK(std::abs(g.mae_id - b.mae_id) <= 1e-9);
  }

  TEST_CASE("swap mix: forced choice and exact ages") {
    // identity 0 needs an age-33 stand-in; only identity 2 has one
    const auto ds = make_toy_dataset(
        {{0, 30, 0}, {0, 33, 1}, {1, 30, 0}, {1, 50, 1}, {2, 33, 0}, {2, 60, 1}, {3, 30, 0}, {3, 70, 1}}, 2);
    const auto list = build_task_list(ds, 1, 10, true, 1);
    SwapStats stats;
    const auto mix = build_swap_mix(list, ds, {10, false, 1}, &stats);
    REQUIRE(mix.tasks.size() == list.tasks.size());
    for (std::size_t i = 0; i < mix.tasks.size(); ++i) {
      const auto& orig = list.tasks[i];
      const auto& sw = mix.tasks[i];
      REQUIRE(sw.d_max.size() == orig.d_max.size());
      for (std::size_t k = 0; k < sw.d_max.size(); ++k) {
        CHECK(ds.records[sw.d_max.entries[k].row].identity_id != orig.identity_id);
        if (!sw.ref_fallback[k]) CHECK(sw.d_max.entries[k].age == orig.d_max.entries[k].age);
      }
      if (orig.target_row == 0) CHECK(ds.records[sw.d_max.entries[0].row].identity_id == 2);
    }
    CHECK(stats.slots == 8);
  }

  TEST_CASE("swap mix: usage stays near the optimal maximum") {
    // 10 identities x 5 images over ages 30..34
    std::vector<ToyImage> imgs;
    std::mt19937_64 rng(5);
    for (int id = 0; id < 10; ++id) {
      for (int j = 0; j < 5; ++j) imgs.push_back({id, 30 + static_cast<int>(rng() % 5), j});
    }
    const auto ds = make_toy_dataset(imgs, 2);
    const auto list = build_task_list(ds, 1, 3, true, 2);
    SwapStats stats;
    const auto mix = build_swap_mix(list, ds, {3, false, 1}, &stats);
    REQUIRE(stats.fallback_slots == 0);
    std::vector<int> usage(ds.size(), 0);
    for (const auto& t : mix.tasks) {
      for (const auto& e : t.d_max.entries) ++usage[e.row];
    }
    const int greedy = *std::max_element(usage.begin(), usage.end());
    const int best = optimal_max_usage(list, ds, 3);
    INFO("greedy " << greedy << " optimal " << best);
    CHECK(greedy <= best + 1);
  }

  TEST_CASE("swap single: one stand-in identity per task") {
    // identity 0 has ages {30, 32}; only identity 1 has both
    const auto ds = make_toy_dataset({{0, 30, 0}, {0, 32, 1}, {0, 31, 2}, {1, 30, 0}, {1, 32, 1}, {2, 30, 0},
                                      {2, 45, 1}, {3, 32, 0}, {3, 60, 1}},
                                     2);
    auto list = build_task_list(ds, 1, 10, true, 1);
    const auto single = build_swap_single(list, ds, {10, false, 3});
    for (std::size_t i = 0; i < single.tasks.size(); ++i) {
      const auto& t = single.tasks[i];
      std::set<std::int64_t> ids;
      for (const auto& e : t.d_max.entries) ids.insert(ds.records[e.row].identity_id);
      CHECK(ids.size() <= 1);
      CHECK(ids.count(t.identity_id) == 0);
      if (t.target_row == 2) CHECK(*ids.begin() == 1);  // needs {30, 32}
    }
  }

  TEST_CASE("temporal buckets") {
    const auto ds = mixed_toy(4);
    est::GlobalHead h;
    h.theta_mu = {0.5, 0.0, -1.0, 0.0, 35.0};
    h.theta_logvar = {0, 0, 0, 0, 0};
    const est::GlobalEstimator glob(h);
    const auto list = build_task_list(ds, 2, 10, true, 5);
    const auto same = temporal_distance_report(glob, glob, ds, list, 2.0);
    std::size_t total = 0;
    for (const auto& b : same) {
      total += b.count;
      CHECK(b.hi - b.lo == 2.0);
      if (b.count > 0) CHECK(b.delta == 0.0);
    }
    CHECK(total == list.tasks.size());

    const auto diff = temporal_distance_report(RefMeanEstimator(), glob, ds, list, 3.0);
    double dens = 0;
    for (const auto& b : diff) dens += b.density;
    CHECK(dens == doctest::Approx(1.0));
    CHECK_THROWS(temporal_distance_report(glob, glob, ds, list, 0.0));
    CHECK(gap_buckets_csv(diff).rfind("lo,hi,count", 0) == 0);
  }
}
