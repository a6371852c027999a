#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "refage/estimators/attention.hpp"
#include "refage/estimators/blr.hpp"
#include "refage/estimators/global.hpp"
#include "refage/synthworld/world.hpp"
#include "blr_oracle.hpp"
#include "test_support.hpp"

using namespace refage;
using namespace refage::est;
using refage::testing::make_toy_dataset;
using refage::testing::BlrInstance;
using refage::testing::naive_blr;
using refage::testing::random_blr_instance;

namespace {

GlobalHead hand_head(std::size_t dim, double bias, double logvar_bias = 0.0) {
  GlobalHead h;
  h.theta_mu.assign(dim + 1, 0.0);
  h.theta_logvar.assign(dim + 1, 0.0);
  h.theta_mu[dim] = bias;
  h.theta_logvar[dim] = logvar_bias;
  return h;
}

// Dense Gaussian log-density of y under N(m, C).
double dense_log_normal(const Eigen::VectorXd& y, const Eigen::VectorXd& m, const Eigen::MatrixXd& C) {
  const Eigen::VectorXd r = y - m;
  const double n = static_cast<double>(y.size());
  return -0.5 * r.dot(C.inverse() * r) - 0.5 * std::log(C.determinant()) - 0.5 * n * std::log(2 * M_PI);
}

AttnConfig tiny_attn(AttnKind kind, int in_dim) {
  AttnConfig c;
  c.kind = kind;
  c.in_dim = in_dim;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.ff_mult = 2;
  c.seed = 3;
  return c;
}

// Identity 0 with many images, identity 1 with a few; tokens for the spatial model.
Dataset attn_toy(std::size_t tokens) {
  std::vector<refage::testing::ToyImage> imgs;
  for (int i = 0; i < 12; ++i) imgs.push_back({0, 20 + 2 * i, i % 3, 0});
  for (int i = 0; i < 3; ++i) imgs.push_back({1, 50 + i, 0, 1});
  return make_toy_dataset(imgs, 8, 21, tokens);
}

std::vector<ContextEntry> ctx_of(const Dataset& ds, std::initializer_list<std::size_t> rows) {
  std::vector<ContextEntry> c;
  for (auto r : rows) c.push_back({r, double(ds.records[r].age_years)});
  return c;
}

}  // namespace

TEST_SUITE("estimators") {
  TEST_CASE("global head evaluation") {
    GlobalHead h = hand_head(4, 7.0, std::log(2.5));
    const std::vector<float> zero(4, 0.0f);
    const auto p = global_predict(h, zero);
    CHECK(p.mean == 7.0);
    CHECK(p.variance == doctest::Approx(2.5));
    CHECK(global_predict(h, zero).mean == p.mean);

    h.theta_mu = {1, 0, 0, 0, 10};
    const std::vector<float> phi{2, 0, 0, 0};
    CHECK(global_mean(h, phi) == 12.0);

    h.theta_logvar[4] = -20.0;
    CHECK(global_variance(h, phi) == kVarianceFloor);
  }

  TEST_CASE("doubling features and halving weights keeps the mean") {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd;
    GlobalHead h = hand_head(6, 33.0);
    for (std::size_t k = 0; k < 6; ++k) h.theta_mu[k] = nd(rng);
    GlobalHead half = h;
    for (std::size_t k = 0; k < 6; ++k) half.theta_mu[k] *= 0.5;
    for (int t = 0; t < 10; ++t) {
      std::vector<float> x(6), x2(6);
      for (std::size_t k = 0; k < 6; ++k) {
        x[k] = static_cast<float>(nd(rng));
        x2[k] = 2 * x[k];
      }
      CHECK(global_mean(half, x2) == doctest::Approx(global_mean(h, x)).epsilon(1e-12));
    }
  }

  TEST_CASE("global fit recovers age in a noiseless world") {
    synth::WorldConfig w;
    w.dim = 32;
    w.tokens_per_image = 1;
    w.bias_sd = w.rate_sd = w.nl_amplitude_sd = 0;
    w.label_noise_sd = 0;
    w.feature_noise_base = w.quality_noise_gain = 0;
    w.domain_offset_scale = w.source_offset_scale = 0;
    const auto ds = synth::generate_dataset(w, 300, "train");
    GlobalFitConfig c;
    c.epochs = 400;
    c.patience = 60;
    const auto h = global_fit(ds, c);
    double err = 0;
    for (const auto& r : ds.records) err += std::abs(global_mean(h, ds.feature(r.feature_row)) - r.age_years);
    CHECK(err / ds.size() < 0.5);
  }

  TEST_CASE("global fit on constant features predicts the mean age") {
    std::vector<refage::testing::ToyImage> imgs;
    for (int i = 0; i < 200; ++i) imgs.push_back({i / 4, 20 + (i * 37) % 50});
    auto ds = make_toy_dataset(imgs, 4);
    std::fill(ds.features.data().begin(), ds.features.data().end(), 0.0f);
    double mean = 0;
    for (const auto& r : ds.records) mean += r.age_years;
    mean /= ds.size();
    GlobalFitConfig c;
    c.validation_fraction = 0.0;
    const auto h = global_fit(ds, c);
    const std::vector<float> zero(4, 0.0f);
    CHECK(global_mean(h, zero) == doctest::Approx(mean).epsilon(0.01));
  }

  TEST_CASE("validation identities are deterministic and sized") {
    std::vector<refage::testing::ToyImage> imgs;
    for (int i = 0; i < 400; ++i) imgs.push_back({i / 2, 30});
    const auto ds = make_toy_dataset(imgs, 2);
    const auto a = validation_identities(ds, 0.1, 5);
    CHECK(a == validation_identities(ds, 0.1, 5));
    CHECK(a.size() > 5);
    CHECK(a.size() < 40);
  }

  TEST_CASE("offset estimator") {
    auto ds = make_toy_dataset({{0, 30}, {0, 40}, {0, 35}}, 3);
    GlobalHead h = hand_head(3, 0.0);
    h.theta_mu[0] = 1.0;  // mean = feature 0
    ds.features.row(0)[0] = 50.0f;  // target
    ds.features.row(1)[0] = 30.0f;  // f(x_r) = 30, y_r = 35 below
    const std::vector<ContextEntry> one{{1, 35.0}};
    CHECK(offset_predict(h, ds, 0, one).mean == 55.0);
    const std::vector<ContextEntry> zero_res{{1, 30.0}};
    CHECK(offset_predict(h, ds, 0, zero_res).mean == global_predict(h, ds.feature(0)).mean);
    CHECK(offset_predict(h, ds, 0, {}).mean == global_predict(h, ds.feature(0)).mean);

    std::mt19937_64 rng(1);
    const auto big = make_toy_dataset({{0, 30}, {0, 40}, {0, 35}, {0, 33}, {0, 60}}, 5);
    GlobalHead g = hand_head(5, 20.0);
    for (std::size_t k = 0; k < 5; ++k) g.theta_mu[k] = std::normal_distribution<double>(0, 3)(rng);
    const auto ctx = ctx_of(big, {1, 2, 3, 4});
    double res = 0;
    for (const auto& e : ctx) {
      double f = g.theta_mu[5];
      for (std::size_t k = 0; k < 5; ++k) f += g.theta_mu[k] * big.feature(e.row)[k];
      res += e.age - f;
    }
    const auto p = offset_predict(g, big, 0, ctx);
    CHECK(p.mean - global_mean(g, big.feature(0)) == doctest::Approx(res / 4).epsilon(1e-12));
    CHECK(p.variance == global_variance(g, big.feature(0)));
    const OffsetEstimator est(g);
    CHECK(est.predict({&big, 0, ctx}).mean == p.mean);
  }

  TEST_CASE("BLR log marginal equals a dense oracle, gradient matches finite differences") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> nd;
    const int d = 4;
    BlrModel m;
    for (int k = 0; k <= d; ++k) {
      m.theta_global.push_back(nd(rng));
      m.log_s2.push_back(-1.0 + 0.3 * nd(rng));
    }
    m.log_gamma1 = 0.2;
    m.log_gamma2 = -1.0;
    std::vector<BlrGroup> groups(4);
    for (int gi = 0; gi < 4; ++gi) {
      for (int j = 0; j < 2 + gi * 3; ++j) {
        std::vector<double> phi;
        for (int k = 0; k < d; ++k) phi.push_back(nd(rng));
        phi.push_back(1.0);
        groups[gi].phi.push_back(phi);
        groups[gi].y.push_back(nd(rng) * 2);
        groups[gi].vhat.push_back(0.5 + std::abs(nd(rng)));
      }
    }
    double oracle = 0;
    for (const auto& g : groups) {
      const auto n = static_cast<Eigen::Index>(g.y.size());
      Eigen::MatrixXd P(n, d + 1);
      Eigen::VectorXd y(n), th(d + 1), s2(d + 1);
      for (Eigen::Index i = 0; i < n; ++i) {
        y(i) = g.y[i];
        for (int k = 0; k <= d; ++k) P(i, k) = g.phi[i][k];
      }
      for (int k = 0; k <= d; ++k) th(k) = m.theta_global[k], s2(k) = std::exp(m.log_s2[k]);
      Eigen::MatrixXd C = P * s2.asDiagonal() * P.transpose();
      for (Eigen::Index i = 0; i < n; ++i) C(i, i) += std::exp(m.log_gamma1) * g.vhat[i] + std::exp(m.log_gamma2);
      oracle += dense_log_normal(y, P * th, C);
    }
    BlrGradient grad;
    const double value = blr_log_marginal(m, groups, &grad);
    CHECK(value == doctest::Approx(oracle).epsilon(1e-10));

    const double h = 1e-5;
    auto fd = [&](auto&& poke) {
      BlrModel a = m, b = m;
      poke(a, h);
      poke(b, -h);
      return (blr_log_marginal(a, groups) - blr_log_marginal(b, groups)) / (2 * h);
    };
    for (int k = 0; k <= d; ++k) {
      CHECK(grad.d_log_s2[k] == doctest::Approx(fd([k](BlrModel& x, double e) { x.log_s2[k] += e; })).epsilon(1e-6));
    }
    CHECK(grad.d_log_gamma1 == doctest::Approx(fd([](BlrModel& x, double e) { x.log_gamma1 += e; })).epsilon(1e-6));
    CHECK(grad.d_log_gamma2 == doctest::Approx(fd([](BlrModel& x, double e) { x.log_gamma2 += e; })).epsilon(1e-6));
  }

  TEST_CASE("BLR fit: first logged objective equals the dense oracle at the initial point") {
    synth::WorldConfig w;
    w.dim = 8;
    w.kind = synth::WorldKind::kLinearRate;
    const auto ds = synth::generate_dataset(w, 60, "train");
    const auto head = global_fit(ds, {});
    BlrFitConfig c;
    c.identities = "all";
    c.iterations = 5;
    BlrFitLog log;
    blr_fit(head, ds, c, &log);
    REQUIRE(log.objective.size() == 5);
    BlrModel init;
    init.theta_global = head.theta_mu;
    init.log_s2.assign(head.theta_mu.size(), c.init_log_s2);
    init.log_gamma1 = c.init_log_gamma1;
    init.log_gamma2 = c.init_log_gamma2;
    const auto idx = IdentityIndex::build(ds);
    double oracle = 0;
    for (auto id : idx.identities) {
      const auto& rows = idx.rows(id);
      const auto n = static_cast<Eigen::Index>(rows.size());
      Eigen::MatrixXd P(n, w.dim + 1);
      Eigen::VectorXd y(n), mean(n);
      Eigen::MatrixXd C = Eigen::MatrixXd::Zero(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto phi = ds.feature(rows[i]);
        for (int k = 0; k < w.dim; ++k) P(i, k) = phi[k];
        P(i, w.dim) = 1.0;
        y(i) = ds.records[rows[i]].age_years;
        mean(i) = global_mean(head, phi);
        C(i, i) = std::exp(init.log_gamma1) * global_variance(head, phi) + std::exp(init.log_gamma2);
      }
      C += std::exp(c.init_log_s2) * P * P.transpose();
      oracle += dense_log_normal(y, mean, C);
    }
    CHECK(log.objective[0] == doctest::Approx(oracle).epsilon(1e-5));
  }

  TEST_CASE("BLR noise scales recover a residual variance equal to vhat") {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> u(0.5, 4.0);
    std::vector<BlrGroup> groups(200);
    const GlobalHead head = hand_head(2, 0.0);
    for (auto& g : groups) {
      for (int j = 0; j < 8; ++j) {
        const double v = u(rng);
        g.phi.push_back({nd(rng), nd(rng), 1.0});
        g.vhat.push_back(v);
        g.y.push_back(std::sqrt(v) * nd(rng));
      }
    }
    BlrFitConfig c;
    c.iterations = 600;
    c.lr = 0.03;
    c.init_log_gamma1 = 0.0;
    c.init_log_gamma2 = std::log(1e-4);
    const auto m = blr_fit_groups(head, groups, c);
    CHECK(std::exp(m.log_gamma1) == doctest::Approx(1.0).epsilon(0.1));
    CHECK(std::exp(m.log_gamma2) < 0.1);
  }

  TEST_CASE("BLR prior scale collapses without identity variation") {
    auto fit_world = [](double bias, double rate) {
      synth::WorldConfig w;
      w.dim = 8;
      w.kind = synth::WorldKind::kLinearRate;
      w.bias_sd = bias;
      w.rate_sd = rate;
      w.nl_amplitude_sd = 0;
      // identity-level feature offsets are identity variation too
      w.domain_offset_scale = bias > 0 ? w.domain_offset_scale : 0.0;
      w.source_offset_scale = bias > 0 ? w.source_offset_scale : 0.0;
      const auto ds = synth::generate_dataset(w, 160, "train");
      GlobalFitConfig gc;
      const auto head = global_fit(ds, gc);
      BlrFitConfig c;
      c.identities = "all";
      c.iterations = 400;
      c.lr = 0.05;
      const auto m = blr_fit(head, ds, c);
      std::vector<double> s2;
      for (double l : m.log_s2) s2.push_back(std::exp(l));
      std::nth_element(s2.begin(), s2.begin() + s2.size() / 2, s2.end());
      return s2[s2.size() / 2];
    };
    const double flat = fit_world(0.0, 0.0);
    const double varied = fit_world(3.0, 0.1);
    INFO("median s2 flat " << flat << " varied " << varied);
    CHECK(flat < 1e-2 * varied);
  }

  TEST_CASE("BLR prediction limits and exactness") {
    std::mt19937_64 rng(5);
    auto in = random_blr_instance(8, 5, rng);
    // N = 0 is the global mean
    const auto p0 = blr_predict(in.model, in.xs, in.vs, {}, {}, {});
    double mean0 = 0;
    for (std::size_t k = 0; k < in.xs.size(); ++k) mean0 += in.model.theta_global[k] * in.xs[k];
    CHECK(p0.mean == doctest::Approx(mean0).epsilon(1e-12));

    // dual and primal against explicit inversion
    const auto oracle = naive_blr(in);
    for (auto form : {BlrForm::kDual, BlrForm::kPrimal, BlrForm::kAuto}) {
      const auto p = blr_predict(in.model, in.xs, in.vs, in.phis, in.vh, in.y, form);
      CHECK(p.mean == doctest::Approx(oracle.mean).epsilon(1e-8));
      CHECK(p.variance == doctest::Approx(oracle.variance).epsilon(1e-8));
    }

    // vanishing prior scale pins the personal weights to the global ones
    BlrInstance pinned = in;
    std::fill(pinned.model.log_s2.begin(), pinned.model.log_s2.end(), -40.0);
    const auto pp = blr_predict(pinned.model, pinned.xs, pinned.vs, pinned.phis, pinned.vh, pinned.y);
    CHECK(pp.mean == doctest::Approx(mean0).epsilon(1e-9));
  }

  TEST_CASE("BLR estimator at N=0 matches the global estimator") {
    const auto ds = make_toy_dataset({{0, 30}, {0, 31}, {0, 40}}, 4);
    GlobalHead h = hand_head(4, 35.0, 1.0);
    h.theta_mu = {0.3, -1.2, 2.0, 0.7, 35.0};
    h.theta_logvar = {0.1, 0.0, -0.2, 0.3, 1.0};
    BlrModel m;
    m.theta_global = h.theta_mu;
    m.log_s2.assign(5, 0.0);
    const BlrEstimator blr(m, h);
    const GlobalEstimator glob(h);
    for (std::size_t t = 0; t < 3; ++t) {
      CHECK(std::abs(blr.predict({&ds, t, {}}).mean - glob.predict({&ds, t, {}}).mean) <= 1e-9);
    }
  }

  TEST_CASE("estimator json round trips") {
    GlobalHead h = hand_head(3, 1.5, -0.5);
    h.theta_mu[1] = 0.1234567890123;
    CHECK(global_head_from_json(to_json(h)) == h);
    BlrModel m;
    m.theta_global = h.theta_mu;
    m.log_s2 = {1, 2, 3, 4};
    m.log_gamma1 = 0.25;
    CHECK(blr_model_from_json(to_json(m)) == m);
    AttnConfig a = tiny_attn(AttnKind::kSpatial, 8);
    CHECK(to_json(attn_config_from_json(to_json(a))) == to_json(a));
  }

  TEST_CASE("sinusoidal age embedding") {
    const auto e0 = sinusoidal_age_embedding(0.0, 8);
    for (int k = 0; k < 8; ++k) CHECK(e0[k] == (k % 2 == 0 ? 0.0 : 1.0));
    const auto epi = sinusoidal_age_embedding(M_PI, 2);
    CHECK(epi[0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(epi[1] == doctest::Approx(-1.0));
    const auto a = sinusoidal_age_embedding(1.3, 6), b = sinusoidal_age_embedding(1.3 + 2 * M_PI, 6);
    CHECK(a[0] == doctest::Approx(b[0]).epsilon(1e-12));
    CHECK(a[1] == doctest::Approx(b[1]).epsilon(1e-12));
  }

  TEST_CASE("attention mask layout") {
    const auto m0 = build_attention_mask(0);
    CHECK(m0 == std::vector<double>{0.0});
    const auto m1 = build_attention_mask(1);
    CHECK(m1 == std::vector<double>{0.0, num::kMaskedLogit, 0.0, 0.0});
    const auto m3 = build_attention_mask(3);
    CHECK(std::count(m3.begin(), m3.end(), 0.0) == 13);
  }

  TEST_CASE("attention outputs are bounded at random init") {
    for (auto kind : {AttnKind::kJoint, AttnKind::kSpatial}) {
      const auto ds = attn_toy(kind == AttnKind::kSpatial ? 3 : 0);
      const auto model = AttnModel::init(tiny_attn(kind, 8));
      const AttnEstimator est(model, hand_head(8, 30.0));
      for (std::size_t t = 0; t < ds.size(); ++t) {
        const auto p = est.predict({&ds, t, ctx_of(ds, {(t + 1) % ds.size(), (t + 2) % ds.size()})});
        CHECK(p.mean > 0.0);
        CHECK(p.mean < 100.0);
        CHECK(p.variance >= kVarianceFloor);
      }
    }
  }

  TEST_CASE("attention predictions are invariant to reference order") {
    std::mt19937_64 rng(4);
    for (auto kind : {AttnKind::kJoint, AttnKind::kSpatial}) {
      const auto ds = attn_toy(kind == AttnKind::kSpatial ? 3 : 0);
      const AttnEstimator est(AttnModel::init(tiny_attn(kind, 8)), hand_head(8, 30.0));
      auto ctx = ctx_of(ds, {1, 2, 3, 4, 5, 6});
      const auto base = est.predict({&ds, 0, ctx});
      for (int p = 0; p < 5; ++p) {
        std::shuffle(ctx.begin(), ctx.end(), rng);
        const auto q = est.predict({&ds, 0, ctx});
        CHECK(std::abs(q.mean - base.mean) <= 1e-5);
        CHECK(std::abs(q.variance - base.variance) <= 1e-5);
      }
    }
  }

  TEST_CASE("joint model: reference states ignore the target") {
    const auto ds = attn_toy(0);
    const auto model = AttnModel::init(tiny_attn(AttnKind::kJoint, 8));
    const auto params = param_buffers<double>(model.params);
    const auto ctx = ctx_of(ds, {1, 2, 3});
    auto hidden_of = [&](std::size_t target) {
      const std::size_t targets[] = {target};
      const std::span<const ContextEntry> contexts[] = {ctx};
      const auto batch = make_attn_batch(ds, AttnKind::kJoint, targets, contexts);
      num::Tape<double> tape;
      const auto vars = bind_params(tape, model.params, params, false);
      const auto g = attn_forward(tape, model, vars, batch);
      std::vector<std::vector<double>> out;
      for (auto h : g.hidden) {
        const auto v = tape.value(h);
        out.emplace_back(v.begin(), v.begin() + 3 * model.cfg.d_model);  // reference positions only
      }
      return std::make_pair(out, tape.value(g.mu)[0]);
    };
    const auto [ha, mua] = hidden_of(0);
    const auto [hb, mub] = hidden_of(13);
    CHECK(ha == hb);
    CHECK(mua != mub);
  }

  TEST_CASE("spatial model with one token per image") {
    const auto ds = attn_toy(1);
    const AttnEstimator est(AttnModel::init(tiny_attn(AttnKind::kSpatial, 8)), hand_head(8, 30.0));
    const auto p = est.predict({&ds, 0, ctx_of(ds, {1, 2})});
    CHECK(p.mean > 0.0);
    CHECK(p.mean < 100.0);
  }

  TEST_CASE("N=0 falls back to the global head") {
    const auto ds = attn_toy(3);
    const GlobalHead h = hand_head(8, 42.0, 1.0);
    const AttnEstimator est(AttnModel::init(tiny_attn(AttnKind::kSpatial, 8)), h);
    CHECK(est.predict({&ds, 0, {}}).mean == 42.0);
  }

  TEST_CASE("pair averaging") {
    const auto ds = attn_toy(3);
    const auto model = AttnModel::init(tiny_attn(AttnKind::kSpatial, 8));
    const GlobalHead h = hand_head(8, 30.0);
    const AttnEstimator spatial(model, h);
    const AttnEstimator pair(model, h, true);
    CHECK(pair.name() == "pair_avg");

    const auto one = ctx_of(ds, {4});
    CHECK(pair.predict({&ds, 0, one}).mean == spatial.predict({&ds, 0, one}).mean);

    const std::vector<ContextEntry> same(3, one[0]);
    CHECK(pair.predict({&ds, 0, same}).mean == doctest::Approx(spatial.predict({&ds, 0, one}).mean).epsilon(1e-14));

    const auto three = ctx_of(ds, {2, 5, 9});
    double mean = 0, var = 0;
    for (const auto& e : three) {
      const std::vector<ContextEntry> single{e};
      const auto p = spatial.predict({&ds, 0, single});
      mean += p.mean;
      var += p.variance;
    }
    const auto pa = pair.predict({&ds, 0, three});
    CHECK(pa.mean == mean / 3);
    CHECK(pa.variance == var / 9);
  }

  TEST_CASE("spatial cross-attention cost grows about linearly in N") {
    std::vector<refage::testing::ToyImage> imgs;
    for (int i = 0; i < 41; ++i) imgs.push_back({0, 20 + i});
    const auto ds = make_toy_dataset(imgs, 8, 3, 9);
    const auto model = AttnModel::init(tiny_attn(AttnKind::kSpatial, 8));
    const auto params = param_buffers<double>(model.params);
    auto seconds = [&](int n) {
      std::vector<ContextEntry> ctx;
      for (int j = 1; j <= n; ++j) ctx.push_back({static_cast<std::size_t>(j), 20.0 + j});
      const std::size_t targets[] = {0};
      const std::span<const ContextEntry> contexts[] = {ctx};
      const auto batch = make_attn_batch(ds, AttnKind::kSpatial, targets, contexts);
      double best = 1e9;
      for (int rep = 0; rep < 5; ++rep) {
        const auto t0 = std::chrono::steady_clock::now();
        attn_predict(model, params, batch);
        best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      }
      return best;
    };
    const double t5 = seconds(5), t40 = seconds(40);
    INFO("t5 " << t5 << " t40 " << t40);
    // linear growth gives at most 8x; a quadratic dependence would give ~64x
    CHECK(t40 / t5 < 20.0);
  }

  TEST_CASE("attention checkpoint round trip") {
    testing::TempDir tmp;
    const auto model = AttnModel::init(tiny_attn(AttnKind::kJoint, 8));
    num::write_checkpoint(to_checkpoint(model, 12, true), tmp.path());
    const auto back = attn_model_from_checkpoint(num::read_checkpoint(tmp.path()));
    CHECK(back.params == model.params);
    CHECK(to_json(back.cfg) == to_json(model.cfg));
  }

  TEST_CASE("attention config validation") {
    AttnConfig c = tiny_attn(AttnKind::kJoint, 8);
    c.d_model = 15;
    CHECK_THROWS(c.validate());
    CHECK_THROWS(attn_kind_from_string("diagonal"));
  }
}
