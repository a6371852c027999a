#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "refage/numcore/grad_check.hpp"
#include "refage/numcore/tape.hpp"

namespace refage::testing {

struct OpCheckResult {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
};

using num::Buffers;
using num::Shape;
using num::Tape;
using num::Var;

/// Builds the op under test from parameter vars; returns its output.
using OpGraph = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

/// Loss = sum(out * w) with fixed random w, so every output coordinate matters.
inline OpCheckResult check_op(const std::string& name, const std::vector<Shape>& shapes, const OpGraph& graph,
                              std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  Buffers<double> params;
  for (const auto& s : shapes) params.push_back(random_values(num::numel(s), rng, lo, hi));
  std::vector<double> weights;
  auto loss = [&](const Buffers<double>& p, Buffers<double>* grads) {
    Tape<double> tape;
    std::vector<Var> vars;
    for (std::size_t i = 0; i < p.size(); ++i) vars.push_back(tape.parameter(shapes[i], p[i]));
    const Var out = graph(tape, vars);
    if (weights.empty()) {
      std::mt19937_64 wr(seed ^ 0x5eed);
      weights = random_values(tape.value(out).size(), wr);
    }
    const Var w = tape.constant(tape.shape(out), weights);
    const Var l = tape.sum_all(tape.mul(out, w));
    const double value = tape.value(l)[0];
    if (grads) {
      tape.backward(l);
      grads->clear();
      for (const Var v : vars) grads->emplace_back(tape.grad(v).begin(), tape.grad(v).end());
    }
    return value;
  };
  num::GradCheckOptions opts;
  opts.coords_per_tensor = 0;
  opts.seed = seed;
  const auto report = num::grad_check(loss, params, opts);
  return {name, report.max_rel_error, report.entries.size()};
}

/// Finite-difference checks of every tape op on random shapes (64-bit).
inline std::vector<OpCheckResult> run_op_grad_checks(std::uint64_t seed) {
  std::mt19937_64 pick(seed);
  auto dim = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(pick); };
  std::vector<OpCheckResult> out;
  const int B = dim(2, 3), M = dim(2, 4), K = dim(2, 5), N = dim(2, 4);

  out.push_back(check_op("matmul_shared", {{B, M, K}, {K, N}},
                         [](auto& t, const auto& v) { return t.matmul(v[0], v[1]); }, seed + 1));
  out.push_back(check_op("matmul_batched", {{B, M, K}, {B, K, N}},
                         [](auto& t, const auto& v) { return t.matmul(v[0], v[1]); }, seed + 2));
  out.push_back(check_op("matmul_transpose_b", {{B, M, K}, {B, N, K}},
                         [](auto& t, const auto& v) { return t.matmul(v[0], v[1], true); }, seed + 3));
  out.push_back(check_op("add_broadcast", {{B, M, K}, {K}}, [](auto& t, const auto& v) { return t.add(v[0], v[1]); },
                         seed + 4));
  out.push_back(check_op("sub", {{B, M}, {B, M}}, [](auto& t, const auto& v) { return t.sub(v[0], v[1]); }, seed + 5));
  out.push_back(check_op("mul_broadcast", {{B, M, K}, {M, K}},
                         [](auto& t, const auto& v) { return t.mul(v[0], v[1]); }, seed + 6));
  out.push_back(check_op("affine", {{B, K}}, [](auto& t, const auto& v) { return t.affine(v[0], 2.5, -0.3); },
                         seed + 7));
  {
    const int L = dim(3, 5);
    std::vector<double> mask(static_cast<std::size_t>(L * L), 0.0);
    for (int i = 0; i < L - 1; ++i) mask[static_cast<std::size_t>(i * L + L - 1)] = num::kMaskedLogit;
    out.push_back(check_op("masked_softmax", {{B, L, L}},
                           [mask](auto& t, const auto& v) { return t.masked_softmax(v[0], mask); }, seed + 8, -2, 2));
  }
  out.push_back(check_op("layer_norm", {{B, M, K + 2}}, [](auto& t, const auto& v) { return t.layer_norm(v[0]); },
                         seed + 9, -2, 2));
  out.push_back(check_op("gelu", {{B, K}}, [](auto& t, const auto& v) { return t.gelu(v[0]); }, seed + 10, -3, 3));
  out.push_back(
      check_op("sigmoid", {{B, K}}, [](auto& t, const auto& v) { return t.sigmoid(v[0]); }, seed + 11, -3, 3));
  out.push_back(check_op("exp", {{B, K}}, [](auto& t, const auto& v) { return t.exp(v[0]); }, seed + 12));
  out.push_back(check_op("concat", {{B, M, K}, {B, N, K}},
                         [](auto& t, const auto& v) {
                           const std::vector<Var> parts{v[0], v[1]};
                           return t.concat(parts, 1);
                         },
                         seed + 13));
  out.push_back(check_op("concat_last", {{B, M, K}, {B, M, N}},
                         [](auto& t, const auto& v) {
                           const std::vector<Var> parts{v[0], v[1]};
                           return t.concat(parts, 2);
                         },
                         seed + 14));
  out.push_back(check_op("slice", {{B, M + 2, K}}, [M](auto& t, const auto& v) { return t.slice(v[0], 1, 1, M + 1); },
                         seed + 15));
  out.push_back(check_op("reshape", {{B, M, K}},
                         [B, M, K](auto& t, const auto& v) { return t.reshape(v[0], {B * M, K}); }, seed + 16));
  out.push_back(check_op("mean_axis", {{B, M, K}}, [](auto& t, const auto& v) { return t.mean(v[0], 1); }, seed + 17));
  out.push_back(check_op("sum_all", {{B, K}}, [](auto& t, const auto& v) { return t.sum_all(v[0]); }, seed + 18));
  out.push_back(check_op("mean_all", {{B, K}}, [](auto& t, const auto& v) { return t.mean_all(v[0]); }, seed + 19));
  {
    std::mt19937_64 yr(seed + 20);
    const auto y = random_values(static_cast<std::size_t>(B), yr, -2, 2);
    out.push_back(check_op("gaussian_nll", {{B}, {B}},
                           [y](auto& t, const auto& v) { return t.gaussian_nll(v[0], v[1], y, 1e-6); }, seed + 21));
  }
  // a small composite: attention-like chain
  out.push_back(check_op("composite", {{B, M, K}, {K, K}},
                         [](auto& t, const auto& v) {
                           const Var q = t.matmul(v[0], v[1]);
                           const Var s = t.masked_softmax(t.matmul(q, v[0], true));
                           return t.gelu(t.layer_norm(t.matmul(s, v[0])));
                         },
                         seed + 22));
  return out;
}

}  // namespace refage::testing
