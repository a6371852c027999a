#include "refage/numcore/tape.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <sstream>

#include "refage/core/errors.hpp"

namespace refage::num {

namespace {

std::atomic<bool>& checked_flag() {
  static std::atomic<bool> flag = [] {
    const char* env = std::getenv("CHECKED_NUMERICS");
    return env != nullptr && std::string(env) == "1";
  }();
  return flag;
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MMap = Eigen::Map<RowMat<T>>;

bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

int normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range");
  return axis;
}

std::size_t prod(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= static_cast<std::size_t>(s[i]);
  return p;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

bool checked_numerics() { return checked_flag().load(); }
void set_checked_numerics(bool on) { checked_flag().store(on); }

template <class T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw std::out_of_range("invalid Var");
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <class T>
typename Tape<T>::Node& Tape<T>::node(Var v) {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw std::out_of_range("invalid Var");
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <class T>
std::vector<T>& Tape<T>::grad_buffer(int id) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

template <class T>
std::span<const T> Tape<T>::grad(Var v) const {
  return node(v).grad;
}

template <class T>
void Tape<T>::check_finite(const std::vector<T>& v, const char* op) const {
  if (!checked_numerics()) return;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(std::string("non-finite output of ") + op + " at node " + std::to_string(nodes_.size()) +
                         ", entry " + std::to_string(i));
    }
  }
}

template <class T>
Var Tape<T>::push(Shape shape, std::vector<T> value, bool requires_grad, std::function<void()> backprop) {
  if (numel(shape) != value.size()) {
    throw ShapeError("data length " + std::to_string(value.size()) + " does not match shape " + shape_str(shape));
  }
  if (backward_done_) throw std::logic_error("cannot record onto a tape after backward()");
  nodes_.push_back(Node{std::move(shape), std::move(value), {}, requires_grad,
                        requires_grad ? std::move(backprop) : std::function<void()>{}});
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <class T>
Var Tape<T>::constant(Shape shape, std::vector<T> data) {
  check_finite(data, "constant");
  return push(std::move(shape), std::move(data), false);
}

template <class T>
Var Tape<T>::parameter(Shape shape, std::vector<T> data) {
  check_finite(data, "parameter");
  return push(std::move(shape), std::move(data), true);
}

template <class T>
Var Tape<T>::matmul(Var a, Var b, bool transpose_b) {
  const Shape sa = shape(a);
  const Shape sb = shape(b);
  if (sa.empty() || sb.size() < 2) throw ShapeError("matmul needs a rank>=1 and b rank>=2");
  const bool rg = requires_grad(a) || requires_grad(b);
  const int ia = a.id, ib = b.id;

  if (sb.size() == 2) {
    const int K = sa.back();
    const int bk = transpose_b ? sb[1] : sb[0];
    const int N = transpose_b ? sb[0] : sb[1];
    if (K != bk) throw ShapeError("matmul inner dims differ: " + shape_str(sa) + " x " + shape_str(sb));
    const auto R = static_cast<Eigen::Index>(numel(sa) / static_cast<std::size_t>(K));
    Shape out_shape = sa;
    out_shape.back() = N;
    std::vector<T> out(static_cast<std::size_t>(R) * static_cast<std::size_t>(N));
    {
      CMap<T> A(value(a).data(), R, K);
      MMap<T> C(out.data(), R, N);
      if (transpose_b) {
        CMap<T> B(value(b).data(), N, K);
        C.noalias() = A * B.transpose();
      } else {
        CMap<T> B(value(b).data(), K, N);
        C.noalias() = A * B;
      }
    }
    check_finite(out, "matmul");
    const int out_id = static_cast<int>(nodes_.size());
    return push(std::move(out_shape), std::move(out), rg, [this, ia, ib, out_id, R, K, N, transpose_b] {
      const auto& g = nodes_[static_cast<std::size_t>(out_id)].grad;
      CMap<T> G(g.data(), R, N);
      if (nodes_[static_cast<std::size_t>(ia)].requires_grad) {
        MMap<T> dA(grad_buffer(ia).data(), R, K);
        if (transpose_b) {
          dA.noalias() += G * CMap<T>(nodes_[static_cast<std::size_t>(ib)].value.data(), N, K);
        } else {
          dA.noalias() += G * CMap<T>(nodes_[static_cast<std::size_t>(ib)].value.data(), K, N).transpose();
        }
      }
      if (nodes_[static_cast<std::size_t>(ib)].requires_grad) {
        CMap<T> A(nodes_[static_cast<std::size_t>(ia)].value.data(), R, K);
        if (transpose_b) {
          MMap<T> dB(grad_buffer(ib).data(), N, K);
          dB.noalias() += G.transpose() * A;
        } else {
          MMap<T> dB(grad_buffer(ib).data(), K, N);
          dB.noalias() += A.transpose() * G;
        }
      }
    });
  }

  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0]) {
    throw ShapeError("batched matmul needs [B,M,K] x [B,K,N]: " + shape_str(sa) + " x " + shape_str(sb));
  }
  const int Bt = sa[0], M = sa[1], K = sa[2];
  const int bk = transpose_b ? sb[2] : sb[1];
  const int N = transpose_b ? sb[1] : sb[2];
  if (K != bk) throw ShapeError("matmul inner dims differ: " + shape_str(sa) + " x " + shape_str(sb));
  std::vector<T> out(static_cast<std::size_t>(Bt) * M * N);
  const std::size_t sa_step = static_cast<std::size_t>(M) * K, sb_step = static_cast<std::size_t>(K) * N,
                    sc_step = static_cast<std::size_t>(M) * N;
  for (int i = 0; i < Bt; ++i) {
    CMap<T> A(value(a).data() + i * sa_step, M, K);
    MMap<T> C(out.data() + i * sc_step, M, N);
    if (transpose_b) {
      C.noalias() = A * CMap<T>(value(b).data() + i * sb_step, N, K).transpose();
    } else {
      C.noalias() = A * CMap<T>(value(b).data() + i * sb_step, K, N);
    }
  }
  check_finite(out, "matmul");
  const int out_id = static_cast<int>(nodes_.size());
  return push({Bt, M, N}, std::move(out), rg,
              [this, ia, ib, out_id, Bt, M, K, N, transpose_b, sa_step, sb_step, sc_step] {
                const auto& g = nodes_[static_cast<std::size_t>(out_id)].grad;
                const bool ga = nodes_[static_cast<std::size_t>(ia)].requires_grad;
                const bool gb = nodes_[static_cast<std::size_t>(ib)].requires_grad;
                for (int i = 0; i < Bt; ++i) {
                  CMap<T> G(g.data() + i * sc_step, M, N);
                  const T* av = nodes_[static_cast<std::size_t>(ia)].value.data() + i * sa_step;
                  const T* bv = nodes_[static_cast<std::size_t>(ib)].value.data() + i * sb_step;
                  if (ga) {
                    MMap<T> dA(grad_buffer(ia).data() + i * sa_step, M, K);
                    if (transpose_b) {
                      dA.noalias() += G * CMap<T>(bv, N, K);
                    } else {
                      dA.noalias() += G * CMap<T>(bv, K, N).transpose();
                    }
                  }
                  if (gb) {
                    CMap<T> A(av, M, K);
                    if (transpose_b) {
                      MMap<T> dB(grad_buffer(ib).data() + i * sb_step, N, K);
                      dB.noalias() += G.transpose() * A;
                    } else {
                      MMap<T> dB(grad_buffer(ib).data() + i * sb_step, K, N);
                      dB.noalias() += A.transpose() * G;
                    }
                  }
                }
              });
}

template <class T>
Var Tape<T>::add(Var a, Var b) {
  const Shape sa = shape(a), sb = shape(b);
  if (!is_suffix(sa, sb)) throw ShapeError("add: " + shape_str(sb) + " does not broadcast onto " + shape_str(sa));
  const std::size_t inner = numel(sb), total = numel(sa);
  std::vector<T> out(value(a).begin(), value(a).end());
  const auto bv = value(b);
  for (std::size_t i = 0; i < total; ++i) out[i] += bv[i % inner];
  check_finite(out, "add");
  const int ia = a.id, ib = b.id, out_id = static_cast<int>(nodes_.size());
  return push(sa, std::move(out), requires_grad(a) || requires_grad(b), [this, ia, ib, out_id, inner, total] {
    const auto& g = nodes_[static_cast<std::size_t>(out_id)].grad;
    if (nodes_[static_cast<std::size_t>(ia)].requires_grad) {
      auto& da = grad_buffer(ia);
      for (std::size_t i = 0; i < total; ++i) da[i] += g[i];
    }
    if (nodes_[static_cast<std::size_t>(ib)].requires_grad) {
      auto& db = grad_buffer(ib);
      for (std::size_t i = 0; i < total; ++i) db[i % inner] += g[i];
    }
  });
}

template <class T>
Var Tape<T>::sub(Var a, Var b) {
  const Shape sa = shape(a), sb = shape(b);
  if (!is_suffix(sa, sb)) throw ShapeError("sub: " + shape_str(sb) + " does not broadcast onto " + shape_str(sa));
  const std::size_t inner = numel(sb), total = numel(sa);
  std::vector<T> out(value(a).begin(), value(a).end());
  const auto bv = value(b);
  for (std::size_t i = 0; i < total; ++i) out[i] -= bv[i % inner];
  check_finite(out, "sub");
  const int ia = a.id, ib = b.id, out_id = static_cast<int>(nodes_.size());
  return push(sa, std::move(out), requires_grad(a) || requires_grad(b), [this, ia, ib, out_id, inner, total] {
    const auto& g = nodes_[static_cast<std::size_t>(out_id)].grad;
    if (nodes_[static_cast<std::size_t>(ia)].requires_grad) {
      auto& da = grad_buffer(ia);
      for (std::size_t i = 0; i < total; ++i) da[i] += g[i];
    }
    if (nodes_[static_cast<std::size_t>(ib)].requires_grad) {
      auto& db = grad_buffer(ib);
      for (std::size_t i = 0; i < total; ++i) db[i % inner] -= g[i];
    }
  });
}

template <class T>
Var Tape<T>::mul(Var a, Var b) {
  const Shape sa = shape(a), sb = shape(b);
  if (!is_suffix(sa, sb)) throw ShapeError("mul: " + shape_str(sb) + " does not broadcast onto " + shape_str(sa));
  const std::size_t inner = numel(sb), total = numel(sa);
  std::vector<T> out(total);
  const auto av = value(a), bv = value(b);
  for (std::size_t i = 0; i < total; ++i) out[i] = av[i] * bv[i % inner];
  check_finite(out, "mul");
  const int ia = a.id, ib = b.id, out_id = static_cast<int>(nodes_.size());
  return push(sa, std::move(out), requires_grad(a) || requires_grad(b), [this, ia, ib, out_id, inner, total] {
    const auto& g = nodes_[static_cast<std::size_t>(out_id)].grad;
    const auto& av = nodes_[static_cast<std::size_t>(ia)].value;
    const auto& bv = nodes_[static_cast<std::size_t>(ib)].value;
    if (nodes_[static_cast<std::size_t>(ia)].requires_grad) {
      auto& da = grad_buffer(ia);
      for (std::size_t i = 0; i < total; ++i) da[i] += g[i] * bv[i % inner];
    }
    if (nodes_[static_cast<std::size_t>(ib)].requires_grad) {
      auto& db = grad_buffer(ib);
      for (std::size_t i = 0; i < total; ++i) db[i % inner] += g[i] * av[i];
    }
  });
}

template <class T>
Var Tape<T>::affine(Var x, T scale, T shift) {
  std::vector<T> out(value(x).begin(), value(x).end());
  for (T& v : out) v = scale * v + shift;
  check_finite(out, "affine");
  const int ix = x.id, out_id = static_cast<int>(nodes_.size());
  return push(shape(x), std::move(out), requires_grad(x), [this, ix, out_id, scale] {
    const auto& g = nodes_[static_cast<std::size_t>(out_id)].grad;
    auto& dx = grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += scale * g[i];
  });
}

template <class T>
Var Tape<T>::masked_softmax(Var x, std::span<const T> mask) {
  const Shape sx = shape(x);
  if (sx.empty()) throw ShapeError("softmax of a rank-0 tensor");
  const std::size_t lk = static_cast<std::size_t>(sx.back());
  const std::size_t lq = sx.size() >= 2 ? static_cast<std::size_t>(sx[sx.size() - 2]) : 1;
  if (!mask.empty() && mask.size() != lq * lk) {
    throw ShapeError("softmax mask has " + std::to_string(mask.size()) + " entries, expected " +
                     std::to_string(lq * lk));
  }
  const T masked_threshold = static_cast<T>(kMaskedLogit / 2);
  const std::size_t rows = numel(sx) / lk;
  const auto xv = value(x);
  std::vector<T> out(xv.size(), T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* m = mask.empty() ? nullptr : mask.data() + (r % lq) * lk;
    const T* in = xv.data() + r * lk;
    T* o = out.data() + r * lk;
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < lk; ++j) {
      if (m && m[j] <= masked_threshold) continue;
      any = true;
      mx = std::max(mx, in[j] + (m ? m[j] : T(0)));
    }
    if (!any) throw std::invalid_argument("softmax row " + std::to_string(r) + " is fully masked");
    T sum = 0;
    for (std::size_t j = 0; j < lk; ++j) {
      if (m && m[j] <= masked_threshold) continue;
      o[j] = std::exp(in[j] + (m ? m[j] : T(0)) - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < lk; ++j) o[j] /= sum;
  }
  check_finite(out, "masked_softmax");
  const int ix = x.id, out_id = static_cast<int>(nodes_.size());
  return push(sx, std::move(out), requires_grad(x), [this, ix, out_id, rows, lk] {
    const auto& g = nodes_[static_cast<std::size_t>(out_id)].grad;
    const auto& p = nodes_[static_cast<std::size_t>(out_id)].value;
    auto& dx = grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < lk; ++j) dot += g[r * lk + j] * p[r * lk + j];
      for (std::size_t j = 0; j < lk; ++j) dx[r * lk + j] += p[r * lk + j] * (g[r * lk + j] - dot);
    }
  });
}

template <class T>
Var Tape<T>::layer_norm(Var x, T eps) {
  const Shape sx = shape(x);
  if (sx.empty()) throw ShapeError("layer_norm of a rank-0 tensor");
  const std::size_t d = static_cast<std::size_t>(sx.back());
  const std::size_t rows = numel(sx) / d;
  const auto xv = value(x);
  std::vector<T> out(xv.size());
  std::vector<T> inv_sd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<T>(d);
    inv_sd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (in[j] - mean) * inv_sd[r];
  }
  check_finite(out, "layer_norm");
  const int ix = x.id, out_id = static_cast<int>(nodes_.size());
  return push(sx, std::move(out), requires_grad(x), [this, ix, out_id, rows, d, inv_sd = std::move(inv_sd)] {
    const auto& g = nodes_[static_cast<std::size_t>(out_id)].grad;
    const auto& xh = nodes_[static_cast<std::size_t>(out_id)].value;
    auto& dx = grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      T mg = 0, mgx = 0;
      for (std::size_t j = 0; j < d; ++j) {
        mg += g[r * d + j];
        mgx += g[r * d + j] * xh[r * d + j];
      }
      mg /= static_cast<T>(d);
      mgx /= static_cast<T>(d);
      for (std::size_t j = 0; j < d; ++j) {
        dx[r * d + j] += inv_sd[r] * (g[r * d + j] - mg - xh[r * d + j] * mgx);
      }
    }
  });
}

template <class T>
Var Tape<T>::gelu(Var x) {
  const auto xv = value(x);
  std::vector<T> out(xv.size());
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  check_finite(out, "gelu");
  const int ix = x.id, out_id = static_cast<int>(nodes_.size());
  return push(shape(x), std::move(out), requires_grad(x), [this, ix, out_id, inv_sqrt2] {
    const auto& g = nodes_[static_cast<std::size_t>(out_id)].grad;
    const auto& xv = nodes_[static_cast<std::size_t>(ix)].value;
    auto& dx = grad_buffer(ix);
    const T inv_sqrt2pi = static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(xv[i] * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * xv[i] * xv[i]);
      dx[i] += g[i] * (cdf + xv[i] * pdf);
    }
  });
}

template <class T>
Var Tape<T>::sigmoid(Var x) {
  const auto xv = value(x);
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T v = xv[i];
    out[i] = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  check_finite(out, "sigmoid");
  const int ix = x.id, out_id = static_cast<int>(nodes_.size());
  return push(shape(x), std::move(out), requires_grad(x), [this, ix, out_id] {
    const auto& g = nodes_[static_cast<std::size_t>(out_id)].grad;
    const auto& s = nodes_[static_cast<std::size_t>(out_id)].value;
    auto& dx = grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * s[i] * (T(1) - s[i]);
  });
}

template <class T>
Var Tape<T>::exp(Var x) {
  const auto xv = value(x);
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::exp(xv[i]);
  check_finite(out, "exp");
  const int ix = x.id, out_id = static_cast<int>(nodes_.size());
  return push(shape(x), std::move(out), requires_grad(x), [this, ix, out_id] {
    const auto& g = nodes_[static_cast<std::size_t>(out_id)].grad;
    const auto& e = nodes_[static_cast<std::size_t>(out_id)].value;
    auto& dx = grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * e[i];
  });
}

template <class T>
Var Tape<T>::concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape first = shape(parts[0]);
  axis = normalize_axis(axis, first.size());
  const auto ax = static_cast<std::size_t>(axis);
  const std::size_t outer = prod(first, 0, ax);
  const std::size_t inner = prod(first, ax + 1, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<int> ids;
  std::vector<std::size_t> extents;
  bool rg = false;
  for (Var p : parts) {
    const Shape& s = shape(p);
    if (s.size() != first.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != first[i]) throw ShapeError("concat: " + shape_str(s) + " vs " + shape_str(first));
    }
    out_shape[ax] += s[ax];
    ids.push_back(p.id);
    extents.push_back(static_cast<std::size_t>(s[ax]));
    rg = rg || requires_grad(p);
  }
  const std::size_t out_axis = static_cast<std::size_t>(out_shape[ax]);
  std::vector<T> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto& v = nodes_[static_cast<std::size_t>(ids[k])].value;
    const std::size_t block = extents[k] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(o * out_axis * inner + offset * inner));
    }
    offset += extents[k];
  }
  const int out_id = static_cast<int>(nodes_.size());
  return push(std::move(out_shape), std::move(out), rg, [this, ids, extents, out_id, outer, inner, out_axis] {
    const auto& g = nodes_[static_cast<std::size_t>(out_id)].grad;
    std::size_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t block = extents[k] * inner;
      if (nodes_[static_cast<std::size_t>(ids[k])].requires_grad) {
        auto& d = grad_buffer(ids[k]);
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = g.data() + o * out_axis * inner + offset * inner;
          T* dst = d.data() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
      offset += extents[k];
    }
  });
}

template <class T>
Var Tape<T>::slice(Var x, int axis, int begin, int end) {
  const Shape sx = shape(x);
  axis = normalize_axis(axis, sx.size());
  const auto ax = static_cast<std::size_t>(axis);
  if (begin < 0 || end > sx[ax] || begin >= end) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " +
                     shape_str(sx));
  }
  const std::size_t outer = prod(sx, 0, ax);
  const std::size_t inner = prod(sx, ax + 1, sx.size());
  const std::size_t in_axis = static_cast<std::size_t>(sx[ax]);
  const std::size_t len = static_cast<std::size_t>(end - begin);
  Shape out_shape = sx;
  out_shape[ax] = end - begin;
  std::vector<T> out(numel(out_shape));
  const auto xv = value(x);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * in_axis + static_cast<std::size_t>(begin)) * inner),
                len * inner, out.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  }
  const int ix = x.id, out_id = static_cast<int>(nodes_.size());
  return push(std::move(out_shape), std::move(out), requires_grad(x),
              [this, ix, out_id, outer, inner, in_axis, len, begin] {
                const auto& g = nodes_[static_cast<std::size_t>(out_id)].grad;
                auto& dx = grad_buffer(ix);
                for (std::size_t o = 0; o < outer; ++o) {
                  const T* src = g.data() + o * len * inner;
                  T* dst = dx.data() + (o * in_axis + static_cast<std::size_t>(begin)) * inner;
                  for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                }
              });
}

template <class T>
Var Tape<T>::reshape(Var x, Shape new_shape) {
  if (numel(new_shape) != numel(shape(x))) {
    throw ShapeError("reshape " + shape_str(shape(x)) + " -> " + shape_str(new_shape));
  }
  std::vector<T> out(value(x).begin(), value(x).end());
  const int ix = x.id, out_id = static_cast<int>(nodes_.size());
  return push(std::move(new_shape), std::move(out), requires_grad(x), [this, ix, out_id] {
    const auto& g = nodes_[static_cast<std::size_t>(out_id)].grad;
    auto& dx = grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

template <class T>
Var Tape<T>::mean(Var x, int axis) {
  const Shape sx = shape(x);
  axis = normalize_axis(axis, sx.size());
  const auto ax = static_cast<std::size_t>(axis);
  const std::size_t outer = prod(sx, 0, ax);
  const std::size_t inner = prod(sx, ax + 1, sx.size());
  const std::size_t n = static_cast<std::size_t>(sx[ax]);
  if (n == 0) throw ShapeError("mean over an empty axis");
  Shape out_shape = sx;
  out_shape.erase(out_shape.begin() + axis);
  std::vector<T> out(outer * inner, T(0));
  const auto xv = value(x);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * n + k) * inner + i];
    }
  }
  for (T& v : out) v /= static_cast<T>(n);
  const int ix = x.id, out_id = static_cast<int>(nodes_.size());
  return push(std::move(out_shape), std::move(out), requires_grad(x), [this, ix, out_id, outer, inner, n] {
    const auto& g = nodes_[static_cast<std::size_t>(out_id)].grad;
    auto& dx = grad_buffer(ix);
    const T scale = T(1) / static_cast<T>(n);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < inner; ++i) dx[(o * n + k) * inner + i] += g[o * inner + i] * scale;
      }
    }
  });
}

template <class T>
Var Tape<T>::sum_all(Var x) {
  T s = 0;
  for (T v : value(x)) s += v;
  const int ix = x.id, out_id = static_cast<int>(nodes_.size());
  return push({1}, {s}, requires_grad(x), [this, ix, out_id] {
    const T g = nodes_[static_cast<std::size_t>(out_id)].grad[0];
    auto& dx = grad_buffer(ix);
    for (T& d : dx) d += g;
  });
}

template <class T>
Var Tape<T>::mean_all(Var x) {
  const std::size_t n = value(x).size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return affine(sum_all(x), T(1) / static_cast<T>(n), T(0));
}

template <class T>
Var Tape<T>::gaussian_nll(Var mu, Var logvar, std::span<const T> y, T var_floor) {
  const auto mv = value(mu), lv = value(logvar);
  if (mv.size() != lv.size() || mv.size() != y.size() || y.empty()) {
    throw ShapeError("gaussian_nll: mu, logvar and y must have the same non-zero length");
  }
  const std::size_t n = y.size();
  std::vector<T> targets(y.begin(), y.end());
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T s2 = std::max(std::exp(lv[i]), var_floor);
    const T r = targets[i] - mv[i];
    loss += r * r / (T(2) * s2) + T(0.5) * std::log(s2);
  }
  loss /= static_cast<T>(n);
  std::vector<T> out{loss};
  check_finite(out, "gaussian_nll");
  const int im = mu.id, il = logvar.id, out_id = static_cast<int>(nodes_.size());
  return push({1}, std::move(out), requires_grad(mu) || requires_grad(logvar),
              [this, im, il, out_id, n, var_floor, targets = std::move(targets)] {
                const T g = nodes_[static_cast<std::size_t>(out_id)].grad[0] / static_cast<T>(n);
                const auto& mv = nodes_[static_cast<std::size_t>(im)].value;
                const auto& lv = nodes_[static_cast<std::size_t>(il)].value;
                const bool gm = nodes_[static_cast<std::size_t>(im)].requires_grad;
                const bool gl = nodes_[static_cast<std::size_t>(il)].requires_grad;
                for (std::size_t i = 0; i < n; ++i) {
                  const T e = std::exp(lv[i]);
                  const T s2 = std::max(e, var_floor);
                  const T r = targets[i] - mv[i];
                  if (gm) grad_buffer(im)[i] += g * (-r / s2);
                  if (gl && e > var_floor) grad_buffer(il)[i] += g * (T(0.5) - r * r / (T(2) * s2));
                }
              });
}

template <class T>
void Tape<T>::backward(Var loss) {
  if (backward_done_) throw std::logic_error("backward() already ran on this tape; record a new one");
  if (numel(shape(loss)) != 1) throw ShapeError("backward needs a scalar loss, got " + shape_str(shape(loss)));
  backward_done_ = true;
  if (!requires_grad(loss)) return;
  grad_buffer(loss.id)[0] = T(1);
  for (int i = loss.id; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (n.backprop && !n.grad.empty()) n.backprop();
  }
  for (auto& n : nodes_) {
    if (n.requires_grad && n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace refage::num
