#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace refage::num {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Additive mask value standing in for -inf. Entries at or below half of it
/// are treated as masked and receive exactly zero probability.
inline constexpr double kMaskedLogit = -1e9;

/// Global NaN/Inf trapping. Initialized from the CHECKED_NUMERICS environment
/// variable; can be toggled programmatically.
bool checked_numerics();
void set_checked_numerics(bool on);

/// Handle to a value recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over dense row-major tensors of scalar type T.
///
/// Every op appends a node holding its output and a closure that pushes the
/// output gradient to its inputs. backward() runs the closures in exact
/// reverse recording order, which is a reverse topological order. A tape is
/// single-threaded and may be backpropagated once.
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves.
  Var constant(Shape shape, std::vector<T> data);
  Var parameter(Shape shape, std::vector<T> data);

  // Ops. Shapes follow row-major conventions; "trailing broadcast" means the
  // second operand's shape equals the last dims of the first.
  /// a[..., M, K] x b[K, N] (shared weight) or a[B, M, K] x b[B, K, N].
  /// With transpose_b, b is read as [.., N, K].
  Var matmul(Var a, Var b, bool transpose_b = false);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var affine(Var x, T scale, T shift);
  /// Softmax over the last dim after adding `mask` ([Lq, Lk], broadcast over
  /// leading dims). An empty mask means no masking. Fully masked rows throw.
  Var masked_softmax(Var x, std::span<const T> mask = {});
  /// Normalizes the last dim to zero mean and unit variance (no affine).
  Var layer_norm(Var x, T eps = T(1e-5));
  Var gelu(Var x);
  Var sigmoid(Var x);
  Var exp(Var x);
  Var concat(std::span<const Var> parts, int axis);
  Var slice(Var x, int axis, int begin, int end);
  Var reshape(Var x, Shape shape);
  /// Mean over `axis`, which is removed from the shape.
  Var mean(Var x, int axis);
  Var sum_all(Var x);
  Var mean_all(Var x);
  /// Batch-mean Gaussian NLL (y-mu)^2/(2 s2) + log(s2)/2 with
  /// s2 = max(exp(logvar), var_floor); mu, logvar are [B], y has B entries.
  Var gaussian_nll(Var mu, Var logvar, std::span<const T> y, T var_floor);

  void backward(Var loss);

  const Shape& shape(Var v) const { return node(v).shape; }
  std::span<const T> value(Var v) const { return node(v).value; }
  /// Gradient of the loss w.r.t. v; zeros when v received none.
  std::span<const T> grad(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::function<void()> backprop;
  };

  const Node& node(Var v) const;
  Node& node(Var v);
  std::vector<T>& grad_buffer(int id);
  Var push(Shape shape, std::vector<T> value, bool requires_grad, std::function<void()> backprop = {});
  void check_finite(const std::vector<T>& v, const char* op) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace refage::num
