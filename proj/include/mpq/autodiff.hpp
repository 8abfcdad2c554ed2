#pragma once

// Define-by-run reverse-mode automatic differentiation.
//
// A Tape is an append-only node list; every op appends its output after its
// inputs, so node order is a topological order. Backward rules are written
// with the same differentiable ops, so a backward pass run with
// `create_graph = true` is itself recorded and can be differentiated again
// (Hessian-vector products).

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <vector>

#include "mpq/tensor.hpp"

namespace mpq::ad {

class Tape;
class Var;
class Gradients;
Gradients backward(const Var& loss, bool create_graph);

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const { return *tape_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  friend class Gradients;
  friend Gradients backward(const Var& loss, bool create_graph);
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Given the upstream gradient and the node's own output, returns one gradient
// per input in input order. An invalid Var means zero.
using BackwardFn = std::function<std::vector<Var>(const Var& grad_out, const Var& output)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf that never receives a gradient.
  Var constant(Tensor value);
  // Leaf that receives a gradient.
  Var variable(Tensor value);
  // Op node. The backward rule is dropped when no input requires a gradient
  // or recording is disabled.
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool grad_enabled() const noexcept { return grad_enabled_; }

 private:
  friend class Var;
  friend class NoGradGuard;
  friend class Gradients;
  friend Gradients backward(const Var& loss, bool create_graph);

  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  // deque keeps references to existing node values stable across appends.
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), saved_(tape.grad_enabled_) {
    tape_.grad_enabled_ = false;
  }
  ~NoGradGuard() { tape_.grad_enabled_ = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape& tape_;
  bool saved_;
};

// Result of one backward pass: gradient of the loss w.r.t. every node
// recorded before it.
class Gradients {
 public:
  // Zeros of the node's shape when the node is unreachable from the loss.
  Tensor operator[](const Var& v) const;
  // Gradient as a tape node (differentiable when create_graph was set).
  // Invalid when unreachable.
  Var var(const Var& v) const;
  bool reachable(const Var& v) const;

 private:
  friend Gradients backward(const Var& loss, bool create_graph);
  std::vector<Var> grads_;
};

// loss must hold exactly one element.
inline Gradients backward(const Var& loss) { return backward(loss, false); }

// ---------------------------------------------------------------------------
// Differentiable primitives.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);

// op(a)·op(b) for rank-2 operands.
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);

Var relu(const Var& x);
// Gradient passes only strictly inside (lo, hi).
Var clamp(const Var& x, double lo, double hi);
Var exp(const Var& x);
// sqrt with zero gradient where the input is zero.
Var sqrt(const Var& x);
// 1/x, and 0 where x is zero.
Var reciprocal(const Var& x);

Var reshape(const Var& x, Shape shape);

// Sum over all elements to a scalar, and its adjoint.
Var sum(const Var& x);
Var broadcast_scalar(const Var& s, Shape shape);

// Rank-2 row reductions: [n,c] -> [n,1], and its adjoint.
Var row_sum(const Var& x);
Var row_broadcast(const Var& x, std::size_t cols);

// Per-channel vector b[c] broadcast along axis 1 of `shape`, and its adjoint.
Var channel_broadcast(const Var& b, Shape shape);
Var channel_sum(const Var& x);
Var add_bias(const Var& x, const Var& b);

// Row-wise log-softmax / softmax of a rank-2 tensor.
Var log_softmax(const Var& logits);
Var softmax(const Var& logits);

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// x[n,cin,h,w] cross-correlated with kernel[cout,cin,kh,kw].
Var conv2d(const Var& x, const Var& kernel, Conv2dGeometry geo);
// Adjoint of conv2d w.r.t. its input.
Var conv2d_input_grad(const Var& grad_out, const Var& kernel, const Shape& input_shape,
                      Conv2dGeometry geo);
// Adjoint of conv2d w.r.t. its kernel.
Var conv2d_kernel_grad(const Var& x, const Var& grad_out, const Shape& kernel_shape,
                       Conv2dGeometry geo);

// out[i] = x[index[i]], and its adjoint (scatter-add).
using IndexMap = std::shared_ptr<const std::vector<std::size_t>>;
Var gather(const Var& x, IndexMap index, Shape out_shape);
Var scatter_add(const Var& x, IndexMap index, Shape out_shape);

// Max routes the gradient to the first maximal element of each window.
Var max_pool2d(const Var& x, std::size_t window, std::size_t stride);
Var avg_pool2d(const Var& x, std::size_t window, std::size_t stride);
Var avg_pool2d_adjoint(const Var& g, const Shape& input_shape, std::size_t window,
                       std::size_t stride);

// Node whose value is `value` and whose gradient flows unchanged to both x
// and err. Realizes q = x + err with err = stop_gradient(Q(x) - x).
Var straight_through(const Var& x, const Var& err, Tensor value);

// Mean over rows of -sum(targets * log_softmax(logits)). Target rows must be
// probability vectors.
Var softmax_crossentropy(const Var& logits, const Tensor& targets);

// Mean over rows of ||a - b||_2 with rows taken along axis 0 (a rank-1
// operand is one row).
Var euclidean_loss(const Var& a, const Var& b);

// Inference-form batch norm along axis 1 with stored statistics.
Var batchnorm_inference(const Var& x, const Tensor& gamma, const Tensor& beta,
                        const Tensor& mean, const Tensor& var, double eps = 1e-5);

// Output spatial extent of a convolution or pooling window.
std::size_t conv_out_dim(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad);

}  // namespace mpq::ad
