#pragma once

// Minimal reverse-mode automatic differentiation over Tensor values.
//
// A forward pass builds a DAG of Nodes; backward() walks it in reverse
// topological order.  Graphs are per forward pass and never shared between
// threads, so several records can be differentiated concurrently.

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "mmfusion/kernels.hpp"
#include "mmfusion/tensor.hpp"

namespace mmfusion::ag {

struct Node {
  Tensor value;
  Tensor grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  // Zero-initialised on first use.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value.data.at(0); }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var variable(Tensor value);

// Seeds d(root)/d(root) = 1; root must hold a single element.
void backward(const Var& root);

// Binds parameter tensors to leaf variables for one forward pass, keyed by
// the address of the parameter tensor.  With gradients disabled every bound
// parameter is a constant and no backward closures are recorded.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Var param(const Tensor& t);
  bool grad_enabled() const { return grad_enabled_; }
  // Gradient accumulated for a bound parameter; nullptr if never bound or unused.
  const Tensor* grad_of(const Tensor& t) const;

 private:
  bool grad_enabled_;
  std::unordered_map<const Tensor*, Var> bound_;
};

// Elementwise, identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

// a: n x m (or rank-1 m), bias: m.
Var add_bias(const Var& a, const Var& bias);
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
// x: n x in, weight: out x in, bias: out.  Rank-1 x is treated as one row and
// a rank-1 result is returned.
Var linear(const Var& x, const Var& weight, const Var& bias);

Var relu(const Var& a);
Var elu(const Var& a, double alpha = 1.0);
Var leaky_relu(const Var& a, double slope);
Var softplus(const Var& a);

// Row-wise softmax of a matrix, or softmax of a rank-1 vector.
Var softmax(const Var& a);
// keep(i,j) == 0 drops entry (i,j) (score -inf); a row with nothing kept
// yields all-zero weights.
Var masked_softmax(const Var& a, const Tensor& keep);

Var slice_cols(const Var& a, std::size_t start, std::size_t len);
Var concat_cols(const std::vector<Var>& parts);
// Rank-1 concatenation.
Var concat(const std::vector<Var>& parts);
// Rank-1 vectors of equal length -> matrix.
Var stack_rows(const std::vector<Var>& rows);
Var row(const Var& a, std::size_t r);
Var tile_rows(const Var& v, std::size_t n);
Var mean_rows(const Var& a);
Var reshape(const Var& a, Shape shape);
Var element(const Var& a, std::size_t i);
Var sum(const Var& a);
Var mean(const Var& a);
Var mse(const Var& a, const Var& b);
// Binary cross entropy of a probability scalar; p clamped to [eps, 1-eps].
Var bce(const Var& p, double target, double eps = 1e-7);
// out(i,j) = a(i) + b(j).
Var outer_sum(const Var& a, const Var& b);

// x: C x D x H x W, weight: O x C x k x k x k, bias: O.
Var conv3d(const Var& x, const Var& weight, const Var& bias, std::size_t stride);
// C x D x H x W -> C.
Var global_avg_pool(const Var& x);
// Concatenation along the channel axis of rank-4 maps.
Var concat_channels(const std::vector<Var>& parts);

}  // namespace mmfusion::ag
