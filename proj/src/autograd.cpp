#include "mmfusion/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace mmfusion::ag {
namespace {

using NodePtr = std::shared_ptr<Node>;

Var make(Tensor value, std::vector<NodePtr> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  const bool needs = std::any_of(parents.begin(), parents.end(),
                                 [](const NodePtr& p) { return p && p->requires_grad; });
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(fn);
  }
  return Var(std::move(n));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank)
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_str(a.shape()));
}

template <class F>
Var unary(const Var& a, F f) {
  Tensor out(a.shape());
  const auto& x = a.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f.value(x[i]);
  auto pa = a.node();
  return make(std::move(out), {pa}, [pa, f](Node& self) {
    if (!pa->requires_grad) return;
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * f.derivative(pa->value[i], self.value[i]);
  });
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size()) grad = Tensor(value.shape);
  return grad;
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var variable(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

void backward(const Var& root) {
  if (root.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

Var Tape::param(const Tensor& t) {
  auto it = bound_.find(&t);
  if (it != bound_.end()) return it->second;
  Var v = grad_enabled_ ? variable(t) : constant(t);
  bound_.emplace(&t, v);
  return v;
}

const Tensor* Tape::grad_of(const Tensor& t) const {
  auto it = bound_.find(&t);
  if (it == bound_.end()) return nullptr;
  const Tensor& g = it->second.grad();
  return g.size() == t.size() ? &g : nullptr;
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  auto pa = a.node(), pb = b.node();
  return make(std::move(out), {pa, pb}, [pa, pb](Node& self) {
    for (auto* p : {pa.get(), pb.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return make(std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return make(std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v *= s;
  auto pa = a.node();
  return make(std::move(out), {pa}, [pa, s](Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v += s;
  auto pa = a.node();
  return make(std::move(out), {pa}, [pa](Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var add_bias(const Var& a, const Var& bias) {
  require_rank(bias, 1, "add_bias");
  const std::size_t m = bias.size();
  if (a.size() % m != 0 || a.shape().back() != m)
    throw std::invalid_argument("add_bias: bias " + shape_str(bias.shape()) +
                                " does not broadcast over " + shape_str(a.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.value()[i % m];
  auto pa = a.node(), pb = bias.node();
  return make(std::move(out), {pa, pb}, [pa, pb, m](Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % m] += self.grad[i];
    }
  });
}

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = ta ? a.shape()[1] : a.shape()[0];
  const std::size_t k = ta ? a.shape()[0] : a.shape()[1];
  const std::size_t kb = tb ? b.shape()[1] : b.shape()[0];
  const std::size_t n = tb ? b.shape()[0] : b.shape()[1];
  if (k != kb)
    throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  Tensor out({m, n});
  kernels::gemm(ta, tb, m, n, k, a.value().data, b.value().data, out.data);
  auto pa = a.node(), pb = b.node();
  return make(std::move(out), {pa, pb}, [pa, pb, ta, tb, m, n, k](Node& self) {
    const auto& dc = self.grad.data;
    if (pa->requires_grad) {
      auto& ga = pa->grad_buffer().data;
      if (!ta)
        kernels::gemm(false, !tb, m, k, n, dc, pb->value.data, ga, true);
      else
        kernels::gemm(tb, true, k, m, n, pb->value.data, dc, ga, true);
    }
    if (pb->requires_grad) {
      auto& gb = pb->grad_buffer().data;
      if (!tb)
        kernels::gemm(!ta, false, k, n, m, pa->value.data, dc, gb, true);
      else
        kernels::gemm(true, ta, n, k, m, dc, pa->value.data, gb, true);
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(weight, 2, "linear");
  if (x.value().rank() == 1) {
    Var r = reshape(x, {1, x.size()});
    return reshape(add_bias(matmul(r, weight, false, true), bias), {weight.shape()[0]});
  }
  return add_bias(matmul(x, weight, false, true), bias);
}

namespace {

struct ReluFn {
  double value(double x) const { return x > 0.0 || std::isnan(x) ? x : 0.0; }
  double derivative(double x, double) const { return x > 0.0 ? 1.0 : 0.0; }
};
struct EluFn {
  double alpha;
  double value(double x) const { return x > 0.0 ? x : alpha * std::expm1(x); }
  double derivative(double x, double y) const { return x > 0.0 ? 1.0 : y + alpha; }
};
struct LeakyFn {
  double slope;
  double value(double x) const { return x > 0.0 ? x : slope * x; }
  double derivative(double x, double) const { return x > 0.0 ? 1.0 : slope; }
};
struct SoftplusFn {
  double value(double x) const { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
  double derivative(double x, double) const { return 1.0 / (1.0 + std::exp(-x)); }
};

}  // namespace

Var relu(const Var& a) { return unary(a, ReluFn{}); }
Var elu(const Var& a, double alpha) { return unary(a, EluFn{alpha}); }
Var leaky_relu(const Var& a, double slope) { return unary(a, LeakyFn{slope}); }
Var softplus(const Var& a) { return unary(a, SoftplusFn{}); }

namespace {

Var softmax_impl(const Var& a, const Tensor* keep) {
  const bool vec = a.value().rank() == 1;
  if (!vec) require_rank(a, 2, "softmax");
  const std::size_t rows = vec ? 1 : a.shape()[0];
  const std::size_t cols = vec ? a.size() : a.shape()[1];
  if (keep && keep->shape != a.shape())
    throw std::invalid_argument("masked_softmax: mask " + shape_str(keep->shape) +
                                " does not match scores " + shape_str(a.shape()));
  Tensor out(a.shape());
  const auto& x = a.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    std::size_t kept = 0;
    for (std::size_t c = 0; c < cols; ++c)
      if (!keep || (*keep)[r * cols + c] != 0.0) {
        mx = std::max(mx, x[r * cols + c]);
        ++kept;
      }
    if (kept == 0) continue;  // all masked: zero row
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (keep && (*keep)[r * cols + c] == 0.0) continue;
      out[r * cols + c] = std::exp(x[r * cols + c] - mx);
      z += out[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  auto pa = a.node();
  return make(std::move(out), {pa}, [pa, rows, cols](Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += self.value[r * cols + c] * self.grad[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        g[r * cols + c] += self.value[r * cols + c] * (self.grad[r * cols + c] - dot);
    }
  });
}

}  // namespace

Var softmax(const Var& a) { return softmax_impl(a, nullptr); }
Var masked_softmax(const Var& a, const Tensor& keep) { return softmax_impl(a, &keep); }

Var slice_cols(const Var& a, std::size_t start, std::size_t len) {
  require_rank(a, 2, "slice_cols");
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  if (start + len > cols) throw std::out_of_range("slice_cols: range exceeds columns");
  Tensor out({rows, len});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < len; ++c) out[r * len + c] = a.value()[r * cols + start + c];
  auto pa = a.node();
  return make(std::move(out), {pa}, [pa, rows, cols, start, len](Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < len; ++c) g[r * cols + start + c] += self.grad[r * len + c];
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t rows = parts[0].shape().at(0);
  std::size_t total = 0;
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.shape()[0] != rows) throw std::invalid_argument("concat_cols: row counts differ");
    total += p.shape()[1];
    nodes.push_back(p.node());
  }
  Tensor out({rows, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[1];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) out[r * total + off + c] = p.value()[r * w + c];
    off += w;
  }
  return make(std::move(out), nodes, [nodes, rows, total](Node& self) {
    std::size_t off = 0;
    for (const auto& p : nodes) {
      const std::size_t w = p->value.shape[1];
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < w; ++c) g[r * w + c] += self.grad[r * total + off + c];
      }
      off += w;
    }
  });
}

Var concat(const std::vector<Var>& parts) {
  std::vector<NodePtr> nodes;
  std::vector<double> data;
  for (const auto& p : parts) {
    require_rank(p, 1, "concat");
    data.insert(data.end(), p.value().data.begin(), p.value().data.end());
    nodes.push_back(p.node());
  }
  const std::size_t n = data.size();
  return make(Tensor({n}, std::move(data)), nodes, [nodes](Node& self) {
    std::size_t off = 0;
    for (const auto& p : nodes) {
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += p->value.size();
    }
  });
}

Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: no inputs");
  const std::size_t d = rows[0].size();
  std::vector<NodePtr> nodes;
  std::vector<double> data;
  for (const auto& r : rows) {
    require_rank(r, 1, "stack_rows");
    if (r.size() != d) throw std::invalid_argument("stack_rows: vector lengths differ");
    data.insert(data.end(), r.value().data.begin(), r.value().data.end());
    nodes.push_back(r.node());
  }
  return make(Tensor({rows.size(), d}, std::move(data)), nodes, [nodes, d](Node& self) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (!nodes[i]->requires_grad) continue;
      auto& g = nodes[i]->grad_buffer();
      for (std::size_t c = 0; c < d; ++c) g[c] += self.grad[i * d + c];
    }
  });
}

Var row(const Var& a, std::size_t r) {
  require_rank(a, 2, "row");
  const std::size_t cols = a.shape()[1];
  if (r >= a.shape()[0]) throw std::out_of_range("row: index out of range");
  Tensor out({cols});
  std::copy_n(a.value().data.begin() + static_cast<std::ptrdiff_t>(r * cols), cols, out.data.begin());
  auto pa = a.node();
  return make(std::move(out), {pa}, [pa, r, cols](Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[c];
  });
}

Var tile_rows(const Var& v, std::size_t n) {
  require_rank(v, 1, "tile_rows");
  const std::size_t d = v.size();
  Tensor out({n, d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = v.value()[c];
  auto pv = v.node();
  return make(std::move(out), {pv}, [pv, n, d](Node& self) {
    auto& g = pv->grad_buffer();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) g[c] += self.grad[r * d + c];
  });
}

Var mean_rows(const Var& a) {
  require_rank(a, 2, "mean_rows");
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  Tensor out({cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += a.value()[r * cols + c];
  for (double& v : out.data) v /= static_cast<double>(rows);
  auto pa = a.node();
  return make(std::move(out), {pa}, [pa, rows, cols](Node& self) {
    auto& g = pa->grad_buffer();
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[c] * inv;
  });
}

Var reshape(const Var& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor out(std::move(shape), a.value().data);
  auto pa = a.node();
  return make(std::move(out), {pa}, [pa](Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var element(const Var& a, std::size_t i) {
  if (i >= a.size()) throw std::out_of_range("element: index out of range");
  auto pa = a.node();
  return make(Tensor({1}, {a.value()[i]}), {pa}, [pa, i](Node& self) {
    pa->grad_buffer()[i] += self.grad[0];
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  auto pa = a.node();
  return make(Tensor({1}, {s}), {pa}, [pa](Node& self) {
    auto& g = pa->grad_buffer();
    for (double& v : g.data) v += self.grad[0];
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var mse(const Var& a, const Var& b) {
  require_same_shape(a, b, "mse");
  const Var d = sub(a, b);
  return mean(mul(d, d));
}

Var bce(const Var& p, double target, double eps) {
  if (p.size() != 1) throw std::invalid_argument("bce: expected a scalar probability");
  const double raw = p.item();
  const double pc = std::clamp(raw, eps, 1.0 - eps);
  const double loss = -(target * std::log(pc) + (1.0 - target) * std::log(1.0 - pc));
  const bool inside = raw > eps && raw < 1.0 - eps;
  auto pp = p.node();
  return make(Tensor({1}, {loss}), {pp}, [pp, pc, target, inside](Node& self) {
    if (!inside) return;
    pp->grad_buffer()[0] += self.grad[0] * (-target / pc + (1.0 - target) / (1.0 - pc));
  });
}

Var outer_sum(const Var& a, const Var& b) {
  require_rank(a, 1, "outer_sum");
  require_rank(b, 1, "outer_sum");
  const std::size_t n = a.size(), m = b.size();
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = a.value()[i] + b.value()[j];
  auto pa = a.node(), pb = b.node();
  return make(std::move(out), {pa, pb}, [pa, pb, n, m](Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[i] += self.grad[i * m + j];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
    }
  });
}

Var conv3d(const Var& x, const Var& weight, const Var& bias, std::size_t stride) {
  require_rank(x, 4, "conv3d");
  require_rank(weight, 5, "conv3d");
  const auto& ws = weight.shape();
  if (ws[1] != x.shape()[0] || ws[2] != ws[3] || ws[3] != ws[4])
    throw std::invalid_argument("conv3d: weight " + shape_str(ws) + " incompatible with input " +
                                shape_str(x.shape()));
  if (bias.size() != ws[0]) throw std::invalid_argument("conv3d: bias length mismatch");
  kernels::Conv3dGeometry g;
  g.in_channels = x.shape()[0];
  g.out_channels = ws[0];
  g.depth = x.shape()[1];
  g.height = x.shape()[2];
  g.width = x.shape()[3];
  g.kernel = ws[2];
  g.stride = stride;
  g.pad = g.kernel / 2;
  Tensor out({g.out_channels, g.out_depth(), g.out_height(), g.out_width()});
  kernels::conv3d_forward(g, x.value().data, weight.value().data, bias.value().data, out.data);
  auto px = x.node(), pw = weight.node(), pb = bias.node();
  return make(std::move(out), {px, pw, pb}, [px, pw, pb, g](Node& self) {
    if (px->requires_grad)
      kernels::conv3d_backward_input(g, self.grad.data, pw->value.data, px->grad_buffer().data);
    if (pw->requires_grad || pb->requires_grad) {
      // The kernel writes both; route into scratch for whichever is constant.
      Tensor scratch_w, scratch_b;
      auto& gw = pw->requires_grad ? pw->grad_buffer() : (scratch_w = Tensor(pw->value.shape));
      auto& gb = pb->requires_grad ? pb->grad_buffer() : (scratch_b = Tensor(pb->value.shape));
      kernels::conv3d_backward_weight(g, px->value.data, self.grad.data, gw.data, gb.data);
    }
  });
}

Var global_avg_pool(const Var& x) {
  if (x.value().rank() < 2) throw std::invalid_argument("global_avg_pool: rank too small");
  const std::size_t c = x.shape()[0];
  const std::size_t vol = x.size() / c;
  Tensor out({c});
  for (std::size_t i = 0; i < c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < vol; ++j) s += x.value()[i * vol + j];
    out[i] = s / static_cast<double>(vol);
  }
  auto px = x.node();
  return make(std::move(out), {px}, [px, c, vol](Node& self) {
    auto& g = px->grad_buffer();
    const double inv = 1.0 / static_cast<double>(vol);
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j < vol; ++j) g[i * vol + j] += self.grad[i] * inv;
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  Shape spatial(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t channels = 0;
  std::vector<NodePtr> nodes;
  std::vector<double> data;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != spatial)
      throw std::invalid_argument("concat_channels: spatial shapes differ");
    channels += p.shape()[0];
    data.insert(data.end(), p.value().data.begin(), p.value().data.end());
    nodes.push_back(p.node());
  }
  Shape shape{channels};
  shape.insert(shape.end(), spatial.begin(), spatial.end());
  return make(Tensor(std::move(shape), std::move(data)), nodes, [nodes](Node& self) {
    std::size_t off = 0;
    for (const auto& p : nodes) {
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += p->value.size();
    }
  });
}

}  // namespace mmfusion::ag
