#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a shared handle to a graph node. Operations produce a node that
// remembers its inputs only when at least one input requires a gradient, so
// inference builds no graph at all. backward() orders the reachable nodes
// topologically (a ComputationTape) and sweeps them once in reverse.
//
// Broadcasting is limited to adding a bias vector to every row of a matrix.
// Everything else goes through broadcast_rows / broadcast_cols explicitly.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "softmask/common.hpp"

namespace softmask::num {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    out << (i ? "x" : "") << shape[i];
  }
  out << ']';
  return out.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Per-thread switch: when on, every op scans its output and throws NumericError
/// naming the op on the first NaN/Inf. Off by default.
inline bool& nan_checks_enabled() {
  thread_local bool enabled = false;
  return enabled;
}

class NanCheckScope {
 public:
  explicit NanCheckScope(bool on = true) : previous_(nan_checks_enabled()) { nan_checks_enabled() = on; }
  ~NanCheckScope() { nan_checks_enabled() = previous_; }
  NanCheckScope(const NanCheckScope&) = delete;
  NanCheckScope& operator=(const NanCheckScope&) = delete;

 private:
  bool previous_;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) {
      grad.assign(value.size(), 0.0);
    }
  }
};

}  // namespace detail

class ComputationTape;

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false) {
    for (std::size_t d : shape) {
      if (d == 0) {
        throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
      }
    }
    if (shape_size(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_size(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    for (double v : values) {
      if (!std::isfinite(v)) {
        throw NumericError("tensor constructed with a non-finite value");
      }
    }
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
    if (requires_grad) {
      node_->ensure_grad();
    }
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double value) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t size() const { return node().value.size(); }
  std::size_t dim(std::size_t axis) const { return node().shape.at(axis); }
  std::size_t rows() const { return rank() == 2 ? dim(0) : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : dim(rank() - 1); }

  std::span<const double> values() const { return node().value; }
  /// Mutable access for optimizers and initializers; does not touch the graph.
  std::span<double> data() { return node().value; }

  double item() const {
    if (size() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node().value[0];
  }
  double operator()(std::size_t i) const { return node().value.at(i); }
  double operator()(std::size_t i, std::size_t j) const { return node().value.at(i * cols() + j); }

  bool requires_grad() const { return node().requires_grad; }
  bool has_grad() const { return node().grad.size() == node().value.size(); }
  std::span<const double> grad() const { return node().grad; }
  std::span<double> grad_data() {
    node().ensure_grad();
    return node().grad;
  }
  void zero_grad() {
    if (node().requires_grad) {
      node().grad.assign(node().value.size(), 0.0);
    } else {
      node().grad.clear();
    }
  }

  bool is_leaf() const { return node().inputs.empty(); }
  const char* op_name() const { return node().op; }

  /// Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), node().value); }
  /// Fresh leaf holding a copy of the values, requiring gradients.
  Tensor clone_parameter() const { return Tensor(shape(), node().value, true); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  detail::Node& node() const {
    if (!node_) {
      throw ContractError("use of an undefined tensor");
    }
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;

  friend class ComputationTape;
  friend Tensor make_result(const char*, Shape, std::vector<double>, std::span<const Tensor* const>,
                            std::function<void(detail::Node&)>);
  friend detail::Node& node_of(const Tensor&);
};

inline detail::Node& node_of(const Tensor& t) { return t.node(); }

/// Wraps a freshly computed value as an op result, attaching the backward closure
/// only when some input participates in differentiation.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::span<const Tensor* const> inputs,
                          std::function<void(detail::Node&)> backward_fn) {
  if (nan_checks_enabled()) {
    for (double v : value) {
      if (!std::isfinite(v)) {
        throw NumericError(std::string("non-finite value produced by ") + op);
      }
    }
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool any = false;
  for (const Tensor* in : inputs) {
    any = any || in->requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    for (const Tensor* in : inputs) {
      node->inputs.push_back(in->node_);
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(detail::Node&)> backward_fn) {
  return make_result(op, std::move(shape), std::move(value),
                     std::span<const Tensor* const>(inputs.begin(), inputs.size()), std::move(backward_fn));
}

/// Topologically ordered record of the nodes a scalar depends on. Every node
/// appears after all of its inputs; backward visits each node once.
class ComputationTape {
 public:
  explicit ComputationTape(const Tensor& root) {
    if (!root.defined() || !root.requires_grad()) {
      return;
    }
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node_.get(), 0);
    seen.insert(root.node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::size_t size() const { return order_.size(); }
  const std::vector<detail::Node*>& nodes() const { return order_; }

  /// Seeds the root with d(root)/d(root) = 1 and propagates in reverse order.
  /// Leaf gradients accumulate; interior gradients are reset first.
  void backward() {
    if (order_.empty()) {
      return;
    }
    for (detail::Node* node : order_) {
      if (!node->inputs.empty()) {
        node->grad.assign(node->value.size(), 0.0);
      } else {
        node->ensure_grad();
      }
    }
    detail::Node* root = order_.back();
    if (root->inputs.empty()) {
      root->grad[0] += 1.0;
      return;
    }
    root->grad[0] = 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      detail::Node* node = *it;
      if (node->backward_fn) {
        for (auto& in : node->inputs) {
          if (in->requires_grad) {
            in->ensure_grad();
          }
        }
        node->backward_fn(*node);
      }
    }
  }

 private:
  std::vector<detail::Node*> order_;
};

/// Populates grad on every requires_grad tensor reachable from the scalar loss.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() loss is not connected to any tensor requiring gradients");
  }
  ComputationTape(loss).backward();
}

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

// c[m x k] += g[m x n] * b[k x n]^T. b is transposed once so the inner loop is
// an axpy over contiguous memory, which vectorizes without reassociation.
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n,
                    std::size_t k) {
  thread_local std::vector<double> bt;
  bt.resize(n * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  }
  gemm_nn(g, bt.data(), c, m, n, k);
}

// c[k x n] += a[m x k]^T * g[m x n]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * grow[j];
      }
    }
  }
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow or cancellation.
inline double log_sigmoid_value(double x) {
  return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x)));
}

// Splits a shape around an axis: outer * extent * inner == size.
struct AxisView {
  std::size_t outer;
  std::size_t extent;
  std::size_t inner;
};

inline AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

template <typename Fn, typename Dfn>
Tensor unary(const char* op, const Tensor& x, Fn fn, Dfn dfn) {
  std::vector<double> out(x.size());
  auto in = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = fn(in[i]);
  }
  return make_result(op, x.shape(), std::move(out), {&x}, [dfn](Node& self) {
    Node& a = *self.inputs[0];
    if (!a.requires_grad) return;
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      a.grad[i] += self.grad[i] * dfn(a.value[i], self.value[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  return make_result("matmul", {m, n}, std::move(out), {&a, &b}, [m, k, n](detail::Node& self) {
    detail::Node& na = *self.inputs[0];
    detail::Node& nb = *self.inputs[1];
    if (na.requires_grad) {
      detail::gemm_nt(self.grad.data(), nb.value.data(), na.grad.data(), m, n, k);
    }
    if (nb.requires_grad) {
      detail::gemm_tn(na.value.data(), self.grad.data(), nb.grad.data(), m, k, n);
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  auto in = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  return make_result("transpose", {n, m}, std::move(out), {&a}, [m, n](detail::Node& self) {
    detail::Node& na = *self.inputs[0];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) na.grad[i * n + j] += self.grad[j * m + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

/// Same-shape addition, or a bias vector [n] added to each row of an [m x n] matrix.
inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.size());
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_result("add", a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
      for (int k = 0; k < 2; ++k) {
        detail::Node& in = *self.inputs[k];
        if (!in.requires_grad) continue;
        for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
      }
    });
  }
  if (a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1)) {
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(a.values().begin(), a.values().end());
    auto bv = b.values();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
    return make_result("add_bias", a.shape(), std::move(out), {&a, &b}, [m, n](detail::Node& self) {
      detail::Node& na = *self.inputs[0];
      detail::Node& nb = *self.inputs[1];
      if (na.requires_grad) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += self.grad[i];
      }
      if (nb.requires_grad) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) nb.grad[j] += self.grad[i * n + j];
      }
    });
  }
  throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result("sub", a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    detail::Node& na = *self.inputs[0];
    detail::Node& nb = *self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (na.requires_grad) na.grad[i] += self.grad[i];
      if (nb.requires_grad) nb.grad[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result("mul", a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    detail::Node& na = *self.inputs[0];
    detail::Node& nb = *self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (na.requires_grad) na.grad[i] += self.grad[i] * nb.value[i];
      if (nb.requires_grad) nb.grad[i] += self.grad[i] * na.value[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double factor) {
  return detail::unary(
      "scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

inline Tensor add_scalar(const Tensor& x, double offset) {
  return detail::unary(
      "add_scalar", x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      "sigmoid", x, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

/// log(sigmoid(x)), finite for every finite x.
inline Tensor log_sigmoid(const Tensor& x) {
  return detail::unary(
      "log_sigmoid", x, detail::log_sigmoid_value,
      [](double v, double) { return detail::stable_sigmoid(-v); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

/// max(0, x); the subgradient at 0 is taken as 0.
inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) {
      throw NumericError("log: non-positive input " + std::to_string(v));
    }
  }
  return detail::unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

// ---------------------------------------------------------------------------
// Normalizations along an axis
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, int axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "softmax");
  const auto view = detail::axis_view(x.shape(), ax);
  std::vector<double> out(x.size());
  auto in = x.values();
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t i = 0; i < view.inner; ++i) {
      const std::size_t base = o * view.extent * view.inner + i;
      double mx = in[base];
      for (std::size_t e = 1; e < view.extent; ++e) mx = std::max(mx, in[base + e * view.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < view.extent; ++e) {
        const double v = std::exp(in[base + e * view.inner] - mx);
        out[base + e * view.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < view.extent; ++e) out[base + e * view.inner] /= total;
    }
  }
  return make_result("softmax", x.shape(), std::move(out), {&x}, [view](detail::Node& self) {
    detail::Node& nx = *self.inputs[0];
    for (std::size_t o = 0; o < view.outer; ++o) {
      for (std::size_t i = 0; i < view.inner; ++i) {
        const std::size_t base = o * view.extent * view.inner + i;
        double dot = 0.0;
        for (std::size_t e = 0; e < view.extent; ++e) {
          const std::size_t k = base + e * view.inner;
          dot += self.grad[k] * self.value[k];
        }
        for (std::size_t e = 0; e < view.extent; ++e) {
          const std::size_t k = base + e * view.inner;
          nx.grad[k] += self.value[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

inline Tensor log_softmax(const Tensor& x, int axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "log_softmax");
  const auto view = detail::axis_view(x.shape(), ax);
  std::vector<double> out(x.size());
  auto in = x.values();
  for (std::size_t o = 0; o < view.outer; ++o) {
    for (std::size_t i = 0; i < view.inner; ++i) {
      const std::size_t base = o * view.extent * view.inner + i;
      double mx = in[base];
      for (std::size_t e = 1; e < view.extent; ++e) mx = std::max(mx, in[base + e * view.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < view.extent; ++e) total += std::exp(in[base + e * view.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t e = 0; e < view.extent; ++e) out[base + e * view.inner] = in[base + e * view.inner] - lse;
    }
  }
  return make_result("log_softmax", x.shape(), std::move(out), {&x}, [view](detail::Node& self) {
    detail::Node& nx = *self.inputs[0];
    for (std::size_t o = 0; o < view.outer; ++o) {
      for (std::size_t i = 0; i < view.inner; ++i) {
        const std::size_t base = o * view.extent * view.inner + i;
        double total = 0.0;
        for (std::size_t e = 0; e < view.extent; ++e) total += self.grad[base + e * view.inner];
        for (std::size_t e = 0; e < view.extent; ++e) {
          const std::size_t k = base + e * view.inner;
          nx.grad[k] += self.grad[k] - std::exp(self.value[k]) * total;
        }
      }
    }
  });
}

/// Per-row standardization of a matrix: (x - mean) / sqrt(var + eps).
inline Tensor normalize_rows(const Tensor& x, double eps) {
  detail::require_rank(x, 2, "normalize_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(x.size());
  std::vector<double> inv_std(m);
  auto in = x.values();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = in.data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (row[j] - mean) * inv_std[i];
  }
  return make_result("normalize_rows", x.shape(), std::move(out), {&x},
                     [m, n, inv_std = std::move(inv_std)](detail::Node& self) {
                       detail::Node& nx = *self.inputs[0];
                       const double inv_n = 1.0 / static_cast<double>(n);
                       for (std::size_t i = 0; i < m; ++i) {
                         const double* g = self.grad.data() + i * n;
                         const double* y = self.value.data() + i * n;
                         double g_mean = 0.0, gy_mean = 0.0;
                         for (std::size_t j = 0; j < n; ++j) {
                           g_mean += g[j];
                           gy_mean += g[j] * y[j];
                         }
                         g_mean *= inv_n;
                         gy_mean *= inv_n;
                         for (std::size_t j = 0; j < n; ++j) {
                           nx.grad[i * n + j] += inv_std[i] * (g[j] - g_mean - y[j] * gy_mean);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Structural
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result("reshape", std::move(shape), std::move(out), {&x}, [](detail::Node& self) {
    detail::Node& nx = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) nx.grad[i] += self.grad[i];
  });
}

/// Joins tensors along an axis; all other dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) {
    throw ContractError("concat: no inputs");
  }
  const Shape& first = parts.front().shape();
  const std::size_t ax = detail::normalize_axis(axis, first.size(), "concat");
  Shape shape = first;
  shape[ax] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size()) {
      throw ShapeError("concat: rank mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
    }
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != ax && p.dim(d) != first[d]) {
        throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
      }
    }
    shape[ax] += p.dim(ax);
  }
  const auto view = detail::axis_view(shape, ax);
  std::vector<double> out(shape_size(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.dim(ax) * view.inner;
    auto src = p.values();
    for (std::size_t o = 0; o < view.outer; ++o) {
      std::copy_n(src.data() + o * block, block, out.data() + o * view.extent * view.inner + offset * view.inner);
    }
    offset += p.dim(ax);
  }
  std::vector<const Tensor*> inputs;
  std::vector<std::size_t> extents;
  for (const Tensor& p : parts) {
    inputs.push_back(&p);
    extents.push_back(p.dim(ax));
  }
  return make_result("concat", shape, std::move(out), inputs, [view, offsets, extents](detail::Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      detail::Node& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      const std::size_t block = extents[k] * view.inner;
      for (std::size_t o = 0; o < view.outer; ++o) {
        const double* g = self.grad.data() + o * view.extent * view.inner + offsets[k] * view.inner;
        double* dst = in.grad.data() + o * block;
        for (std::size_t i = 0; i < block; ++i) dst[i] += g[i];
      }
    }
  });
}

/// Half-open range [begin, end) along an axis.
inline Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank(), "slice");
  if (begin >= end || end > x.dim(ax)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for axis " + std::to_string(ax) + " of " + shape_str(x.shape()));
  }
  const auto view = detail::axis_view(x.shape(), ax);
  Shape shape = x.shape();
  shape[ax] = end - begin;
  const std::size_t block = (end - begin) * view.inner;
  std::vector<double> out(shape_size(shape));
  auto src = x.values();
  for (std::size_t o = 0; o < view.outer; ++o) {
    std::copy_n(src.data() + o * view.extent * view.inner + begin * view.inner, block, out.data() + o * block);
  }
  return make_result("slice", std::move(shape), std::move(out), {&x}, [view, begin, block](detail::Node& self) {
    detail::Node& nx = *self.inputs[0];
    for (std::size_t o = 0; o < view.outer; ++o) {
      double* dst = nx.grad.data() + o * view.extent * view.inner + begin * view.inner;
      const double* g = self.grad.data() + o * block;
      for (std::size_t i = 0; i < block; ++i) dst[i] += g[i];
    }
  });
}

/// Rows of table[V x d] selected by ids; result is [n x d]. Embedding lookup.
inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  detail::require_rank(table, 2, "gather_rows");
  if (ids.empty()) {
    throw ShapeError("gather_rows: empty id list");
  }
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  auto src = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " out of range for table with " +
                       std::to_string(rows) + " rows");
    }
    std::copy_n(src.data() + ids[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> kept(ids.begin(), ids.end());
  return make_result("gather_rows", {ids.size(), d}, std::move(out), {&table},
                     [kept = std::move(kept), d](detail::Node& self) {
                       detail::Node& nt = *self.inputs[0];
                       for (std::size_t i = 0; i < kept.size(); ++i) {
                         double* dst = nt.grad.data() + kept[i] * d;
                         const double* g = self.grad.data() + i * d;
                         for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
                       }
                     });
}

/// out[i] = x[i, cols[i]] for a matrix x[n x c]; result is [n].
inline Tensor pick(const Tensor& x, std::span<const std::size_t> cols) {
  detail::require_rank(x, 2, "pick");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (cols.size() != n) {
    throw ShapeError("pick: " + std::to_string(cols.size()) + " indices for " + shape_str(x.shape()));
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (cols[i] >= c) {
      throw IndexError("pick: column " + std::to_string(cols[i]) + " out of range for " + shape_str(x.shape()));
    }
    out[i] = x.values()[i * c + cols[i]];
  }
  std::vector<std::size_t> kept(cols.begin(), cols.end());
  return make_result("pick", {n}, std::move(out), {&x}, [kept = std::move(kept), c](detail::Node& self) {
    detail::Node& nx = *self.inputs[0];
    for (std::size_t i = 0; i < kept.size(); ++i) nx.grad[i * c + kept[i]] += self.grad[i];
  });
}

/// Sum of all elements as a scalar.
inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result("sum", {}, {total}, {&x}, [](detail::Node& self) {
    detail::Node& nx = *self.inputs[0];
    const double g = self.grad[0];
    for (double& v : nx.grad) v += g;
  });
}

/// [n] -> [n x cols], row i filled with v[i].
inline Tensor broadcast_cols(const Tensor& v, std::size_t cols) {
  detail::require_rank(v, 1, "broadcast_cols");
  const std::size_t n = v.dim(0);
  std::vector<double> out(n * cols);
  for (std::size_t i = 0; i < n; ++i) std::fill_n(out.data() + i * cols, cols, v.values()[i]);
  return make_result("broadcast_cols", {n, cols}, std::move(out), {&v}, [n, cols](detail::Node& self) {
    detail::Node& nv = *self.inputs[0];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < cols; ++j) nv.grad[i] += self.grad[i * cols + j];
  });
}

/// [d] -> [rows x d], every row a copy of v.
inline Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
  detail::require_rank(v, 1, "broadcast_rows");
  const std::size_t d = v.dim(0);
  std::vector<double> out(rows * d);
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(v.values().data(), d, out.data() + i * d);
  return make_result("broadcast_rows", {rows, d}, std::move(out), {&v}, [rows, d](detail::Node& self) {
    detail::Node& nv = *self.inputs[0];
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < d; ++j) nv.grad[j] += self.grad[i * d + j];
  });
}

}  // namespace softmask::num
