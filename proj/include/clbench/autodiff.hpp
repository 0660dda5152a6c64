#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every quantity is a rank-2 tensor (scalars are 1x1, vectors 1xn). A Tensor
// is a shared handle onto a graph node; operations build new nodes that keep
// their parents alive and register a backward rule. Rules write into
// caller-provided gradient buffers, so the same rule set serves both the
// accumulating `backward` pass and the isolated `grad_wrt` pass.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "clbench/rng.hpp"

namespace clbench {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <std::floating_point T>
struct Node;

template <std::floating_point T>
using BackwardRule =
    std::function<void(const Node<T>& self, std::span<const T> out_grad, std::span<std::vector<T>* const> parent_grads)>;

template <std::floating_point T>
struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardRule<T> backward;
  bool requires_grad = false;
  const char* op = "leaf";

  bool is_leaf() const { return parents.empty(); }
};

template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor constant(std::size_t rows, std::size_t cols, std::vector<T> values) {
    return leaf(rows, cols, std::move(values), false);
  }
  static Tensor parameter(std::size_t rows, std::size_t cols, std::vector<T> values) {
    return leaf(rows, cols, std::move(values), true);
  }
  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
    return leaf(rows, cols, std::vector<T>(rows * cols, T(0)), requires_grad);
  }
  static Tensor scalar(T v) { return constant(1, 1, {v}); }
  static Tensor row(std::vector<T> values) {
    const auto n = values.size();
    return constant(1, n, std::move(values));
  }

  bool defined() const { return node_ != nullptr; }
  std::vector<std::size_t> shape() const { return {rows(), cols()}; }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }

  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  T item() const {
    if (size() != 1) throw ShapeError(std::string("item: tensor is not scalar ") + shape_string());
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// Constant copy of the current values, cut from the graph.
  Tensor detach() const { return constant(rows(), cols(), node_->value); }

  std::string shape_string() const {
    if (!node_) return "[undefined]";
    return "[" + std::to_string(rows()) + "x" + std::to_string(cols()) + "]";
  }

 private:
  static Tensor leaf(std::size_t rows, std::size_t cols, std::vector<T> values, bool requires_grad) {
    if (rows == 0 || cols == 0) throw ShapeError("tensor dimensions must be positive");
    if (values.size() != rows * cols) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape [" + std::to_string(rows) +
                       "x" + std::to_string(cols) + "]");
    }
    auto node = std::make_shared<Node<T>>();
    node->rows = rows;
    node->cols = cols;
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad.assign(node->value.size(), T(0));
    return Tensor(std::move(node));
  }

  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <std::floating_point T>
[[noreturn]] void shape_mismatch(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

template <std::floating_point T>
void require_defined(const char* op, const Tensor<T>& a) {
  if (!a.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

template <std::floating_point T>
Tensor<T> make_result(const char* op, std::size_t rows, std::size_t cols, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> parents, BackwardRule<T> rule) {
  auto node = std::make_shared<Node<T>>();
  node->rows = rows;
  node->cols = cols;
  node->value = std::move(value);
  node->op = op;
  node->requires_grad = std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
  node->parents = std::move(parents);
  node->backward = std::move(rule);
  return Tensor<T>(std::move(node));
}

// Parents-before-children order of every node reachable from root.
template <std::floating_point T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_map<Node<T>*, bool> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  visited[root] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (!visited[parent]) {
        visited[parent] = true;
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

/// Accumulates d(root)/d(leaf) into the grad buffer of every reachable leaf
/// that requires gradients. Intermediate gradients are reset on each call;
/// leaf gradients are not, so repeated calls accumulate.
template <std::floating_point T>
void backward(const Tensor<T>& root) {
  detail::require_defined("backward", root);
  if (root.size() != 1) throw GraphError("backward: root must be scalar, got " + root.shape_string());
  auto order = detail::topological_order(root.node());
  for (Node<T>* n : order) {
    if (!n->is_leaf() && n->requires_grad) n->grad.assign(n->value.size(), T(0));
  }
  if (!root.requires_grad()) return;
  root.node()->grad[0] += T(1);
  std::vector<std::vector<T>*> buffers;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf() || !n->requires_grad) continue;
    buffers.clear();
    for (const auto& p : n->parents) buffers.push_back(p->requires_grad ? &p->grad : nullptr);
    n->backward(*n, n->grad, buffers);
  }
}

/// d(root)/d(target) computed on private buffers: no grad field in the graph
/// is read or written. `target` may be any node (leaf or intermediate,
/// trainable or not) that root depends on.
template <std::floating_point T>
Tensor<T> grad_wrt(const Tensor<T>& root, const Tensor<T>& target) {
  detail::require_defined("grad_wrt", root);
  detail::require_defined("grad_wrt", target);
  if (root.size() != 1) throw GraphError("grad_wrt: root must be scalar, got " + root.shape_string());
  auto order = detail::topological_order(root.node());
  std::unordered_map<Node<T>*, bool> reaches;
  for (Node<T>* n : order) {
    bool r = n == target.node();
    for (const auto& p : n->parents) r = r || reaches[p.get()];
    reaches[n] = r;
  }
  if (!reaches[root.node()]) throw GraphError("grad_wrt: target is not reachable from root");

  std::unordered_map<Node<T>*, std::vector<T>> grads;
  grads[root.node()].assign(1, T(1));
  std::vector<std::vector<T>*> buffers;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n == target.node() || n->is_leaf() || !reaches[n]) continue;
    auto found = grads.find(n);
    if (found == grads.end()) continue;
    buffers.clear();
    for (const auto& p : n->parents) {
      if (!reaches[p.get()]) {
        buffers.push_back(nullptr);
        continue;
      }
      auto& buf = grads[p.get()];
      if (buf.empty()) buf.assign(p->value.size(), T(0));
      buffers.push_back(&buf);
    }
    n->backward(*n, grads[n], buffers);
  }
  auto& g = grads[target.node()];
  if (g.empty()) g.assign(target.size(), T(0));
  return Tensor<T>::constant(target.rows(), target.cols(), std::move(g));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// (m x k) * (k x n)
template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) detail::shape_mismatch("matmul", a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> out(m * n, T(0));
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  return detail::make_result<T>(
      "matmul", m, n, std::move(out), {a.shared(), b.shared()},
      [m, k, n](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (auto* ga = pg[0]) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              T acc = 0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
              (*ga)[i * k + p] += acc;
            }
        }
        if (auto* gb = pg[1]) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const T aip = av[i * k + p];
              for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += aip * g[i * n + j];
            }
        }
      });
}

/// (m x k) * (n x k)^T, the layout used for weight matrices stored out x in.
template <std::floating_point T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) detail::shape_mismatch("matmul_nt", a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<T> out(m * n, T(0));
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += av[i * k + p] * bv[j * k + p];
      out[i * n + j] = acc;
    }
  return detail::make_result<T>(
      "matmul_nt", m, n, std::move(out), {a.shared(), b.shared()},
      [m, k, n](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const T gij = g[i * n + j];
            if (gij == T(0)) continue;
            if (auto* ga = pg[0])
              for (std::size_t p = 0; p < k; ++p) (*ga)[i * k + p] += gij * bv[j * k + p];
            if (auto* gb = pg[1])
              for (std::size_t p = 0; p < k; ++p) (*gb)[j * k + p] += gij * av[i * k + p];
          }
      });
}

template <std::floating_point T>
Tensor<T> transpose(const Tensor<T>& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return detail::make_result<T>("transpose", n, m, std::move(out), {a.shared()},
                                [m, n](const Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                  if (auto* ga = pg[0])
                                    for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += g[j * m + i];
                                });
}

// ---------------------------------------------------------------------------
// Element-wise binary ops (identical shapes)

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_mismatch("add", a, b);
  std::vector<T> out(a.size());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_result<T>("add", a.rows(), a.cols(), std::move(out), {a.shared(), b.shared()},
                                [](const Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                  for (auto* gp : pg)
                                    if (gp)
                                      for (std::size_t i = 0; i < g.size(); ++i) (*gp)[i] += g[i];
                                });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_mismatch("sub", a, b);
  std::vector<T> out(a.size());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_result<T>("sub", a.rows(), a.cols(), std::move(out), {a.shared(), b.shared()},
                                [](const Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                  if (auto* ga = pg[0])
                                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                                  if (auto* gb = pg[1])
                                    for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
                                });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_mismatch("mul", a, b);
  std::vector<T> out(a.size());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_result<T>("mul", a.rows(), a.cols(), std::move(out), {a.shared(), b.shared()},
                                [](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                  const auto& av = self.parents[0]->value;
                                  const auto& bv = self.parents[1]->value;
                                  if (auto* ga = pg[0])
                                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
                                  if (auto* gb = pg[1])
                                    for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
                                });
}

template <std::floating_point T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_mismatch("div", a, b);
  std::vector<T> out(a.size());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return detail::make_result<T>("div", a.rows(), a.cols(), std::move(out), {a.shared(), b.shared()},
                                [](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                  const auto& av = self.parents[0]->value;
                                  const auto& bv = self.parents[1]->value;
                                  if (auto* ga = pg[0])
                                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / bv[i];
                                  if (auto* gb = pg[1])
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      (*gb)[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                                });
}

/// a (m x n) + row (1 x n) broadcast over rows.
template <std::floating_point T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) detail::shape_mismatch("add_row", a, row);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(a.size());
  auto av = a.values();
  auto rv = row.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + rv[j];
  return detail::make_result<T>("add_row", m, n, std::move(out), {a.shared(), row.shared()},
                                [m, n](const Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                  if (auto* ga = pg[0])
                                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                                  if (auto* gr = pg[1])
                                    for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t j = 0; j < n; ++j) (*gr)[j] += g[i * n + j];
                                });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= s;
  return detail::make_result<T>("scale", a.rows(), a.cols(), std::move(out), {a.shared()},
                                [s](const Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                  if (auto* ga = pg[0])
                                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
                                });
}

// ---------------------------------------------------------------------------
// Element-wise unary ops

namespace detail {

template <std::floating_point T, class Fwd, class Deriv>
Tensor<T> unary(const char* op, const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  std::vector<T> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  return make_result<T>(op, a.rows(), a.cols(), std::move(out), {a.shared()},
                        [deriv](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                          auto* ga = pg[0];
                          if (!ga) return;
                          const auto& x = self.parents[0]->value;
                          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * deriv(x[i], self.value[i]);
                        });
}

}  // namespace detail

template <std::floating_point T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <std::floating_point T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <std::floating_point T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary<T>("tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary<T>("relu", a, [](T x) { return x > T(0) ? x : T(0); },
                          [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

/// GELU, tanh approximation.
template <std::floating_point T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  return detail::unary<T>(
      "gelu", a, [](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
      [](T x, T) {
        const T t = std::tanh(c * (x + k * x * x * x));
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
      });
}

/// max(x, floor); gradient passes only where x > floor.
template <std::floating_point T>
Tensor<T> clamp_min(const Tensor<T>& a, T floor) {
  return detail::unary<T>("clamp_min", a, [floor](T x) { return x > floor ? x : floor; },
                          [floor](T x, T) { return x > floor ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

/// Per-entry admission mask for row-wise softmax; masked entries receive
/// probability 0 (log-probability 0 by convention) and no gradient.
using RowMask = std::vector<std::uint8_t>;

namespace detail {

template <std::floating_point T>
void check_mask(const char* op, const Tensor<T>& a, const RowMask* mask) {
  if (mask && mask->size() != a.size())
    throw ShapeError(std::string(op) + ": mask has " + std::to_string(mask->size()) + " entries for " +
                     a.shape_string());
}

}  // namespace detail

/// Row-wise softmax with max subtraction, so every exp argument is <= 0.
template <std::floating_point T>
Tensor<T> softmax_rows(const Tensor<T>& a, const RowMask* mask = nullptr) {
  detail::check_mask("softmax_rows", a, mask);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(a.size(), T(0));
  auto av = a.values();
  auto admitted = [mask, n](std::size_t i, std::size_t j) { return !mask || (*mask)[i * n + j] != 0; };
  for (std::size_t i = 0; i < m; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (admitted(i, j)) mx = std::max(mx, av[i * n + j]);
    if (mx == -std::numeric_limits<T>::infinity()) continue;
    T total = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (admitted(i, j)) total += (out[i * n + j] = std::exp(av[i * n + j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= total;
  }
  return detail::make_result<T>("softmax_rows", m, n, std::move(out), {a.shared()},
                                [m, n](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                  auto* ga = pg[0];
                                  if (!ga) return;
                                  const auto& y = self.value;
                                  for (std::size_t i = 0; i < m; ++i) {
                                    T dot = 0;
                                    for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                                    for (std::size_t j = 0; j < n; ++j)
                                      (*ga)[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                                  }
                                });
}

/// Row-wise log-softmax via log-sum-exp; masked entries are excluded from the
/// normalizer and output 0.
template <std::floating_point T>
Tensor<T> log_softmax_rows(const Tensor<T>& a, const RowMask* mask = nullptr) {
  detail::check_mask("log_softmax_rows", a, mask);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(a.size(), T(0));
  auto probs = std::make_shared<std::vector<T>>(a.size(), T(0));
  auto av = a.values();
  RowMask admitted_mask = mask ? *mask : RowMask(a.size(), 1);
  for (std::size_t i = 0; i < m; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (admitted_mask[i * n + j]) mx = std::max(mx, av[i * n + j]);
    if (mx == -std::numeric_limits<T>::infinity()) continue;
    T total = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (admitted_mask[i * n + j]) total += std::exp(av[i * n + j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j)
      if (admitted_mask[i * n + j]) {
        out[i * n + j] = av[i * n + j] - lse;
        (*probs)[i * n + j] = std::exp(out[i * n + j]);
      }
  }
  return detail::make_result<T>(
      "log_softmax_rows", m, n, std::move(out), {a.shared()},
      [m, n, probs, admitted_mask = std::move(admitted_mask)](const Node<T>&, std::span<const T> g,
                                                               std::span<std::vector<T>* const> pg) {
        auto* ga = pg[0];
        if (!ga) return;
        for (std::size_t i = 0; i < m; ++i) {
          T total = 0;
          for (std::size_t j = 0; j < n; ++j)
            if (admitted_mask[i * n + j]) total += g[i * n + j];
          for (std::size_t j = 0; j < n; ++j)
            if (admitted_mask[i * n + j]) (*ga)[i * n + j] += g[i * n + j] - (*probs)[i * n + j] * total;
        }
      });
}

/// Each row scaled to unit L2 norm; rows with norm below `eps` are divided by eps.
template <std::floating_point T>
Tensor<T> normalize_rows(const Tensor<T>& a, T eps = T(1e-12)) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(a.size());
  auto norms = std::make_shared<std::vector<T>>(m);
  auto av = a.values();
  for (std::size_t i = 0; i < m; ++i) {
    T sq = 0;
    for (std::size_t j = 0; j < n; ++j) sq += av[i * n + j] * av[i * n + j];
    (*norms)[i] = std::max(std::sqrt(sq), eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] / (*norms)[i];
  }
  return detail::make_result<T>(
      "normalize_rows", m, n, std::move(out), {a.shared()},
      [m, n, norms, eps](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        auto* ga = pg[0];
        if (!ga) return;
        const auto& y = self.value;
        for (std::size_t i = 0; i < m; ++i) {
          const T norm = (*norms)[i];
          if (norm <= eps) {
            for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += g[i * n + j] / norm;
            continue;
          }
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
          for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += (g[i * n + j] - y[i * n + j] * dot) / norm;
        }
      });
}

/// Row-wise layer normalization with learned gain and bias (both 1 x n).
template <std::floating_point T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) detail::shape_mismatch("layer_norm_rows", x, gain);
  if (bias.rows() != 1 || bias.cols() != x.cols()) detail::shape_mismatch("layer_norm_rows", x, bias);
  const std::size_t m = x.rows(), n = x.cols();
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(m);
  std::vector<T> out(x.size());
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  for (std::size_t i = 0; i < m; ++i) {
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += xv[i * n + j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xv[i * n + j] - mean) * (xv[i * n + j] - mean);
    var /= T(n);
    (*inv_std)[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      (*xhat)[i * n + j] = (xv[i * n + j] - mean) * (*inv_std)[i];
      out[i * n + j] = (*xhat)[i * n + j] * gv[j] + bv[j];
    }
  }
  return detail::make_result<T>(
      "layer_norm_rows", m, n, std::move(out), {x.shared(), gain.shared(), bias.shared()},
      [m, n, xhat, inv_std](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        const auto& gv = self.parents[1]->value;
        if (auto* gx = pg[0]) {
          std::vector<T> dxhat(n);
          for (std::size_t i = 0; i < m; ++i) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < n; ++j) {
              dxhat[j] = g[i * n + j] * gv[j];
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * (*xhat)[i * n + j];
            }
            mean_d /= T(n);
            mean_dx /= T(n);
            for (std::size_t j = 0; j < n; ++j)
              (*gx)[i * n + j] += (*inv_std)[i] * (dxhat[j] - mean_d - (*xhat)[i * n + j] * mean_dx);
          }
        }
        if (auto* gg = pg[1])
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*gg)[j] += g[i * n + j] * (*xhat)[i * n + j];
        if (auto* gb = pg[2])
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
      });
}

// ---------------------------------------------------------------------------
// Stochastic

/// Inverted dropout: each entry kept with probability keep_prob and scaled by
/// 1/keep_prob. keep_prob == 1 returns the input node itself.
template <std::floating_point T>
Tensor<T> dropout(const Tensor<T>& a, double keep_prob, Rng& rng) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0))
    throw std::invalid_argument("dropout: keep probability must be in (0, 1], got " + std::to_string(keep_prob));
  if (keep_prob == 1.0) return a;
  auto mask = std::make_shared<std::vector<T>>(a.size());
  const T kept = T(1.0 / keep_prob);
  for (auto& v : *mask) v = rng.bernoulli(keep_prob) ? kept : T(0);
  std::vector<T> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * (*mask)[i];
  return detail::make_result<T>("dropout", a.rows(), a.cols(), std::move(out), {a.shared()},
                                [mask](const Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                  if (auto* ga = pg[0])
                                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (*mask)[i];
                                });
}

// ---------------------------------------------------------------------------
// Structural

template <std::floating_point T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::vector<T> out;
  for (const auto& p : parts) {
    if (p.cols() != n) detail::shape_mismatch("concat_rows", parts[0], p);
    m += p.rows();
    out.insert(out.end(), p.values().begin(), p.values().end());
    parents.push_back(p.shared());
  }
  return detail::make_result<T>("concat_rows", m, n, std::move(out), std::move(parents),
                                [](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                  std::size_t offset = 0;
                                  for (std::size_t p = 0; p < pg.size(); ++p) {
                                    const std::size_t len = self.parents[p]->value.size();
                                    if (auto* gp = pg[p])
                                      for (std::size_t i = 0; i < len; ++i) (*gp)[i] += g[offset + i];
                                    offset += len;
                                  }
                                });
}

template <std::floating_point T>
Tensor<T> concat_rows(std::initializer_list<Tensor<T>> parts) {
  return concat_rows<T>(std::span<const Tensor<T>>(parts.begin(), parts.size()));
}

template <std::floating_point T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::shared_ptr<Node<T>>> parents;
  for (const auto& p : parts) {
    if (p.rows() != m) detail::shape_mismatch("concat_cols", parts[0], p);
    n += p.cols();
    parents.push_back(p.shared());
  }
  std::vector<T> out(m * n);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    auto pv = p.values();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out[i * n + offset + j] = pv[i * p.cols() + j];
    offset += p.cols();
  }
  return detail::make_result<T>("concat_cols", m, n, std::move(out), std::move(parents),
                                [m, n](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                  std::size_t offset = 0;
                                  for (std::size_t p = 0; p < pg.size(); ++p) {
                                    const std::size_t w = self.parents[p]->cols;
                                    if (auto* gp = pg[p])
                                      for (std::size_t i = 0; i < m; ++i)
                                        for (std::size_t j = 0; j < w; ++j) (*gp)[i * w + j] += g[i * n + offset + j];
                                    offset += w;
                                  }
                                });
}

template <std::floating_point T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t start, std::size_t count) {
  if (count == 0 || start + count > a.rows())
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + a.shape_string());
  const std::size_t n = a.cols();
  auto av = a.values();
  std::vector<T> out(av.begin() + static_cast<std::ptrdiff_t>(start * n),
                     av.begin() + static_cast<std::ptrdiff_t>((start + count) * n));
  return detail::make_result<T>("slice_rows", count, n, std::move(out), {a.shared()},
                                [start, n](const Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                  if (auto* ga = pg[0])
                                    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[start * n + i] += g[i];
                                });
}

template <std::floating_point T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t count) {
  if (count == 0 || start + count > a.cols())
    throw ShapeError("slice_cols: cols [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + a.shape_string());
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * count);
  auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = av[i * n + start + j];
  return detail::make_result<T>(
      "slice_cols", m, count, std::move(out), {a.shared()},
      [m, n, start, count](const Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
        if (auto* ga = pg[0])
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < count; ++j) (*ga)[i * n + start + j] += g[i * count + j];
      });
}

/// Rows of `table` selected by `ids` (embedding lookup); backward scatter-adds.
template <std::floating_point T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> ids) {
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  const std::size_t n = table.cols();
  std::vector<T> out;
  out.reserve(ids.size() * n);
  auto tv = table.values();
  for (auto id : ids) {
    if (id >= table.rows())
      throw ShapeError("gather_rows: id " + std::to_string(id) + " out of range for " + table.shape_string());
    out.insert(out.end(), tv.begin() + static_cast<std::ptrdiff_t>(id * n),
               tv.begin() + static_cast<std::ptrdiff_t>((id + 1) * n));
  }
  return detail::make_result<T>(
      "gather_rows", ids.size(), n, std::move(out), {table.shared()},
      [n, ids = std::vector<std::size_t>(ids.begin(), ids.end())](const Node<T>&, std::span<const T> g,
                                                                   std::span<std::vector<T>* const> pg) {
        if (auto* gt = pg[0])
          for (std::size_t r = 0; r < ids.size(); ++r)
            for (std::size_t j = 0; j < n; ++j) (*gt)[ids[r] * n + j] += g[r * n + j];
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.values()) total += v;
  return detail::make_result<T>("sum", 1, 1, {total}, {a.shared()},
                                [](const Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                  if (auto* ga = pg[0])
                                    for (auto& v : *ga) v += g[0];
                                });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / T(a.size()));
}

enum class Axis { Rows = 0, Cols = 1 };

/// Axis::Rows averages over rows (result 1 x n); Axis::Cols over columns (m x 1).
template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a, Axis axis) {
  const std::size_t m = a.rows(), n = a.cols();
  auto av = a.values();
  if (axis == Axis::Rows) {
    std::vector<T> out(n, T(0));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
    for (auto& v : out) v /= T(m);
    return detail::make_result<T>("mean_rows", 1, n, std::move(out), {a.shared()},
                                  [m, n](const Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                    if (auto* ga = pg[0])
                                      for (std::size_t i = 0; i < m; ++i)
                                        for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += g[j] / T(m);
                                  });
  }
  std::vector<T> out(m, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i] += av[i * n + j];
    out[i] /= T(n);
  }
  return detail::make_result<T>("mean_cols", m, 1, std::move(out), {a.shared()},
                                [m, n](const Node<T>&, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                  if (auto* ga = pg[0])
                                    for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += g[i] / T(n);
                                });
}

/// Frobenius / L2 norm of the whole tensor. The gradient at the origin is taken as 0.
template <std::floating_point T>
Tensor<T> l2_norm(const Tensor<T>& a) {
  T sq = 0;
  for (T v : a.values()) sq += v * v;
  const T norm = std::sqrt(sq);
  return detail::make_result<T>("l2_norm", 1, 1, {norm}, {a.shared()},
                                [](const Node<T>& self, std::span<const T> g, std::span<std::vector<T>* const> pg) {
                                  auto* ga = pg[0];
                                  const T norm = self.value[0];
                                  if (!ga || norm == T(0)) return;
                                  const auto& x = self.parents[0]->value;
                                  for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += g[0] * x[i] / norm;
                                });
}

/// Cosine similarity between every row of a and every row of b (m x n result).
template <std::floating_point T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) detail::shape_mismatch("cosine_similarity", a, b);
  return matmul_nt(normalize_rows(a), normalize_rows(b));
}

/// Cosine similarity of every pair of rows of a single matrix.
template <std::floating_point T>
Tensor<T> cosine_similarity(const Tensor<T>& a) {
  auto n = normalize_rows(a);
  return matmul_nt(n, n);
}

}  // namespace clbench
