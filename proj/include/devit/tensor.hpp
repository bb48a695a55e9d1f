#pragma once

// Dense float64 tensors with a tape-free reverse-mode autodiff graph.
//
// A Tensor is a cheap handle onto a shared node. Operations that consume
// tensors with requires_grad() record their parents and a backward closure on
// the output node; devit::backward(root) walks that graph in reverse
// topological order. Graphs are single-owner: do not share one forward pass
// across threads.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace devit {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 5;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // lazily sized
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::span<double> ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// RAII guard that disables graph recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) {
    check_rank(shape);
    node_ = std::make_shared<detail::Node>();
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> data) {
    check_rank(shape);
    if (shape_numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }
  static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  template <class Rng>
  static Tensor uniform(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(s));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.node_->data) v = dist(rng);
    return t;
  }

  template <class Rng>
  static Tensor normal(Shape s, Rng& rng, double mean = 0.0, double stddev = 1.0) {
    Tensor t(std::move(s));
    std::normal_distribution<double> dist(mean, stddev);
    for (double& v : t.node_->data) v = dist(rng);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<double> data() { return node_->data; }
  std::span<const double> data() const { return node_->data; }
  const std::vector<double>& vec() const { return node_->data; }

  double& operator[](std::size_t i) { return node_->data[i]; }
  double operator[](std::size_t i) const { return node_->data[i]; }

  /// Row-major multi-index access.
  double& at(std::initializer_list<std::size_t> idx) { return node_->data[offset(idx)]; }
  double at(std::initializer_list<std::size_t> idx) const { return node_->data[offset(idx)]; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }

  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }

  /// Empty span until a backward pass reaches this tensor.
  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }

  Tensor grad_tensor() const {
    if (!has_grad()) return Tensor::zeros(shape());
    return Tensor(shape(), node_->grad);
  }

  void zero_grad() { node_->grad.clear(); }

  /// Same values, no history, no grad requirement.
  Tensor detach() const { return Tensor(shape(), node_->data); }
  Tensor clone() const { return detach(); }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  static void check_rank(const Shape& s) {
    if (s.size() > kMaxRank)
      throw ShapeError("rank " + std::to_string(s.size()) + " exceeds maximum of 5");
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw ShapeError("index rank mismatch for shape " + shape_str(shape()));
    std::size_t off = 0;
    std::size_t k = 0;
    for (std::size_t i : idx) {
      if (i >= node_->shape[k]) throw std::out_of_range("tensor index out of range");
      off = off * node_->shape[k] + i;
      ++k;
    }
    return off;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

inline bool needs_grad(const std::vector<Tensor>& inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor& t : inputs)
    if (t.defined() && t.requires_grad()) return true;
  return false;
}

/// Builds an op output. When `record` is true the output joins the graph.
inline Tensor make_result(Shape shape, std::vector<double> data, bool record,
                          std::vector<Tensor> parents, std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(data));
  if (record) {
    auto n = out.node();
    n->requires_grad = true;
    for (const Tensor& p : parents)
      if (p.defined()) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return out;
}

/// Gradient buffer of a parent, or an empty span when it takes no gradient.
inline std::span<double> grad_of(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  return t.node()->ensure_grad();
}

}  // namespace detail

/// Reverse-mode sweep from a scalar root; accumulates into every reachable
/// tensor that requires a gradient.
inline void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1)
    throw std::invalid_argument("backward() requires a scalar root, got shape " +
                                (root.defined() ? shape_str(root.shape()) : std::string("<undefined>")));
  if (!root.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && n->grad.size() == n->data.size()) n->backward(*n);
  }
}

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace devit
