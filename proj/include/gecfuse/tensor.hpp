#pragma once

// Dense row-major tensors with reverse-mode autodiff.
//
// A Tensor is a shared handle to a graph node. Ops (ops.hpp) record a
// backward closure on their output node; backward(loss) walks the recorded
// graph in reverse topological order. The tape lives and dies with one
// forward pass; leaf gradients accumulate across backward calls until
// zero_grad().

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace gecfuse {

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

namespace detail {

template <class T>
struct Node {
  std::vector<int> shape;
  std::vector<T> val;
  std::vector<T> grad;  // empty until touched
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

  std::size_t size() const { return val.size(); }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), T(0));
  }
};

bool& grad_enabled_flag();

}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Disables graph recording in scope (frozen models, decoding).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    std::size_t total = 1;
    for (int d : shape) {
      check(d > 0, "tensor dims must be positive");
      total *= static_cast<std::size_t>(d);
    }
    n->shape = std::move(shape);
    n->val.assign(total, T(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
    Tensor t = zeros(shape, requires_grad);
    check(t.size() == data.size(), "data length does not match shape");
    t.n_->val = std::move(data);
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const { return n_->shape; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  int rows() const { return n_->shape[0]; }
  int cols() const { return ndim() >= 2 ? n_->shape[1] : 1; }
  std::size_t size() const { return n_->val.size(); }

  T* data() { return n_->val.data(); }
  const T* data() const { return n_->val.data(); }
  std::span<const T> values() const { return {n_->val.data(), n_->val.size()}; }
  std::vector<T>& vec() { return n_->val; }
  const std::vector<T>& vec() const { return n_->val; }

  T item() const {
    check(size() == 1, "item() requires a scalar tensor");
    return n_->val[0];
  }
  T& at(int i) { return n_->val[static_cast<std::size_t>(i)]; }
  T at(int i) const { return n_->val[static_cast<std::size_t>(i)]; }
  T& at(int i, int j) { return n_->val[static_cast<std::size_t>(i) * cols() + j]; }
  T at(int i, int j) const { return n_->val[static_cast<std::size_t>(i) * cols() + j]; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) {
    check(n_->leaf, "requires_grad can only be toggled on leaf tensors");
    n_->requires_grad = rg;
  }

  bool has_grad() const { return !n_->grad.empty(); }
  T* grad_data() {
    n_->ensure_grad();
    return n_->grad.data();
  }
  const std::vector<T>& grad() const {
    check(!n_->grad.empty(), "gradient not populated");
    return n_->grad;
  }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  // Deep copy of values; result is a detached leaf.
  Tensor clone() const {
    Tensor t = zeros(n_->shape, n_->requires_grad);
    t.n_->val = n_->val;
    return t;
  }

  std::shared_ptr<Node> node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

// Populates gradients of every requires_grad tensor reachable from `loss`.
template <class T>
void backward(const Tensor<T>& loss) {
  check(loss.size() == 1, "backward requires a scalar loss");
  using Node = detail::Node<T>;
  Node* root = loss.node().get();

  // reverse topological order over parent edges, iteratively
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // order is children-before-parents reversed; we want consumers first
  std::reverse(order.begin(), order.end());

  for (Node* n : order) {
    if (!n->leaf) n->grad.assign(n->val.size(), T(0));
  }
  root->ensure_grad();
  if (root->leaf) {
    root->grad[0] += T(1);
    return;
  }
  root->grad[0] = T(1);
  for (Node* n : order) {
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

}  // namespace gecfuse
