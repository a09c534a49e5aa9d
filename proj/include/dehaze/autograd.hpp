#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dehaze/tensor.hpp"

namespace dehaze {

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
  void accumulate(const Tensor<T>& g) { ensure_grad() += g; }
};

/// Handle to a node of the reverse-mode graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return Var(std::move(n));
  }
  static Var parameter(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  /// Gradient accumulated by the last backward(); zeros if none reached this node.
  const Tensor<T>& grad() const { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->grad.empty(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  Var detach() const { return constant(node_->value); }

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

  /// Reverse pass from this node. The node must hold a single element unless
  /// an explicit seed gradient is given.
  void backward() const {
    if (node_->value.size() != 1)
      throw ValidationError("backward() without seed on non-scalar of shape " + shape_str(shape()));
    backward(Tensor<T>(node_->value.shape(), T(1)));
  }

  void backward(const Tensor<T>& seed) const {
    if (!node_->requires_grad) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // iterative post-order DFS
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        Node<T>* p = n->parents[idx++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->accumulate(seed);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && n->grad.size() == n->value.size() && !n->grad.empty()) n->backward_fn(*n);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Creates an op result. `backward` runs with the output node (whose grad is
/// populated) and must push gradients into the inputs that require them.
template <typename T, typename Fn>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> inputs, Fn&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (grad_enabled()) {
    for (const auto& in : inputs)
      if (in.requires_grad()) n->requires_grad = true;
    if (n->requires_grad) {
      for (const auto& in : inputs)
        if (in.requires_grad()) n->parents.push_back(in.ptr());
      n->backward_fn = std::forward<Fn>(backward);
    }
  }
  return Var<T>(std::move(n));
}

}  // namespace dehaze
