#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "patseg/errors.hpp"

namespace patseg {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Thread-local switch for gradient tape recording. Ops consult it before
// attaching backward closures, so inference paths build no graph at all.
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  explicit NoGradGuard(bool disable = true) : prev_(GradMode::enabled()) {
    if (disable) GradMode::enabled() = false;
  }
  ~NoGradGuard() { GradMode::enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until the backward pass touches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

// Dense N-dimensional tensor with reverse-mode autodiff. A Tensor is a cheap
// handle (shared_ptr) onto a graph node; ops are free functions that produce
// new nodes and, while GradMode is enabled, record backward closures.
//
// Activations use the N x C x H x W axis order throughout.
template <typename T>
class TensorT {
 public:
  using Scalar = T;

  TensorT() = default;

  static TensorT zeros(const Shape& shape) { return full(shape, T(0)); }

  static TensorT full(const Shape& shape, T fill) {
    TensorT t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = shape;
    t.node_->value.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    return t;
  }

  static TensorT from_data(const Shape& shape, std::vector<T> data) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
      throw DimensionError("tensor data size " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    TensorT t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = shape;
    t.node_->value = std::move(data);
    return t;
  }

  // A learnable leaf: participates in the tape and receives gradients.
  static TensorT param(const Shape& shape, std::vector<T> data) {
    TensorT t = from_data(shape, std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int axis) const { return node_->shape.at(static_cast<std::size_t>(axis)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<T>& grad() const { return node_->grad; }
  std::vector<T>& grad() { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
  void drop_grad() { node_->grad.clear(); }

  // Same values, no history: the result is a leaf that does not require grad.
  TensorT detach() const {
    TensorT t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    return t;
  }

  // Element accessors for 4-D activations.
  T& at(int n, int c, int h, int w) {
    const Shape& s = node_->shape;
    return node_->value[((static_cast<std::size_t>(n) * s[1] + c) * s[2] + h) * s[3] + w];
  }
  T at(int n, int c, int h, int w) const {
    const Shape& s = node_->shape;
    return node_->value[((static_cast<std::size_t>(n) * s[1] + c) * s[2] + h) * s[3] + w];
  }

  // Reverse-mode sweep from this node. The seed is the gradient of the
  // objective w.r.t. this tensor; scalar tensors default to 1.
  void backward() {
    if (numel() != 1) {
      throw ContractViolation("backward() without a seed requires a scalar tensor");
    }
    backward(std::vector<T>{T(1)});
  }

  void backward(const std::vector<T>& seed) {
    if (static_cast<std::int64_t>(seed.size()) != numel()) {
      throw DimensionError("backward seed size mismatch");
    }
    std::vector<TensorNode<T>*> order;
    topo_sort(node_.get(), order);
    // Intermediate grads are scratch space for this sweep; only leaves
    // accumulate across backward calls.
    for (TensorNode<T>* n : order) {
      if (n->backward_fn) n->grad.assign(n->value.size(), T(0));
    }
    node_->ensure_grad();
    for (std::size_t i = 0; i < seed.size(); ++i) node_->grad[i] += seed[i];

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode<T>* n = *it;
      if (n->backward_fn) {
        n->ensure_grad();
        n->backward_fn(*n);
      }
    }
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

  // Internal: used by ops to construct results.
  static TensorT make_result(Shape shape, std::vector<T> value,
                             std::vector<TensorT> parents,
                             std::function<void(TensorNode<T>&)> backward_fn) {
    TensorT t = from_data(std::move(shape), std::move(value));
    bool needs = false;
    if (GradMode::enabled()) {
      for (const auto& p : parents) needs = needs || p.requires_grad();
    }
    if (needs) {
      t.node_->requires_grad = true;
      t.node_->parents.reserve(parents.size());
      for (const auto& p : parents) t.node_->parents.push_back(p.node_);
      t.node_->backward_fn = std::move(backward_fn);
    }
    return t;
  }

 private:
  static void topo_sort(TensorNode<T>* root, std::vector<TensorNode<T>*>& order) {
    // Iterative DFS; graphs are deep enough during training that recursion
    // would be fragile.
    std::unordered_set<TensorNode<T>*> visited;
    struct Frame {
      TensorNode<T>* node;
      std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    visited.insert(root);
    while (!stack.empty()) {
      Frame& top = stack.back();
      if (top.next_parent < top.node->parents.size()) {
        TensorNode<T>* parent = top.node->parents[top.next_parent++].get();
        if (parent->requires_grad && !visited.count(parent)) {
          visited.insert(parent);
          stack.push_back({parent, 0});
        }
      } else {
        order.push_back(top.node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = TensorT<float>;

}  // namespace patseg
