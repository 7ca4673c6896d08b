#pragma once

// Dense row-major tensor with tape-free reverse-mode autodiff.
//
// Every op result owns a Node holding its value, a lazily-allocated gradient
// buffer, the parent nodes that require grad, and a closure that pushes the
// node's gradient into those parents. backward() topologically orders the
// reachable subgraph and runs the closures in reverse.

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
#include <vector>

#include <Eigen/Core>

#include "tripath/error.hpp"

namespace tripath {

using Shape = std::vector<int>;

// Packet-aligned storage, so vectorized kernels see the same alignment (and
// hence the same summation order) on every run.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Thread-local switch for graph recording.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  T* grad_data() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad.data();
  }
  bool has_grad() const { return !grad.empty(); }
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value.assign(tripath::numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != tripath::numel(shape))
      throw ShapeMismatch(to_string(shape), "value count " + std::to_string(values.size()));
    Tensor t;
    t.node_ = std::make_shared<Node<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(values.begin(), values.end());
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const {
    const int r = rank();
    return node_->shape.at(static_cast<std::size_t>(i < 0 ? i + r : i));
  }
  std::size_t numel() const { return node_->value.size(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  T* ptr() { return node_->value.data(); }
  const T* ptr() const { return node_->value.data(); }

  // Empty span when no gradient has reached this tensor.
  std::span<const T> grad() const {
    if (!node_->has_grad()) return {};
    return node_->grad;
  }
  std::span<T> mutable_grad() { return {node_->grad_data(), node_->value.size()}; }

  T item() const {
    if (numel() != 1) throw ShapeError(to_string(shape()), "item() on non-scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.clear(); }

  // Copies the value into a fresh leaf with no history.
  Tensor detach() const {
    Tensor t(shape());
    t.node_->value = node_->value;
    return t;
  }

  const NodePtr& node() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  void backward() const {
    if (numel() != 1) throw ShapeError(to_string(shape()), "backward() needs a scalar or a seed");
    const T one(1);
    backward(std::span<const T>(&one, 1));
  }

  void backward(std::span<const T> seed) const {
    if (seed.size() != numel()) throw ShapeMismatch("seed", "seed size differs from tensor size");
    if (!node_->requires_grad) return;
    T* g = node_->grad_data();
    for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    }
  }

 private:
  NodePtr node_;
};

// Creates the result node for an op. The node records history only when grad
// mode is on and at least one input requires grad; `parents` lists the inputs.
template <class T>
Tensor<T> make_result(Shape shape, std::initializer_list<const Tensor<T>*> inputs) {
  Tensor<T> out(std::move(shape));
  if (!GradMode::enabled()) return out;
  auto& node = *out.node();
  for (const Tensor<T>* in : inputs) {
    if (in && in->defined() && in->requires_grad()) {
      node.requires_grad = true;
      node.parents.push_back(in->node());
    }
  }
  return out;
}

template <class T>
Tensor<T> make_result(Shape shape, const std::vector<Tensor<T>>& inputs) {
  Tensor<T> out(std::move(shape));
  if (!GradMode::enabled()) return out;
  auto& node = *out.node();
  for (const auto& in : inputs) {
    if (in.defined() && in.requires_grad()) {
      node.requires_grad = true;
      node.parents.push_back(in.node());
    }
  }
  return out;
}

template <class T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(static_cast<double>(x)); });
}

}  // namespace tripath
