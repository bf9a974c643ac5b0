#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "adsam/errors.hpp"

namespace adsam {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

// One vertex of the recorded computation. `backward` reads `grad` and
// accumulates into the inputs; everything it needs beyond the inputs'
// forward data is captured when the op is built.
template <typename T>
struct Node {
  std::vector<T> data;
  Shape shape;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Disables graph recording in its scope (evaluation, optimizer updates).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Dense row-major tensor handle. Copies share the underlying node, so a
// parameter tensor held by a module and by the optimizer is the same object.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    for (auto extent : shape) detail::require(extent >= 1, "tensor extents must be >= 1, got " + shape_str(shape));
    detail::require(shape_numel(shape) == data.size(),
                    "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    auto node = std::make_shared<detail::Node<T>>();
    node->data = std::move(data);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // In-place mutation is reserved for optimizer updates between forward passes.
  std::span<T> mutable_data() { return node_->data; }

  T item() const {
    detail::require(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  T at(std::initializer_list<std::size_t> index) const {
    detail::require(index.size() == rank(), "index rank mismatch");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
      detail::require(i < node_->shape[axis], "index out of range");
      flat = flat * node_->shape[axis++] + i;
    }
    return node_->data[flat];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) {
    detail::require(node_->is_leaf(), "requires_grad can only be changed on leaf tensors");
    node_->requires_grad = value;
  }
  bool is_leaf() const { return node_->is_leaf(); }
  const char* op_name() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Graph-free copy of the values.
  Tensor detach() const { return from_data(shape(), node_->data, false); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

template <typename T>
void check_finite([[maybe_unused]] const Node<T>& node) {
#ifndef NDEBUG
  for (const auto& v : node.data) {
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value produced by ") + node.op);
  }
#endif
}

// Builds an op result. The node is wired into the graph only when recording
// is on and some input needs a gradient.
template <typename T, typename Inputs, typename Backward>
Tensor<T> make_result_from(const char* op, Shape shape, std::vector<T> data, const Inputs& inputs,
                           Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  node->shape = std::move(shape);
  node->data = std::move(data);
  check_finite(*node);
  bool needs_grad = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs_grad = needs_grad || in->requires_grad();
  }
  if (needs_grad) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in->node());
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T, typename Backward>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs, Backward&& backward) {
  return make_result_from<T>(op, std::move(shape), std::move(data), inputs, std::forward<Backward>(backward));
}

template <typename T, typename Backward>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      Backward&& backward) {
  std::vector<const Tensor<T>*> pointers;
  pointers.reserve(inputs.size());
  for (const auto& in : inputs) pointers.push_back(&in);
  return make_result_from<T>(op, std::move(shape), std::move(data), pointers, std::forward<Backward>(backward));
}

// Gradient sink for input `i`, or nullptr if it does not need one.
template <typename T>
std::vector<T>* grad_sink(Node<T>& self, std::size_t i) {
  auto& in = *self.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

}  // namespace detail

// Reverse-mode sweep from a scalar. Leaf gradients accumulate (sum over
// paths and over repeated calls); intermediate gradients are released.
template <typename T>
void backward(const Tensor<T>& loss) {
  using detail::Node;
  detail::require(loss.defined() && loss.numel() == 1,
                  "backward() needs a scalar loss, got shape " + (loss.defined() ? shape_str(loss.shape()) : "null"));
  if (!std::isfinite(loss.item())) throw NumericalError("backward() on non-finite loss");
  detail::require(loss.requires_grad(), "loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS; a grey node seen again means a cycle.
  enum class Mark : unsigned char { grey, black };
  std::unordered_map<Node<T>*, Mark> marks;
  std::vector<Node<T>*> order;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  marks[loss.node().get()] = Mark::grey;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (!child->requires_grad) continue;
      auto it = marks.find(child);
      if (it == marks.end()) {
        marks[child] = Mark::grey;
        stack.emplace_back(child, 0);
      } else if (it->second == Mark::grey) {
        throw std::logic_error("cycle detected in computation graph");
      }
    } else {
      marks[node] = Mark::black;
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->is_leaf()) continue;
    if (!node->grad.empty() && node->backward) node->backward(*node);
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

}  // namespace adsam
