#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "volseg/core/errors.hpp"

namespace volseg {

using Index = std::int64_t;
using Shape = std::vector<Index>;
using Triple = std::array<Index, 3>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

enum class Precision { f32, f64 };

inline std::string_view to_string(Precision p) {
  return p == Precision::f32 ? "f32" : "f64";
}

/// Per-thread tally of multiply-accumulates and auxiliary element ops
/// (normalisation, softmax, activation, interpolation) executed by the
/// primitives. Used to cross-check the analytic complexity counts.
struct OpTally {
  std::uint64_t macs = 0;
  std::uint64_t aux = 0;
};

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline OpTally*& active_tally() {
  thread_local OpTally* tally = nullptr;
  return tally;
}

inline std::string& fault_op() {
  thread_local std::string op;
  return op;
}

inline void count_macs(std::uint64_t n) {
  if (auto* t = active_tally()) t->macs += n;
}

inline void count_aux(std::uint64_t n) {
  if (auto* t = active_tally()) t->aux += n;
}

}  // namespace detail

/// Disables graph recording for its lifetime (inference, optimiser updates).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Routes primitive op counts on this thread into `tally` while alive.
class OpTallyScope {
 public:
  explicit OpTallyScope(OpTally& tally) : previous_(detail::active_tally()) {
    detail::active_tally() = &tally;
  }
  ~OpTallyScope() { detail::active_tally() = previous_; }
  OpTallyScope(const OpTallyScope&) = delete;
  OpTallyScope& operator=(const OpTallyScope&) = delete;

 private:
  OpTally* previous_;
};

/// Test hook: while alive, the backward pass of every node whose op name
/// equals `op` receives a perturbed upstream gradient.
class GradientFaultScope {
 public:
  explicit GradientFaultScope(std::string op) : previous_(detail::fault_op()) {
    detail::fault_op() = std::move(op);
  }
  ~GradientFaultScope() { detail::fault_op() = previous_; }
  GradientFaultScope(const GradientFaultScope&) = delete;
  GradientFaultScope& operator=(const GradientFaultScope&) = delete;

 private:
  std::string previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const std::vector<T>&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

/// Dense row-major tensor participating in reverse-mode differentiation.
/// Copies are shallow: they alias the same node.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(NodePtr<T> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T{0}, requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    check_extents(shape);
    auto node = std::make_shared<Node<T>>();
    node->data.assign(static_cast<std::size_t>(volseg::numel(shape)), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false) {
    check_extents(shape);
    if (volseg::numel(shape) != static_cast<Index>(values.size())) {
      throw ShapeError("tensor of shape " + to_string(shape) + " needs " +
                       std::to_string(volseg::numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const {
    return node_->shape.at(static_cast<std::size_t>(axis));
  }
  Index numel() const { return static_cast<Index>(node_->data.size()); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    if (node_->backward) {
      throw std::logic_error("requires_grad can only be changed on leaves");
    }
    node_->requires_grad = flag;
    if (!flag) node_->grad.clear();
    return *this;
  }
  bool is_leaf() const { return !node_->backward; }
  std::string_view op() const { return node_->op; }

  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + to_string(shape()));
    }
    return node_->data[0];
  }

  /// Value copy with no history.
  Tensor detach() const { return from(shape(), node_->data, false); }

  const NodePtr<T>& node() const { return node_; }

 private:
  static void check_extents(const Shape& shape) {
    for (Index e : shape) {
      if (e <= 0) throw ShapeError("non-positive extent in " + to_string(shape));
    }
  }

  NodePtr<T> node_;
};

namespace detail {

/// Builds an op result; history is kept only when grad mode is on and some
/// input requires a gradient.
template <typename T, typename Backward>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (grad_mode()) {
    for (const auto* in : inputs) needs = needs || in->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto* in : inputs) node->inputs.push_back(in->node());
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

/// Topologically ordered record of the nodes reachable from a root that
/// require gradients. Every node appears after all of its inputs.
template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<const Node<T>*> seen;
    // iterative post-order DFS; children visited in input order
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::size_t size() const { return order_.size(); }
  const std::vector<Node<T>*>& nodes() const { return order_; }

  /// Runs every recorded backward once, last node first. The root's
  /// gradient must already be seeded.
  void run() const {
    const std::string& fault = detail::fault_op();
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<T>* node = *it;
      if (!node->backward || node->grad.empty()) continue;
      if (!fault.empty() && node->op == fault) {
        std::vector<T> corrupted = node->grad;
        for (std::size_t i = 0; i < corrupted.size(); ++i) {
          corrupted[i] = corrupted[i] * T(1.05) + T(1e-3);
        }
        node->backward(corrupted);
      } else {
        node->backward(node->grad);
      }
    }
  }

 private:
  std::vector<Node<T>*> order_;
};

/// Reverse pass from a single-element root (seeded with 1).
template <typename T>
void backward(const Tensor<T>& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward() needs a scalar root, got " +
                     to_string(root.shape()));
  }
  if (!root.requires_grad()) return;
  auto tape = Tape<T>::record(root);
  root.node()->grad_buffer()[0] += T{1};
  tape.run();
}

/// Reverse pass seeded with an explicit upstream gradient.
template <typename T>
void backward(const Tensor<T>& root, std::span<const T> seed) {
  if (static_cast<Index>(seed.size()) != root.numel()) {
    throw ShapeError("seed gradient size mismatch");
  }
  if (!root.requires_grad()) return;
  auto tape = Tape<T>::record(root);
  auto& g = root.node()->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  tape.run();
}

}  // namespace volseg
