#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "msadnet/common.hpp"

namespace msad {

// ---------------------------------------------------------------------------
// Tensor: a shared handle to an n-d value buffer plus reverse-mode autodiff
// bookkeeping. Activations use batch x channel x height x width layout.
//
// Each op output doubles as its tape node: `op`, `parents` and `backward_fn`
// record how it was produced. backward() walks the tape in reverse
// topological order, touching each node exactly once; gradients accumulate
// additively across fan-out.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until a backward pass (or caller) needs it
  bool requires_grad = false;
  const char* op = nullptr;  // null for leaves
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;  // reads this->grad, adds into parents
};

template <typename T>
std::vector<T>& ensure_grad(TensorNode<T>& n) {
  if (n.grad.size() != n.values.size()) n.grad.assign(n.values.size(), T(0));
  return n.grad;
}

/// Should a backward rule spend time producing this input's gradient?
template <typename T>
bool wants_grad(const TensorNode<T>& n) {
  return n.requires_grad || n.op != nullptr;
}

}  // namespace detail

// Tracing is on by default; evaluation paths disable it to skip tape building.
inline bool& grad_mode_ref() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_ref(); }

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode_ref()) { grad_mode_ref() = false; }
  ~NoGradGuard() { grad_mode_ref() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool prev_;
};

template <typename T>
class Tensor {
public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node>()) {
    node_->shape = std::move(shape);
    node_->values.assign(shape_size(node_->shape), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<Node>()) {
    if (shape_size(shape) != data.size())
      throw ShapeError(str("tensor: ", data.size(), " values do not fill shape ",
                           shape_str(shape)));
    node_->shape = std::move(shape);
    node_->values = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape[axis]; }
  std::size_t size() const { return node_->values.size(); }

  std::vector<T>& values() { return node_->values; }
  const std::vector<T>& values() const { return node_->values; }

  T item() const {
    if (size() != 1) throw ShapeError("item: tensor is not a scalar");
    return node_->values[0];
  }

  bool has_grad() const { return node_ && node_->grad.size() == node_->values.size(); }

  /// Gradient buffer, allocated (zeroed) on first access.
  std::vector<T>& grad() { return detail::ensure_grad(*node_); }

  const std::vector<T>& grad() const {
    if (!has_grad())
      throw ValueError("grad: no gradient has been accumulated for this tensor");
    return node_->grad;
  }

  void zero_grad() {
    if (node_ && !node_->grad.empty())
      std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  void drop_grad() {
    if (node_) node_->grad.clear();
  }

  bool requires_grad() const { return node_->requires_grad; }

  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }

  /// Leaf marked trainable, or produced by a recorded operation.
  bool traced() const { return node_ && detail::wants_grad(*node_); }

  const char* producing_op() const { return node_ ? node_->op : nullptr; }

  void assert_finite(const std::string& what) const {
    if (!all_finite(node_->values))
      throw ValueError(str(what, ": tensor holds non-finite values"));
  }

  /// Deep copy of values only; the copy is an untraced leaf.
  Tensor clone_detached() const {
    Tensor out;
    out.node_ = std::make_shared<Node>();
    out.node_->shape = node_->shape;
    out.node_->values = node_->values;
    return out;
  }

  std::shared_ptr<Node>& node() { return node_; }
  const std::shared_ptr<Node>& node() const { return node_; }

private:
  std::shared_ptr<Node> node_;
};

namespace detail {

/// Attach tape info to `out` when tracing is active and any input is traced.
template <typename T, typename Fn>
void record(Tensor<T>& out, const char* op,
            std::initializer_list<Tensor<T>> inputs, Fn&& backward_fn) {
  if (!grad_enabled()) return;
  bool any = false;
  for (const auto& t : inputs) any = any || t.traced();
  if (!any) return;
  auto& node = *out.node();
  node.op = op;
  node.parents.reserve(inputs.size());
  for (const auto& t : inputs) node.parents.push_back(t.node());
  node.backward_fn = std::forward<Fn>(backward_fn);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward: reverse accumulation from a taped scalar loss.
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ShapeError("backward: loss must be a defined scalar tensor");
  using Node = detail::TensorNode<T>;
  Node* root = loss.node().get();
  if (root->op == nullptr)
    throw ValueError("backward: tensor was not produced by a taped operation");

  // Iterative post-order DFS over parents gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->op != nullptr && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  detail::ensure_grad(*root);
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    detail::ensure_grad(*n);
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace msad
