#include "pfn/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace pfn {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename Scalar>
Tensor<Scalar>::Tensor() : Tensor(Shape{1, 1, 1, 1}) {}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Scalar fill) : node_(std::make_shared<Node>()) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ShapeError("negative dimension in shape " + shape.str());
  }
  node_->shape = shape;
  node_->value = Array<Scalar>::Constant(shape.size(), fill);
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Array<Scalar> values) : node_(std::make_shared<Node>()) {
  if (values.size() != shape.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape.str());
  }
  node_->shape = shape;
  node_->value = std::move(values);
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::initializer_list<Scalar> values)
    : Tensor(shape, Eigen::Map<const Array<Scalar>>(values.begin(), Eigen::Index(values.size()))) {}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw UsageError("item() on tensor of shape " + shape().str());
  return node_->value[0];
}

template <typename Scalar>
Tensor<Scalar>& Tensor<Scalar>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

template <typename Scalar>
void Tensor<Scalar>::zero_grad() {
  if (node_->grad.size() == node_->value.size()) node_->grad.setZero();
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(shape(), node_->value);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::make_result(Shape shape, Array<Scalar> values,
                                           const std::vector<Tensor>& parents,
                                           std::function<void(Node&)> backward) {
  Tensor out(shape, std::move(values));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(parents.size());
  for (const auto& p : parents) out.node_->parents.push_back(p.node_);
  out.node_->backward = std::move(backward);
  return out;
}

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  if (size() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " + shape().str());
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; graphs are deep enough that recursion is unwise.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are per-pass; leaf grads accumulate.
  for (Node* n : order) {
    if (!n->is_leaf()) n->grad = Array<Scalar>::Zero(n->value.size());
  }
  node_->grad_buffer()[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf() && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace pfn
