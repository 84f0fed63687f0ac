#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfn {

/// Raised for invalid model/op configuration (channel mismatch, bad kernel, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when tensor shapes are incompatible with an op.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for API misuse (backward on a non-scalar, optimizer without grads, ...).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// NCHW shape. Every tensor in the engine is rank 4.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  constexpr Eigen::Index size() const { return Eigen::Index(n) * c * h * w; }
  constexpr Eigen::Index plane() const { return Eigen::Index(h) * w; }
  constexpr Eigen::Index offset(int in, int ic, int ih, int iw) const {
    return ((Eigen::Index(in) * c + ic) * h + ih) * w + iw;
  }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;
  std::string str() const;
};

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
class Tensor;

namespace detail {

template <typename Scalar>
struct Node {
  Shape shape;
  Array<Scalar> value;
  Array<Scalar> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  Array<Scalar>& grad_buffer() {
    if (grad.size() != value.size()) grad = Array<Scalar>::Zero(value.size());
    return grad;
  }
};

}  // namespace detail

/// True unless a NoGradGuard is alive on this thread.
bool grad_enabled();

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense NCHW tensor and a node in the reverse-mode graph.
///
/// Tensor is a cheap handle: copies share the same node. Ops create new
/// nodes whose backward closures route gradients to their parents.
template <typename Scalar>
class Tensor {
 public:
  using Node = detail::Node<Scalar>;
  using scalar_type = Scalar;

  Tensor();
  explicit Tensor(Shape shape, Scalar fill = Scalar(0));
  Tensor(Shape shape, Array<Scalar> values);
  Tensor(Shape shape, std::initializer_list<Scalar> values);

  static Tensor zeros(Shape shape) { return Tensor(shape, Scalar(0)); }
  static Tensor full(Shape shape, Scalar v) { return Tensor(shape, v); }

  const Shape& shape() const { return node_->shape; }
  Eigen::Index size() const { return node_->value.size(); }
  const Array<Scalar>& value() const { return node_->value; }
  /// Direct write access; only meaningful on leaves (parameters, inputs).
  Array<Scalar>& mutable_value() { return node_->value; }

  Scalar operator()(int n, int c, int h, int w) const {
    return node_->value[shape().offset(n, c, h, w)];
  }
  Scalar item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);

  bool has_grad() const { return node_->grad.size() == node_->value.size() && size() > 0; }
  const Array<Scalar>& grad() const { return node_->grad; }
  Array<Scalar>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  /// Reverse pass from a scalar. Leaf grads accumulate across calls.
  void backward() const;

  /// Same values, no graph connection.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

  /// Builds an op result. Graph edges are recorded only when grad mode is on
  /// and at least one parent requires grad.
  static Tensor make_result(Shape shape, Array<Scalar> values,
                            const std::vector<Tensor>& parents,
                            std::function<void(Node&)> backward);

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

/// Trainable tensor with Adam moment state.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> tensor;
  Array<Scalar> adam_m;
  Array<Scalar> adam_v;
  std::int64_t step_count = 0;

  Parameter() = default;
  Parameter(std::string param_name, Tensor<Scalar> t)
      : name(std::move(param_name)), tensor(std::move(t)) {
    tensor.set_requires_grad(true);
    adam_m = Array<Scalar>::Zero(tensor.size());
    adam_v = Array<Scalar>::Zero(tensor.size());
  }
};

/// Accumulates `delta` into `node`'s gradient when the node wants one.
template <typename Scalar, typename Derived>
inline void accumulate_grad(detail::Node<Scalar>& node, const Eigen::ArrayBase<Derived>& delta) {
  if (!node.requires_grad) return;
  node.grad_buffer() += delta;
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace pfn
