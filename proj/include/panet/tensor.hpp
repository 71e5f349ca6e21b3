#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace panet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a value that must be finite is not (loss, gradient, activation).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Graph recording is on by default; a live NoGradGuard turns it off for the
/// current thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor. Copies share storage and graph position; the
/// values of non-leaf tensors never change after construction.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  /// Computes input gradients from the output gradient. grad_in[k] is
  /// pre-sized (zero-filled) to the numel of input k and must be accumulated
  /// into, not assigned.
  using BackwardFn = std::function<void(std::span<const T> grad_out,
                                        std::vector<std::vector<T>>& grad_in)>;

  struct Node {
    std::uint64_t id = 0;
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn backward;
  };

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value);

  /// Records an operation result. When grad mode is on and any input requires
  /// a gradient, the result keeps its inputs and derivative rule.
  static Tensor from_op(Shape shape, std::vector<T> data,
                        const std::vector<Tensor>& inputs, BackwardFn backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  std::span<const T> data() const;
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  bool is_leaf() const;
  std::uint64_t id() const;

  /// Leaves only: the optimizer and gradcheck mutate parameter values in place.
  std::span<T> mutable_data();

  /// Same values, no graph history, no gradient requirement.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

/// Gradients keyed by tensor id, one entry per requires_grad leaf reached.
template <typename T>
class Gradients {
 public:
  void insert(std::uint64_t id, Tensor<T> grad) { grads_.insert_or_assign(id, std::move(grad)); }
  bool contains(const Tensor<T>& param) const { return grads_.contains(param.id()); }
  /// Gradient for `param`; zeros of the parameter's shape when unreached.
  Tensor<T> of(const Tensor<T>& param) const;
  std::size_t size() const { return grads_.size(); }
  const std::unordered_map<std::uint64_t, Tensor<T>>& entries() const { return grads_; }

 private:
  std::unordered_map<std::uint64_t, Tensor<T>> grads_;
};

/// Reverse-mode pass from a scalar loss. Each graph node is visited once; a
/// tensor used at several sites receives the sum of their contributions.
template <typename T>
Gradients<T> backward(const Tensor<T>& loss);

// Elementwise arithmetic. `b` may equal `a` in shape, or be (C,1,1) or
// (N,C,1,1) broadcast against a rank-4 (N,C,H,W) `a`.
template <typename T>
Tensor<T> ew_add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> ew_sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> ew_mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& a) {
  return Tensor<T>::zeros(a.shape());
}

template <typename U, typename T>
Tensor<U> cast_tensor(const Tensor<T>& a, bool requires_grad) {
  std::vector<U> out(a.data().begin(), a.data().end());
  return Tensor<U>(a.shape(), std::move(out), requires_grad);
}

}  // namespace panet
