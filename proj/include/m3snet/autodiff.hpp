#pragma once

#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "m3snet/tensor.hpp"

namespace m3snet {

/// One recorded operation (or a leaf). `backward_fn` reads `grad` and
/// accumulates into the gradients of `inputs`.
template <typename T>
struct Node {
  Tensor<T> value;
  Buffer<T> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";

  /// Gradient buffer of input `i`, zero-initialised on first use; nullptr if
  /// that input does not take part in differentiation.
  T* input_grad(std::size_t i);
};

/// Handle to a value in the computation graph. Cheap to copy; copies share
/// the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value);
  static Var leaf(Tensor<T> value, bool requires_grad = true);

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  /// In-place access for optimizer updates; leaves only.
  Tensor<T>& mutable_value();

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Disables graph recording on this thread while alive (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

template <typename T>
using GradientMap = std::unordered_map<const Node<T>*, Tensor<T>>;

/// Reverse-mode sweep from a scalar. Returns the gradient of every
/// grad-requiring leaf reachable from `loss`. Each recorded op runs its
/// backward rule once, in reverse topological order.
template <typename T>
GradientMap<T> backward(const Var<T>& loss);

/// Builds the result node of an op. Inputs are retained (and `fn` kept) only
/// when recording is enabled and some input requires a gradient.
template <typename T>
Var<T> record(Tensor<T> value, std::vector<Var<T>> inputs, const char* op,
              std::function<void(Node<T>&)> fn);

extern template struct Node<float>;
extern template struct Node<double>;
extern template class Var<float>;
extern template class Var<double>;

}  // namespace m3snet
