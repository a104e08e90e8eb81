#include "m3snet/autodiff.hpp"

#include <algorithm>
#include <unordered_set>

namespace m3snet {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
T* Node<T>::input_grad(std::size_t i) {
  Node& in = *inputs[i];
  if (!in.requires_grad) return nullptr;
  if (in.grad.empty()) in.grad.assign(in.value.size(), T(0));
  return in.grad.data();
}

template <typename T>
Var<T> Var<T>::constant(Tensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = "constant";
  return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::leaf(Tensor<T> value, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

template <typename T>
Tensor<T>& Var<T>::mutable_value() {
  if (!node_->is_leaf) throw UsageError("mutable_value: only leaf values may be modified");
  return node_->value;
}

template <typename T>
Var<T> record(Tensor<T> value, std::vector<Var<T>> inputs, const char* op,
              std::function<void(Node<T>&)> fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  node->is_leaf = false;
  const bool any = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(), [](const Var<T>& v) {
                     return v.requires_grad();
                   });
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.shared());
    node->backward_fn = std::move(fn);
  }
  return Var<T>(std::move(node));
}

template <typename T>
GradientMap<T> backward(const Var<T>& loss) {
  if (!loss.defined()) throw UsageError("backward: undefined value");
  if (loss.value().size() != 1) {
    throw UsageError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw UsageError("backward: value is detached (no recorded graph requires a gradient)");
  }

  // Iterative post-order DFS gives a topological order without deep recursion.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) n->grad.clear();
  loss.node()->grad.assign(1, T(1));

  GradientMap<T> result;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf) {
      if (!n->grad.empty()) {
        result.emplace(n, Tensor<T>(n->value.shape(), std::move(n->grad)));
        n->grad.clear();
      }
      continue;
    }
    if (!n->grad.empty() && n->backward_fn) n->backward_fn(*n);
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
  return result;
}

template struct Node<float>;
template struct Node<double>;
template class Var<float>;
template class Var<double>;
template GradientMap<float> backward(const Var<float>&);
template GradientMap<double> backward(const Var<double>&);
template Var<float> record(Tensor<float>, std::vector<Var<float>>, const char*,
                           std::function<void(Node<float>&)>);
template Var<double> record(Tensor<double>, std::vector<Var<double>>, const char*,
                            std::function<void(Node<double>&)>);

}  // namespace m3snet
