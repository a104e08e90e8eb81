#include "m3snet/parameters.hpp"

#include <cmath>

namespace m3snet {

template <typename T>
Var<T> ParameterSet<T>::add(std::string name, Tensor<T> init) {
  for (const auto& [existing, _] : entries_) {
    if (existing == name) throw UsageError("parameter '" + name + "' registered twice");
  }
  auto v = Var<T>::leaf(std::move(init), true);
  entries_.emplace_back(std::move(name), v);
  return v;
}

template <typename T>
std::int64_t ParameterSet<T>::count() const {
  std::int64_t n = 0;
  for (const auto& [_, v] : entries_) n += static_cast<std::int64_t>(v.value().size());
  return n;
}

template <typename T>
const Var<T>& ParameterSet<T>::at(const std::string& name) const {
  for (const auto& [key, v] : entries_) {
    if (key == name) return v;
  }
  throw UsageError("unknown parameter '" + name + "'");
}

template <typename T>
Var<T>& ParameterSet<T>::at(const std::string& name) {
  for (auto& [key, v] : entries_) {
    if (key == name) return v;
  }
  throw UsageError("unknown parameter '" + name + "'");
}

template <typename T>
std::vector<Tensor<T>> ParameterSet<T>::gradients(const GradientMap<T>& grads) const {
  std::vector<Tensor<T>> out;
  out.reserve(entries_.size());
  for (const auto& [_, v] : entries_) {
    auto it = grads.find(v.node());
    out.push_back(it != grads.end() ? it->second : Tensor<T>(v.shape()));
  }
  return out;
}

template <typename T>
Tensor<T> Initializer<T>::uniform(Shape shape, double bound) {
  Tensor<T> t(std::move(shape));
  if (mode_ == InitMode::kZero) return t;
  for (auto& v : t.data()) v = static_cast<T>(rng_.uniform(-bound, bound));
  return t;
}

template <typename T>
Tensor<T> Initializer<T>::conv_weight(Shape shape, std::int64_t fan_in) {
  return uniform(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

template <typename T>
Tensor<T> Initializer<T>::conv_bias(std::int64_t channels, std::int64_t fan_in) {
  return uniform(Shape{channels}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class Initializer<float>;
template class Initializer<double>;

}  // namespace m3snet
