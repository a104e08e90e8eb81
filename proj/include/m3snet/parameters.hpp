#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "m3snet/autodiff.hpp"
#include "m3snet/random.hpp"

namespace m3snet {

/// Named learnable leaves in registration order. The order is the checkpoint
/// manifest order and the optimizer's iteration order.
template <typename T>
class ParameterSet {
 public:
  Var<T> add(std::string name, Tensor<T> init);

  const std::vector<std::pair<std::string, Var<T>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::int64_t count() const;

  /// Throws UsageError on unknown names.
  const Var<T>& at(const std::string& name) const;
  Var<T>& at(const std::string& name);

  /// Gradients aligned with entries(); parameters the loss never reached get
  /// zeros.
  std::vector<Tensor<T>> gradients(const GradientMap<T>& grads) const;

 private:
  std::vector<std::pair<std::string, Var<T>>> entries_;
};

enum class InitMode {
  kFanInUniform,  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for conv weights and biases
  kZero,          // everything zero (cost accounting, tests)
};

template <typename T>
class Initializer {
 public:
  Initializer(InitMode mode, std::uint64_t seed) : mode_(mode), rng_(seed) {}

  Tensor<T> conv_weight(Shape shape, std::int64_t fan_in);
  Tensor<T> conv_bias(std::int64_t channels, std::int64_t fan_in);
  Tensor<T> constant(Shape shape, T value) { return Tensor<T>(std::move(shape), value); }
  InitMode mode() const { return mode_; }

 private:
  Tensor<T> uniform(Shape shape, double bound);

  InitMode mode_;
  Rng rng_;
};

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;
extern template class Initializer<float>;
extern template class Initializer<double>;

}  // namespace m3snet
