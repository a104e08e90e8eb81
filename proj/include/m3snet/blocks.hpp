#pragma once

#include <optional>
#include <string>

#include "m3snet/ops.hpp"
#include "m3snet/parameters.hpp"

namespace m3snet {

template <typename T>
struct Conv2d {
  Var<T> weight;
  std::optional<Var<T>> bias;
  Conv2dOptions options;

  static Conv2d create(ParameterSet<T>& params, Initializer<T>& init, const std::string& name,
                       std::int64_t in_channels, std::int64_t out_channels, int kernel,
                       Conv2dOptions options = {}, bool with_bias = true);

  std::int64_t in_channels() const { return weight.shape()[1] * options.groups; }
  std::int64_t out_channels() const { return weight.shape()[0]; }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias, options); }
};

template <typename T>
struct LayerNorm {
  Var<T> gain;
  Var<T> offset;
  T eps = T(1e-6);

  static LayerNorm create(ParameterSet<T>& params, Initializer<T>& init, const std::string& name,
                          std::int64_t channels);

  Var<T> operator()(const Var<T>& x) const { return layer_norm_channel(x, gain, offset, eps); }
};

/// Channel-split product: out[:, c] = x[:, c] * x[:, c + C/2].
template <typename T>
Var<T> simple_gate(const Var<T>& x);

/// Simplified channel attention: x * conv1x1(pool(x)). Pool is the global
/// mean, or a local box mean of `tlc_window` pixels when set.
template <typename T>
Var<T> sca(const Var<T>& x, const Conv2d<T>& conv, std::optional<int> tlc_window = std::nullopt);

/// Activation-free residual block:
///   x1 = x  + project1(SCA(SG(depthwise(expand1(LN1(x))))))
///   y  = x1 + project2(SG(expand2(LN2(x1))))
template <typename T>
struct NafBlock {
  std::int64_t channels = 0;
  LayerNorm<T> ln1, ln2;
  Conv2d<T> expand1;    // 1x1, C -> 2C
  Conv2d<T> depthwise;  // 3x3, 2C, groups 2C
  Conv2d<T> sca_conv;   // 1x1, C -> C on the pooled vector
  Conv2d<T> project1;   // 1x1, C -> C
  Conv2d<T> expand2;    // 1x1, C -> 2C
  Conv2d<T> project2;   // 1x1, C -> C

  static NafBlock create(ParameterSet<T>& params, Initializer<T>& init, const std::string& name,
                         std::int64_t channels);

  Var<T> operator()(const Var<T>& x, std::optional<int> tlc_window = std::nullopt) const;
};

/// 2x2 stride-2 convolution: (C, H, W) -> (2C, H/2, W/2).
template <typename T>
struct Downsample {
  Conv2d<T> conv;

  static Downsample create(ParameterSet<T>& params, Initializer<T>& init, const std::string& name,
                           std::int64_t channels);
  Var<T> operator()(const Var<T>& x) const;
};

/// 1x1 convolution to 2C channels followed by a x2 pixel shuffle:
/// (C, H, W) -> (C/2, 2H, 2W).
template <typename T>
struct Upsample {
  Conv2d<T> conv;

  static Upsample create(ParameterSet<T>& params, Initializer<T>& init, const std::string& name,
                         std::int64_t channels);
  Var<T> operator()(const Var<T>& x) const;
};

}  // namespace m3snet
