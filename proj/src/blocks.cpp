#include "m3snet/blocks.hpp"

namespace m3snet {

template <typename T>
Conv2d<T> Conv2d<T>::create(ParameterSet<T>& params, Initializer<T>& init, const std::string& name,
                            std::int64_t in_channels, std::int64_t out_channels, int kernel,
                            Conv2dOptions options, bool with_bias) {
  if (in_channels % options.groups != 0 || out_channels % options.groups != 0) {
    throw ConfigError(name + ": channels " + std::to_string(in_channels) + " -> " +
                      std::to_string(out_channels) + " not divisible by groups " +
                      std::to_string(options.groups));
  }
  const std::int64_t fan_in = in_channels / options.groups * kernel * kernel;
  Conv2d c;
  c.options = options;
  c.weight = params.add(name + ".weight",
                        init.conv_weight(Shape{out_channels, in_channels / options.groups, kernel, kernel}, fan_in));
  if (with_bias) c.bias = params.add(name + ".bias", init.conv_bias(out_channels, fan_in));
  return c;
}

template <typename T>
LayerNorm<T> LayerNorm<T>::create(ParameterSet<T>& params, Initializer<T>& init, const std::string& name,
                                  std::int64_t channels) {
  LayerNorm ln;
  ln.gain = params.add(name + ".gain", init.constant(Shape{channels}, T(1)));
  ln.offset = params.add(name + ".offset", init.constant(Shape{channels}, T(0)));
  return ln;
}

template <typename T>
Var<T> simple_gate(const Var<T>& x) {
  return half_product(x);
}

template <typename T>
Var<T> sca(const Var<T>& x, const Conv2d<T>& conv, std::optional<int> tlc_window) {
  if (tlc_window && *tlc_window < 1) throw ConfigError("sca: tlc_window must be >= 1");
  auto pooled = tlc_window ? local_avg_pool(x, *tlc_window) : adaptive_avg_pool_to_1(x);
  return mul(x, conv(pooled));
}

template <typename T>
NafBlock<T> NafBlock<T>::create(ParameterSet<T>& params, Initializer<T>& init, const std::string& name,
                                std::int64_t channels) {
  if (channels < 1) throw ConfigError(name + ": channel count must be positive");
  const std::int64_t c = channels, c2 = 2 * channels;
  NafBlock b;
  b.channels = c;
  b.ln1 = LayerNorm<T>::create(params, init, name + ".ln1", c);
  b.expand1 = Conv2d<T>::create(params, init, name + ".expand1", c, c2, 1);
  b.depthwise = Conv2d<T>::create(params, init, name + ".depthwise", c2, c2, 3,
                                  Conv2dOptions{1, 1, static_cast<int>(c2)});
  b.sca_conv = Conv2d<T>::create(params, init, name + ".sca", c, c, 1);
  b.project1 = Conv2d<T>::create(params, init, name + ".project1", c, c, 1);
  b.ln2 = LayerNorm<T>::create(params, init, name + ".ln2", c);
  b.expand2 = Conv2d<T>::create(params, init, name + ".expand2", c, c2, 1);
  b.project2 = Conv2d<T>::create(params, init, name + ".project2", c, c, 1);
  return b;
}

template <typename T>
Var<T> NafBlock<T>::operator()(const Var<T>& x, std::optional<int> tlc_window) const {
  require_rank(x.shape(), 4, "naf_block", "input");
  if (x.shape()[1] != channels) {
    throw DimensionError("naf_block: input axis 1 (channels) = " + std::to_string(x.shape()[1]) +
                         ", block expects " + std::to_string(channels));
  }
  auto h = depthwise(expand1(ln1(x)));
  h = sca(simple_gate(h), sca_conv, tlc_window);
  auto x1 = add(x, project1(h));
  auto f = simple_gate(expand2(ln2(x1)));
  return add(x1, project2(f));
}

template <typename T>
Downsample<T> Downsample<T>::create(ParameterSet<T>& params, Initializer<T>& init, const std::string& name,
                                    std::int64_t channels) {
  return Downsample{Conv2d<T>::create(params, init, name, channels, 2 * channels, 2, Conv2dOptions{2, 0, 1})};
}

template <typename T>
Var<T> Downsample<T>::operator()(const Var<T>& x) const {
  require_rank(x.shape(), 4, "downsample", "input");
  if (x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0) {
    throw DimensionError("downsample: input axes 2/3 (height, width) of " + to_string(x.shape()) +
                         " must be even");
  }
  return conv(x);
}

template <typename T>
Upsample<T> Upsample<T>::create(ParameterSet<T>& params, Initializer<T>& init, const std::string& name,
                                std::int64_t channels) {
  if (channels % 2 != 0) {
    throw ConfigError(name + ": upsample needs an even channel count, got " + std::to_string(channels));
  }
  return Upsample{Conv2d<T>::create(params, init, name, channels, 2 * channels, 1)};
}

template <typename T>
Var<T> Upsample<T>::operator()(const Var<T>& x) const {
  require_rank(x.shape(), 4, "upsample", "input");
  if (x.shape()[1] % 2 != 0) {
    throw DimensionError("upsample: input axis 1 (channels) = " + std::to_string(x.shape()[1]) + " is odd");
  }
  return pixel_shuffle(conv(x), 2);
}

template struct Conv2d<float>;
template struct Conv2d<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct NafBlock<float>;
template struct NafBlock<double>;
template struct Downsample<float>;
template struct Downsample<double>;
template struct Upsample<float>;
template struct Upsample<double>;
template Var<float> simple_gate(const Var<float>&);
template Var<double> simple_gate(const Var<double>&);
template Var<float> sca(const Var<float>&, const Conv2d<float>&, std::optional<int>);
template Var<double> sca(const Var<double>&, const Conv2d<double>&, std::optional<int>);

}  // namespace m3snet
