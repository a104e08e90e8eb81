#pragma once

#include <cstdint>
#include <optional>
#include <utility>

#include "m3snet/autodiff.hpp"

namespace m3snet {

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// Cross-correlation of a (N, C_in, H, W) input with an (C_out, C_in/groups, K, K)
/// weight. Output extent is floor((H + 2*padding - K) / stride) + 1.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const std::optional<Var<T>>& bias,
              Conv2dOptions options = {});

/// Normalizes the channel vector at every (batch, pixel) position, then
/// applies a per-channel gain and offset.
template <typename T>
Var<T> layer_norm_channel(const Var<T>& x, const Var<T>& gain, const Var<T>& offset, T eps);

/// Element-wise ops with right-aligned broadcasting (an axis broadcasts when
/// its extent is 1).
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& x, T factor);
template <typename T>
Var<T> add_scalar(const Var<T>& x, T value);
template <typename T>
Var<T> log(const Var<T>& x);
/// log(1 + exp(x)), used to keep learnable scales positive.
template <typename T>
Var<T> softplus(const Var<T>& x);
template <typename T>
Var<T> reciprocal(const Var<T>& x);

template <typename T>
Var<T> sum_all(const Var<T>& x);
template <typename T>
Var<T> mean_all(const Var<T>& x);

template <typename T>
Var<T> softmax_lastdim(const Var<T>& x);

/// (B, M, K) x (B, K, N) -> (B, M, N).
template <typename T>
Var<T> matmul_batched(const Var<T>& a, const Var<T>& b);

/// Swaps the last two axes.
template <typename T>
Var<T> transpose_last2(const Var<T>& x);

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);

/// (N, C, H, W) -> (N, C, 1, 1) mean over the spatial extent.
template <typename T>
Var<T> adaptive_avg_pool_to_1(const Var<T>& x);

/// Shape-preserving local mean. Each output pixel averages a
/// min(window, H) x min(window, W) box whose origin is clamped so the box
/// stays inside the image (replicated at the borders).
template <typename T>
Var<T> local_avg_pool(const Var<T>& x, int window);

/// (N, C*r*r, H, W) -> (N, C, H*r, W*r).
template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, int factor);
/// Inverse of pixel_shuffle.
template <typename T>
Var<T> pixel_unshuffle(const Var<T>& x, int factor);

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::int64_t start, std::int64_t count);
template <typename T>
std::pair<Var<T>, Var<T>> split_channels_half(const Var<T>& x);
/// x[:, :C/2] * x[:, C/2:] in a single pass. Odd C is a DimensionError.
template <typename T>
Var<T> half_product(const Var<T>& x);

/// Mirror-pads the bottom and right edges (edge sample not repeated).
template <typename T>
Var<T> pad_reflect(const Var<T>& x, std::int64_t bottom, std::int64_t right);
/// Keeps the top-left height x width window.
template <typename T>
Var<T> crop(const Var<T>& x, std::int64_t height, std::int64_t width);

/// Multiply-accumulate tally of convolution and matmul kernels executed on
/// this thread while an instance is alive. Test instrumentation.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t conv_macs() const;
  std::uint64_t matmul_macs() const;

 private:
  MacCounter* previous_;
  std::uint64_t conv_ = 0;
  std::uint64_t matmul_ = 0;
  friend void count_conv_macs(std::uint64_t);
  friend void count_matmul_macs(std::uint64_t);
};

void count_conv_macs(std::uint64_t macs);
void count_matmul_macs(std::uint64_t macs);

}  // namespace m3snet
