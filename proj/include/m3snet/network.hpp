#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "m3snet/blocks.hpp"

namespace m3snet {

/// Component ablations: baseline has neither the fusion lattice nor the
/// attention bridge; kFfm / kMhamb add one each; kFull has both.
enum class Ablation { kBaseline, kFfm, kMhamb, kFull };

std::string to_string(Ablation a);
Ablation parse_ablation(std::string_view text);

struct ModelConfig {
  int width = 32;
  std::vector<int> enc_blocks{1, 1, 1, 28};
  std::vector<int> dec_blocks{1, 1, 1, 1};
  /// Fusion units per level, level 1 (full resolution) first.
  std::vector<int> ffm_blocks{2, 2, 1, 0};
  int heads = 8;
  Ablation ablation = Ablation::kFull;
  /// SCA pooling window used at evaluation time; global pooling when unset.
  std::optional<int> tlc_window;

  int levels() const { return static_cast<int>(enc_blocks.size()); }
  bool uses_ffm() const { return ablation == Ablation::kFfm || ablation == Ablation::kFull; }
  bool uses_mhamb() const { return ablation == Ablation::kMhamb || ablation == Ablation::kFull; }
  /// Fusion schedule after applying the ablation (all zeros without FFM).
  std::vector<int> effective_ffm() const;
  /// Channels at 1-based level i: width * 2^(i-1). Level levels()+1 is the bridge.
  std::int64_t channels_at(int level) const { return static_cast<std::int64_t>(width) << (level - 1); }
  /// Spatial extents must be multiples of this (the bridge sits 2^levels below input).
  int spatial_multiple() const { return 1 << levels(); }

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;

  /// Stable key=value rendering (checkpoint headers, echoed run configs).
  std::vector<std::pair<std::string, std::string>> to_key_values() const;
  /// Applies recognised `model.*`-less keys (width, enc_blocks, ...). Returns
  /// false for keys it does not own.
  bool apply(std::string_view key, std::string_view value);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Fields that differ between two configs, rendered "key: a != b".
std::vector<std::string> config_diff(const ModelConfig& a, const ModelConfig& b);

std::vector<int> parse_int_list(std::string_view text);
std::string format_int_list(const std::vector<int>& values);

/// Multi-head attention bridge over spatial tokens.
///   Q, K, V = dw3x3(conv1x1(x));  per head: A = softmax(Q^T K / beta)
///   y = x + out_proj(V A^T)
/// beta = softplus(beta_raw) per head, initialised to sqrt(C / heads).
template <typename T>
struct Mhamb {
  std::int64_t channels = 0;
  int heads = 1;
  Conv2d<T> q_proj, q_dw, k_proj, k_dw, v_proj, v_dw, out_proj;
  Var<T> beta_raw;

  static Mhamb create(ParameterSet<T>& params, Initializer<T>& init, const std::string& name,
                      std::int64_t channels, int heads);

  Var<T> beta() const { return softplus(beta_raw); }
  /// Attention matrices, shape (N * heads, HW, HW).
  Var<T> attention(const Var<T>& x) const;
  Var<T> operator()(const Var<T>& x) const;

 private:
  struct Projected {
    Var<T> q, k, v;  // (N * heads, head_dim, HW)
  };
  Projected project(const Var<T>& x) const;
  Var<T> attend(const Projected& p) const;
};

/// Records (name, shape) of every stage output when passed to forward().
using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

struct ForwardOptions {
  std::optional<int> tlc_window;
  ShapeTrace* trace = nullptr;
};

/// The mountain-shaped restoration network: shallow 3x3 conv, a levels()-deep
/// NAFBlock encoder, the FFM lattice fusing each level with its upsampled
/// upper neighbour, the MHAMB bridge one scale below the last level, a
/// NAFBlock decoder fed by the last fusion unit of each level, and a zero-
/// initialised 3x3 residual head.
template <typename T>
class Network {
 public:
  struct FusionUnit {
    int stage = 0;  // s, 1-based
    int level = 0;  // i, 1-based
    Upsample<T> up;
    NafBlock<T> block;
  };
  using Lattice = std::map<std::pair<int, int>, Var<T>>;  // (stage, level) -> output

  explicit Network(ModelConfig config, std::uint64_t seed = 0, InitMode mode = InitMode::kFanInUniform);

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  const std::vector<FusionUnit>& fusion_units() const { return ffm_; }

  /// FE_1..FE_L. Spatial dims must be multiples of spatial_multiple().
  std::vector<Var<T>> encode(const Var<T>& image, const ForwardOptions& opts = {}) const;
  /// FFM_{s,i} for every scheduled unit.
  Lattice ffm_lattice(const std::vector<Var<T>>& features, const ForwardOptions& opts = {}) const;
  /// Skip feature per level: last fusion unit output, else FE_i.
  std::vector<Var<T>> skips(const std::vector<Var<T>>& features, const Lattice& lattice) const;
  /// Downsampled FE_L passed through MHAMB (identity when ablated).
  Var<T> bridge(const Var<T>& last_feature, const ForwardOptions& opts = {}) const;
  /// FD_L..FD_1; returns F_DF = FD_1.
  Var<T> decode(const std::vector<Var<T>>& skip_features, const Var<T>& bottleneck,
                const ForwardOptions& opts = {}) const;

  /// I + head(F_DF). Spatial dims must be multiples of spatial_multiple().
  Var<T> forward(const Var<T>& image, const ForwardOptions& opts = {}) const;
  /// Reflect-pads to the spatial multiple, runs forward and crops back.
  Var<T> forward_any_size(const Var<T>& image, const ForwardOptions& opts = {}) const;

  const Mhamb<T>* mhamb() const { return mhamb_ ? &*mhamb_ : nullptr; }

 private:
  void check_input(const Shape& shape, bool require_multiple) const;

  ModelConfig config_;
  ParameterSet<T> params_;
  Conv2d<T> intro_;
  std::vector<std::vector<NafBlock<T>>> encoder_;
  std::vector<Downsample<T>> down_;  // level i -> i+1, plus the bridge downsample last
  std::vector<FusionUnit> ffm_;      // evaluation order: stage ascending
  std::optional<Mhamb<T>> mhamb_;
  std::vector<Upsample<T>> up_;  // up_[i] maps level i+2 (or bridge) to level i+1
  std::vector<std::vector<NafBlock<T>>> decoder_;
  Conv2d<T> head_;
};

/// Exact learnable-parameter total of the built graph.
std::int64_t count_params(const ModelConfig& config);

struct MacBreakdown {
  std::int64_t conv = 0;       // sum over convolutions of K^2 C_in C_out H_out W_out / groups
  std::int64_t attention = 0;  // 2 (hw)^2 C at the bridge: Q^T K and A V
  std::int64_t total() const { return conv + attention; }
};

/// Multiply-accumulates of one forward pass at height x width (padded up to
/// the spatial multiple, as executed). Element-wise work (LayerNorm, gates,
/// SCA scaling, softmax, residual adds) is excluded; the attention
/// projections of the quadratic cost model are convolutions and are counted
/// there.
MacBreakdown estimate_macs(const ModelConfig& config, std::int64_t height, std::int64_t width,
                           bool tlc = false);

extern template struct Mhamb<float>;
extern template struct Mhamb<double>;
extern template class Network<float>;
extern template class Network<double>;

}  // namespace m3snet
