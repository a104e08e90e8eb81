#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "m3snet/checkpoint.hpp"
#include "m3snet/data.hpp"
#include "m3snet/metrics.hpp"
#include "m3snet/network.hpp"

namespace m3snet {

/// lr1 + (lr0 - lr1) (1 + cos(pi step / total)) / 2, single cycle.
double cosine_lr(std::int64_t step, std::int64_t total, double lr0 = 1e-3, double lr1 = 1e-7);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
using NamedTensors = std::map<std::string, Tensor<T>>;

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  NamedTensors<T> m;
  NamedTensors<T> v;
};

template <typename T>
NamedTensors<T> named_gradients(const ParameterSet<T>& params, const GradientMap<T>& grads);

/// Bias-corrected Adam update of every parameter. Throws UsageError when a
/// parameter has no gradient entry, DimensionError on shape mismatch.
template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, const NamedTensors<T>& grads, double lr,
               const AdamOptions& options = {});

struct TrainOptions {
  std::int64_t iterations = 1000;
  int batch = 4;
  std::int64_t patch = 256;
  std::uint64_t seed = 0;
  double lr_init = 1e-3;
  double lr_final = 1e-7;
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  std::int64_t validate_every = 0;    // 0: max(iterations / 20, 100)
  double clip_norm = 0.0;             // global gradient norm; 0 disables
  bool augment = true;

  void validate() const;
  std::int64_t validation_interval() const;
};

struct EvalOptions {
  bool tlc = false;
  ChannelMode mode = ChannelMode::kRgb;
};

/// Full-image inference: pads to the spatial multiple, crops back and clamps.
/// With tlc the SCA pools use the config's tlc_window.
Image restore_image(const Network<float>& net, const Image& image, bool tlc = false);

MetricReport evaluate(const Network<float>& net, const std::vector<ImagePair>& pairs, const EvalOptions& options = {});

ModelConfig config_from_checkpoint(const Checkpoint& ckpt);
/// Builds the network recorded in a checkpoint and loads its parameters.
Network<float> network_from_checkpoint(const Checkpoint& ckpt);

class Trainer {
 public:
  /// Fresh run; parameters initialised from options.seed. When the config has
  /// no tlc_window the training patch size is recorded as one.
  Trainer(ModelConfig config, TrainOptions options);
  /// Continues the run stored in a checkpoint.
  explicit Trainer(const Checkpoint& ckpt);

  /// One optimisation step on a batch drawn from `train`; returns the loss.
  double step(const std::vector<ImagePair>& train);

  /// Steps until `until` (default: options().iterations), validating,
  /// logging and checkpointing on schedule. `out_dir` may be empty.
  void run(const std::vector<ImagePair>& train, const std::vector<ImagePair>& val,
           const std::filesystem::path& out_dir, std::ostream* log, std::int64_t until = -1);

  Checkpoint checkpoint() const;

  const Network<float>& network() const { return net_; }
  const TrainOptions& options() const { return options_; }
  std::int64_t step_count() const { return adam_.step; }
  double best_val_psnr() const { return best_val_psnr_; }
  double last_val_psnr() const { return last_val_psnr_; }
  const std::vector<double>& losses() const { return losses_; }

 private:
  double validate(const std::vector<ImagePair>& val) const;

  TrainOptions options_;
  Network<float> net_;
  AdamState<float> adam_;
  double best_val_psnr_;
  double last_val_psnr_;
  std::vector<double> losses_;  // this session only
};

}  // namespace m3snet
