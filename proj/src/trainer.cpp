#include "m3snet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "m3snet/ops.hpp"
#include "m3snet/text.hpp"

namespace m3snet {

double cosine_lr(std::int64_t step, std::int64_t total, double lr0, double lr1) {
  if (total <= 0) throw ConfigError("cosine_lr: total iterations must be positive");
  if (step < 0 || step > total) throw ConfigError("cosine_lr: step outside [0, total]");
  return lr1 + 0.5 * (lr0 - lr1) * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total));
}

template <typename T>
NamedTensors<T> named_gradients(const ParameterSet<T>& params, const GradientMap<T>& grads) {
  auto aligned = params.gradients(grads);
  NamedTensors<T> out;
  for (std::size_t i = 0; i < aligned.size(); ++i) out.emplace(params.entries()[i].first, std::move(aligned[i]));
  return out;
}

template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, const NamedTensors<T>& grads, double lr,
               const AdamOptions& options) {
  for (const auto& [name, p] : params.entries()) {
    const auto it = grads.find(name);
    if (it == grads.end()) throw UsageError("adam_step: no gradient for parameter '" + name + "'");
    if (it->second.shape() != p.shape()) {
      throw DimensionError("adam_step: gradient for '" + name + "' has shape " + to_string(it->second.shape()) +
                           ", parameter has " + to_string(p.shape()));
    }
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(options.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(options.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params.entries()) {
    Var<T> var = p;
    auto& value = var.mutable_value();
    const auto& g = grads.at(name);
    auto& m = state.m.try_emplace(name, value.shape(), T(0)).first->second;
    auto& v = state.v.try_emplace(name, value.shape(), T(0)).first->second;
    T* pv = value.ptr();
    T* pm = m.ptr();
    T* ps = v.ptr();
    const T* pg = g.ptr();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double gi = pg[i];
      const double mi = options.beta1 * pm[i] + (1.0 - options.beta1) * gi;
      const double vi = options.beta2 * ps[i] + (1.0 - options.beta2) * gi * gi;
      pm[i] = static_cast<T>(mi);
      ps[i] = static_cast<T>(vi);
      pv[i] = static_cast<T>(pv[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + options.eps));
    }
  }
}

template NamedTensors<float> named_gradients(const ParameterSet<float>&, const GradientMap<float>&);
template NamedTensors<double> named_gradients(const ParameterSet<double>&, const GradientMap<double>&);
template void adam_step(ParameterSet<float>&, AdamState<float>&, const NamedTensors<float>&, double,
                        const AdamOptions&);
template void adam_step(ParameterSet<double>&, AdamState<double>&, const NamedTensors<double>&, double,
                        const AdamOptions&);

void TrainOptions::validate() const {
  if (iterations < 0) throw ConfigError("iters must be >= 0");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (patch < 1) throw ConfigError("patch must be >= 1");
  if (!(lr_init > 0.0) || !(lr_final >= 0.0) || lr_final > lr_init) {
    throw ConfigError("learning rates must satisfy 0 <= lr_final <= lr_init, lr_init > 0");
  }
  if (checkpoint_every < 0 || validate_every < 0) throw ConfigError("intervals must be >= 0");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
}

std::int64_t TrainOptions::validation_interval() const {
  return validate_every > 0 ? validate_every : std::max<std::int64_t>(iterations / 20, 100);
}

Image restore_image(const Network<float>& net, const Image& image, bool tlc) {
  ForwardOptions opts;
  if (tlc) {
    if (!net.config().tlc_window) throw ConfigError("tlc requested but the model records no tlc_window");
    opts.tlc_window = net.config().tlc_window;
  }
  NoGradGuard guard;
  const std::vector<Image> one{image};
  const auto out = net.forward_any_size(Var<float>::constant(to_batch(one)), opts);
  return clamp01(from_batch(out.value(), 0));
}

MetricReport evaluate(const Network<float>& net, const std::vector<ImagePair>& pairs, const EvalOptions& options) {
  if (pairs.empty()) throw ConfigError("evaluate: empty dataset");
  MetricReport report;
  report.mode = options.mode;
  for (const auto& p : pairs) report.add(p.id, restore_image(net, p.degraded, options.tlc), p.clean);
  return report;
}

namespace {

constexpr const char* kModelPrefix = "model.";

std::vector<std::pair<std::string, std::string>> train_header(const TrainOptions& o) {
  return {
      {"train.total_iters", std::to_string(o.iterations)},
      {"train.batch", std::to_string(o.batch)},
      {"train.patch", std::to_string(o.patch)},
      {"train.seed", std::to_string(o.seed)},
      {"train.lr_init", format_real(o.lr_init)},
      {"train.lr_final", format_real(o.lr_final)},
      {"train.checkpoint_every", std::to_string(o.checkpoint_every)},
      {"train.validate_every", std::to_string(o.validate_every)},
      {"train.clip_norm", format_real(o.clip_norm)},
      {"train.augment", o.augment ? "true" : "false"},
  };
}

TrainOptions options_from_checkpoint(const Checkpoint& c) {
  TrainOptions o;
  o.iterations = parse_int64("train.total_iters", c.get("train.total_iters"));
  o.batch = parse_int("train.batch", c.get("train.batch"));
  o.patch = parse_int64("train.patch", c.get("train.patch"));
  o.seed = parse_uint64("train.seed", c.get("train.seed"));
  o.lr_init = parse_real("train.lr_init", c.get("train.lr_init"));
  o.lr_final = parse_real("train.lr_final", c.get("train.lr_final"));
  o.checkpoint_every = parse_int64("train.checkpoint_every", c.get("train.checkpoint_every"));
  o.validate_every = parse_int64("train.validate_every", c.get("train.validate_every"));
  o.clip_norm = parse_real("train.clip_norm", c.get("train.clip_norm"));
  o.augment = parse_bool("train.augment", c.get("train.augment"));
  return o;
}

void load_parameters(ParameterSet<float>& params, const Checkpoint& ckpt) {
  for (auto& [name, p] : params.entries()) {
    const auto& t = ckpt.tensor(name);
    if (t.shape() != p.shape()) {
      throw IoError("checkpoint tensor '" + name + "' has shape " + to_string(t.shape()) + ", model expects " +
                    to_string(p.shape()));
    }
    Var<float> var = p;
    var.mutable_value() = t;
  }
}

ModelConfig with_patch_window(ModelConfig config, std::int64_t patch) {
  if (!config.tlc_window) config.tlc_window = static_cast<int>(patch);
  return config;
}

std::string grad_report(const ParameterSet<float>& params, const NamedTensors<float>& grads) {
  std::vector<std::pair<double, std::string>> norms;
  double total = 0.0;
  for (const auto& [name, p] : params.entries()) {
    double s = 0.0;
    for (float g : grads.at(name).data()) s += static_cast<double>(g) * g;
    total += s;
    norms.emplace_back(std::sqrt(s), name);
  }
  std::sort(norms.begin(), norms.end(), [](const auto& a, const auto& b) {
    if (std::isnan(a.first) != std::isnan(b.first)) return std::isnan(a.first);
    return a.first > b.first;
  });
  std::ostringstream os;
  os << "grad_norm=" << std::sqrt(total);
  for (std::size_t i = 0; i < std::min<std::size_t>(5, norms.size()); ++i) {
    os << ' ' << norms[i].second << '=' << norms[i].first;
  }
  return os.str();
}

std::string param_report(const ParameterSet<float>& params) {
  std::ostringstream os;
  os << "non-finite parameters:";
  int shown = 0;
  for (const auto& [name, p] : params.entries()) {
    double s = 0.0;
    for (float v : p.value().data()) s += static_cast<double>(v) * v;
    if (!std::isfinite(s) && shown++ < 5) os << ' ' << name;
  }
  if (shown == 0) os << " none";
  return os.str();
}

}  // namespace

ModelConfig config_from_checkpoint(const Checkpoint& ckpt) {
  ModelConfig config;
  const std::string prefix = kModelPrefix;
  for (const auto& [k, v] : ckpt.header) {
    if (k.rfind(prefix, 0) == 0 && !config.apply(std::string_view(k).substr(prefix.size()), v)) {
      throw IoError("checkpoint: unknown model key '" + k + "'");
    }
  }
  config.validate();
  return config;
}

Network<float> network_from_checkpoint(const Checkpoint& ckpt) {
  Network<float> net(config_from_checkpoint(ckpt), 0, InitMode::kZero);
  load_parameters(net.parameters(), ckpt);
  return net;
}

Trainer::Trainer(ModelConfig config, TrainOptions options)
    : options_(options),
      net_(with_patch_window(std::move(config), options.patch), options.seed),
      best_val_psnr_(std::nan("")),
      last_val_psnr_(std::nan("")) {
  if (options_.patch % net_.config().spatial_multiple() != 0) {
    throw ConfigError("patch " + std::to_string(options_.patch) + " must be a multiple of " +
                      std::to_string(net_.config().spatial_multiple()));
  }
  options_.validate();
}

Trainer::Trainer(const Checkpoint& ckpt)
    : options_(options_from_checkpoint(ckpt)),
      net_(network_from_checkpoint(ckpt)),
      best_val_psnr_(parse_real("train.best_val_psnr", ckpt.get("train.best_val_psnr"))),
      last_val_psnr_(parse_real("train.last_val_psnr", ckpt.get("train.last_val_psnr"))) {
  options_.validate();
  adam_.step = parse_int64("train.step", ckpt.get("train.step"));
  if (adam_.step > options_.iterations) throw IoError("checkpoint step exceeds its total_iters");
  for (const auto& [name, p] : net_.parameters().entries()) {
    if (adam_.step == 0) break;
    adam_.m.emplace(name, ckpt.tensor("adam.m/" + name));
    adam_.v.emplace(name, ckpt.tensor("adam.v/" + name));
  }
}

double Trainer::step(const std::vector<ImagePair>& train) {
  if (train.empty()) throw ConfigError("train: empty dataset");
  if (adam_.step >= options_.iterations) throw UsageError("train: run already reached total_iters");
  const IndexStream stream(train.size(), options_.seed);
  std::vector<Image> inputs, targets;
  for (int b = 0; b < options_.batch; ++b) {
    const auto position = static_cast<std::uint64_t>(adam_.step) * options_.batch + b;
    Rng rng(mix_seed(options_.seed, position));
    auto pair = sample_patch(train[stream.at(position)], options_.patch, rng);
    if (options_.augment) pair = augment(pair, rng);
    inputs.push_back(std::move(pair.degraded));
    targets.push_back(std::move(pair.clean));
  }
  const auto x = Var<float>::constant(to_batch(inputs));
  const auto y = Var<float>::constant(to_batch(targets));
  const double lr = cosine_lr(adam_.step, options_.iterations, options_.lr_init, options_.lr_final);

  Var<float> loss;
  try {
    loss = psnr_loss(net_.forward(x), y);
  } catch (const UsageError& e) {
    std::ostringstream os;
    os << "non-finite training state at step=" << adam_.step << " lr=" << lr << " loss=nan grad_norm=n/a ("
       << e.what() << ") " << param_report(net_.parameters());
    throw TrainingError(os.str());
  }
  const double loss_value = loss.value().item();
  auto grads = named_gradients(net_.parameters(), backward(loss));

  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (float v : g.data()) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(loss_value) || !std::isfinite(norm)) {
    std::ostringstream os;
    os << "non-finite training state at step=" << adam_.step << " lr=" << lr << " loss=" << loss_value << ' '
       << grad_report(net_.parameters(), grads);
    throw TrainingError(os.str());
  }
  if (options_.clip_norm > 0.0 && norm > options_.clip_norm) {
    const float f = static_cast<float>(options_.clip_norm / norm);
    for (auto& [name, g] : grads)
      for (float& v : g.data()) v *= f;
  }
  adam_step(net_.parameters(), adam_, grads, lr);
  losses_.push_back(loss_value);
  return loss_value;
}

double Trainer::validate(const std::vector<ImagePair>& val) const {
  if (val.empty()) return std::nan("");
  return evaluate(net_, val, {.tlc = true}).mean_psnr();
}

void Trainer::run(const std::vector<ImagePair>& train, const std::vector<ImagePair>& val,
                  const std::filesystem::path& out_dir, std::ostream* log, std::int64_t until) {
  const std::int64_t end = until < 0 ? options_.iterations : std::min(until, options_.iterations);
  const std::int64_t every = options_.validation_interval();
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  double loss_sum = 0.0;
  std::int64_t loss_count = 0;
  while (adam_.step < end) {
    loss_sum += step(train);
    ++loss_count;
    const std::int64_t s = adam_.step;
    const bool last = s == options_.iterations;
    if (s % every == 0 || last) {
      last_val_psnr_ = validate(val);
      if (!std::isnan(last_val_psnr_) && !(last_val_psnr_ <= best_val_psnr_)) best_val_psnr_ = last_val_psnr_;
      if (log) {
        const double lr = cosine_lr(s, options_.iterations, options_.lr_init, options_.lr_final);
        *log << "step=" << s << " lr=" << format_real(lr) << " loss=" << format_real(loss_sum / loss_count);
        if (!val.empty()) *log << " val_psnr=" << format_real(last_val_psnr_);
        *log << std::endl;
      }
      loss_sum = 0.0;
      loss_count = 0;
    }
    if (!out_dir.empty() && ((options_.checkpoint_every > 0 && s % options_.checkpoint_every == 0) || last)) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%07lld.ckpt", static_cast<long long>(s));
      const auto ckpt = checkpoint();
      save_checkpoint(out_dir / name, ckpt);
      if (last) save_checkpoint(out_dir / "final.ckpt", ckpt);
    }
  }
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.header.emplace_back("format", "1");
  for (auto& [k, v] : net_.config().to_key_values()) c.header.emplace_back(kModelPrefix + k, v);
  c.header.emplace_back("train.step", std::to_string(adam_.step));
  for (auto& kv : train_header(options_)) c.header.push_back(kv);
  c.header.emplace_back("train.best_val_psnr", format_real(best_val_psnr_));
  c.header.emplace_back("train.last_val_psnr", format_real(last_val_psnr_));
  for (const auto& [name, p] : net_.parameters().entries()) c.tensors.emplace_back(name, p.value());
  if (adam_.step > 0) {
    for (const auto& [name, p] : net_.parameters().entries()) c.tensors.emplace_back("adam.m/" + name, adam_.m.at(name));
    for (const auto& [name, p] : net_.parameters().entries()) c.tensors.emplace_back("adam.v/" + name, adam_.v.at(name));
  }
  return c;
}

}  // namespace m3snet
