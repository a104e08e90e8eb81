#include "m3snet/network.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "m3snet/text.hpp"

namespace m3snet {

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kBaseline: return "baseline";
    case Ablation::kFfm: return "ffm";
    case Ablation::kMhamb: return "mhamb";
    case Ablation::kFull: return "full";
  }
  return "full";
}

Ablation parse_ablation(std::string_view text) {
  if (text == "baseline") return Ablation::kBaseline;
  if (text == "ffm") return Ablation::kFfm;
  if (text == "mhamb") return Ablation::kMhamb;
  if (text == "full") return Ablation::kFull;
  throw ConfigError("ablation must be one of baseline|ffm|mhamb|full, got '" + std::string(text) + "'");
}

std::vector<int> parse_int_list(std::string_view text) {
  std::vector<int> out;
  std::size_t pos = 0;
  std::string_view body = text;
  if (!body.empty() && body.front() == '[') body.remove_prefix(1);
  if (!body.empty() && body.back() == ']') body.remove_suffix(1);
  while (pos <= body.size()) {
    const std::size_t comma = std::min(body.find(',', pos), body.size());
    auto item = body.substr(pos, comma - pos);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    int v = 0;
    auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || p != item.data() + item.size()) {
      throw ConfigError("expected a comma-separated integer list, got '" + std::string(text) + "'");
    }
    out.push_back(v);
    pos = comma + 1;
  }
  return out;
}

std::string format_int_list(const std::vector<int>& values) {
  std::string s;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(values[i]);
  }
  return s;
}

std::vector<int> ModelConfig::effective_ffm() const {
  if (uses_ffm()) return ffm_blocks;
  return std::vector<int>(ffm_blocks.size(), 0);
}

void ModelConfig::validate() const {
  const int l = levels();
  if (l < 1) throw ConfigError("model: enc_blocks must name at least one level");
  if (static_cast<int>(dec_blocks.size()) != l || static_cast<int>(ffm_blocks.size()) != l) {
    throw ConfigError("model: enc_blocks, dec_blocks and ffm_blocks must have the same length (" +
                      std::to_string(l) + ")");
  }
  if (width < 2 || width % 2 != 0) {
    throw ConfigError("model: width must be a positive even number, got " + std::to_string(width));
  }
  for (int i = 0; i < l; ++i) {
    if (enc_blocks[i] < 0 || dec_blocks[i] < 0 || ffm_blocks[i] < 0) {
      throw ConfigError("model: block counts must be non-negative");
    }
    if (i + 1 < l && ffm_blocks[i + 1] > ffm_blocks[i]) {
      throw ConfigError("model: ffm_blocks must be non-increasing in level, got [" + format_int_list(ffm_blocks) +
                        "]");
    }
  }
  if (ffm_blocks[l - 1] != 0) {
    throw ConfigError("model: ffm_blocks at the last level must be 0 (no upper level to fuse)");
  }
  // FFM_{s,i} with s >= 2 consumes FFM_{s-1,i+1}.
  for (int i = 0; i + 1 < l; ++i) {
    for (int s = 2; s <= ffm_blocks[i]; ++s) {
      if (ffm_blocks[i + 1] < s - 1) {
        throw ConfigError("model: fusion unit (stage " + std::to_string(s) + ", level " + std::to_string(i + 1) +
                          ") needs unit (stage " + std::to_string(s - 1) + ", level " + std::to_string(i + 2) +
                          "), which ffm_blocks [" + format_int_list(ffm_blocks) + "] does not schedule");
      }
    }
  }
  if (uses_mhamb()) {
    if (heads < 1) throw ConfigError("model: heads must be >= 1");
    if (channels_at(l + 1) % heads != 0) {
      throw ConfigError("model: bridge channels " + std::to_string(channels_at(l + 1)) +
                        " not divisible by heads " + std::to_string(heads));
    }
  }
  if (tlc_window && *tlc_window < 1) throw ConfigError("model: tlc_window must be >= 1");
}

std::vector<std::pair<std::string, std::string>> ModelConfig::to_key_values() const {
  return {
      {"width", std::to_string(width)},
      {"enc_blocks", format_int_list(enc_blocks)},
      {"dec_blocks", format_int_list(dec_blocks)},
      {"ffm_blocks", format_int_list(ffm_blocks)},
      {"heads", std::to_string(heads)},
      {"ablation", to_string(ablation)},
      {"tlc_window", tlc_window ? std::to_string(*tlc_window) : std::string("none")},
  };
}

bool ModelConfig::apply(std::string_view key, std::string_view value) {
  if (key == "width") {
    width = parse_int(key, value);
  } else if (key == "enc_blocks") {
    enc_blocks = parse_int_list(value);
  } else if (key == "dec_blocks") {
    dec_blocks = parse_int_list(value);
  } else if (key == "ffm_blocks") {
    ffm_blocks = parse_int_list(value);
  } else if (key == "heads") {
    heads = parse_int(key, value);
  } else if (key == "ablation") {
    ablation = parse_ablation(value);
  } else if (key == "tlc_window") {
    if (value == "none" || value.empty()) {
      tlc_window.reset();
    } else {
      tlc_window = parse_int(key, value);
    }
  } else {
    return false;
  }
  return true;
}

std::vector<std::string> config_diff(const ModelConfig& a, const ModelConfig& b) {
  std::vector<std::string> out;
  const auto ka = a.to_key_values();
  const auto kb = b.to_key_values();
  for (std::size_t i = 0; i < ka.size(); ++i) {
    if (ka[i].second != kb[i].second) out.push_back(ka[i].first + ": " + ka[i].second + " != " + kb[i].second);
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
Mhamb<T> Mhamb<T>::create(ParameterSet<T>& params, Initializer<T>& init, const std::string& name,
                          std::int64_t channels, int heads) {
  if (heads < 1 || channels % heads != 0) {
    throw ConfigError(name + ": channels " + std::to_string(channels) + " not divisible by heads " +
                      std::to_string(heads));
  }
  Mhamb m;
  m.channels = channels;
  m.heads = heads;
  const Conv2dOptions dw{1, 1, static_cast<int>(channels)};
  m.q_proj = Conv2d<T>::create(params, init, name + ".q_proj", channels, channels, 1);
  m.q_dw = Conv2d<T>::create(params, init, name + ".q_dw", channels, channels, 3, dw);
  m.k_proj = Conv2d<T>::create(params, init, name + ".k_proj", channels, channels, 1);
  m.k_dw = Conv2d<T>::create(params, init, name + ".k_dw", channels, channels, 3, dw);
  m.v_proj = Conv2d<T>::create(params, init, name + ".v_proj", channels, channels, 1);
  m.v_dw = Conv2d<T>::create(params, init, name + ".v_dw", channels, channels, 3, dw);
  m.out_proj = Conv2d<T>::create(params, init, name + ".out_proj", channels, channels, 1);
  // softplus(raw) = sqrt(head_dim)  <=>  raw = log(expm1(sqrt(head_dim)))
  const double beta0 = std::sqrt(static_cast<double>(channels / heads));
  m.beta_raw = params.add(name + ".beta", init.constant(Shape{heads}, static_cast<T>(std::log(std::expm1(beta0)))));
  return m;
}

template <typename T>
typename Mhamb<T>::Projected Mhamb<T>::project(const Var<T>& x) const {
  require_rank(x.shape(), 4, "mhamb", "input");
  if (x.shape()[1] != channels) {
    throw DimensionError("mhamb: input axis 1 (channels) = " + std::to_string(x.shape()[1]) + ", expected " +
                         std::to_string(channels));
  }
  const std::int64_t n = x.shape()[0], tokens = x.shape()[2] * x.shape()[3];
  const Shape split{n * heads, channels / heads, tokens};
  return Projected{reshape(q_dw(q_proj(x)), split), reshape(k_dw(k_proj(x)), split),
                   reshape(v_dw(v_proj(x)), split)};
}

template <typename T>
Var<T> Mhamb<T>::attend(const Projected& p) const {
  const std::int64_t nh = p.q.shape()[0], tokens = p.q.shape()[2];
  auto scores = matmul_batched(transpose_last2(p.q), p.k);  // (N*h, HW, HW)
  auto inv_beta = reshape(reciprocal(beta()), Shape{1, heads, 1, 1});
  auto scaled = mul(reshape(scores, Shape{nh / heads, heads, tokens, tokens}), inv_beta);
  return softmax_lastdim(reshape(scaled, Shape{nh, tokens, tokens}));
}

template <typename T>
Var<T> Mhamb<T>::attention(const Var<T>& x) const {
  return attend(project(x));
}

template <typename T>
Var<T> Mhamb<T>::operator()(const Var<T>& x) const {
  auto p = project(x);
  auto a = attend(p);
  auto mixed = matmul_batched(p.v, transpose_last2(a));  // (N*h, d, HW)
  return add(x, out_proj(reshape(mixed, x.shape())));
}

// ---------------------------------------------------------------------------

namespace {

std::string level_name(const char* prefix, int level) { return std::string(prefix) + "." + std::to_string(level); }

// TLC window at 1-based level: the configured window is in input pixels and
// shrinks with the feature map so each level pools the same image fraction.
std::optional<int> level_window(std::optional<int> window, int level) {
  if (!window) return std::nullopt;
  return std::max(1, *window >> (level - 1));
}

template <typename T>
void note(const ForwardOptions& opts, std::string name, const Var<T>& v) {
  if (opts.trace) opts.trace->emplace_back(std::move(name), v.shape());
}

}  // namespace

template <typename T>
Network<T>::Network(ModelConfig config, std::uint64_t seed, InitMode mode) : config_(std::move(config)) {
  config_.validate();
  Initializer<T> init(mode, seed);
  const int l = config_.levels();
  const auto ffm = config_.effective_ffm();

  intro_ = Conv2d<T>::create(params_, init, "intro", 3, config_.width, 3, Conv2dOptions{1, 1, 1});
  for (int i = 1; i <= l; ++i) {
    std::vector<NafBlock<T>> blocks;
    for (int b = 0; b < config_.enc_blocks[i - 1]; ++b) {
      blocks.push_back(NafBlock<T>::create(params_, init, level_name("enc", i) + "." + std::to_string(b),
                                           config_.channels_at(i)));
    }
    encoder_.push_back(std::move(blocks));
    down_.push_back(Downsample<T>::create(params_, init, level_name("down", i), config_.channels_at(i)));
  }
  const int stages = ffm.empty() ? 0 : *std::max_element(ffm.begin(), ffm.end());
  for (int s = 1; s <= stages; ++s) {
    for (int i = l - 1; i >= 1; --i) {
      if (ffm[i - 1] < s) continue;
      const std::string name = "ffm." + std::to_string(s) + "." + std::to_string(i);
      FusionUnit unit;
      unit.stage = s;
      unit.level = i;
      unit.up = Upsample<T>::create(params_, init, name + ".up", config_.channels_at(i + 1));
      unit.block = NafBlock<T>::create(params_, init, name + ".block", config_.channels_at(i));
      ffm_.push_back(std::move(unit));
    }
  }
  if (config_.uses_mhamb()) {
    mhamb_ = Mhamb<T>::create(params_, init, "mhamb", config_.channels_at(l + 1), config_.heads);
  }
  up_.resize(static_cast<std::size_t>(l));
  decoder_.resize(static_cast<std::size_t>(l));
  for (int i = l; i >= 1; --i) {
    up_[i - 1] = Upsample<T>::create(params_, init, level_name("up", i), config_.channels_at(i + 1));
    for (int b = 0; b < config_.dec_blocks[i - 1]; ++b) {
      decoder_[i - 1].push_back(NafBlock<T>::create(params_, init, level_name("dec", i) + "." + std::to_string(b),
                                                    config_.channels_at(i)));
    }
  }
  // Zero residual head: the untrained network is the identity map.
  Initializer<T> zero(InitMode::kZero, 0);
  head_ = Conv2d<T>::create(params_, zero, "head", config_.width, 3, 3, Conv2dOptions{1, 1, 1});
}

template <typename T>
void Network<T>::check_input(const Shape& shape, bool require_multiple) const {
  require_rank(shape, 4, "forward", "image");
  if (shape[1] != 3) {
    throw DimensionError("forward: image axis 1 (channels) = " + std::to_string(shape[1]) + ", expected 3");
  }
  const int m = config_.spatial_multiple();
  if (require_multiple && (shape[2] % m != 0 || shape[3] % m != 0)) {
    throw DimensionError("forward: image axes 2/3 (height, width) of " + to_string(shape) +
                         " must be multiples of " + std::to_string(m) + " (use forward_any_size to pad)");
  }
}

template <typename T>
std::vector<Var<T>> Network<T>::encode(const Var<T>& image, const ForwardOptions& opts) const {
  check_input(image.shape(), true);
  std::vector<Var<T>> features;
  auto x = intro_(image);
  note(opts, "intro", x);
  for (int i = 1; i <= config_.levels(); ++i) {
    if (i > 1) x = down_[i - 2](x);
    for (const auto& block : encoder_[i - 1]) x = block(x, level_window(opts.tlc_window, i));
    note(opts, level_name("enc", i), x);
    features.push_back(x);
  }
  return features;
}

template <typename T>
typename Network<T>::Lattice Network<T>::ffm_lattice(const std::vector<Var<T>>& features,
                                                     const ForwardOptions& opts) const {
  if (static_cast<int>(features.size()) != config_.levels()) {
    throw UsageError("ffm_lattice: expected " + std::to_string(config_.levels()) + " encoder features");
  }
  Lattice out;
  for (const auto& unit : ffm_) {
    const int s = unit.stage, i = unit.level;
    const Var<T>& lower = s == 1 ? features[i - 1] : out.at({s - 1, i});
    const Var<T>& upper = s == 1 ? features[i] : out.at({s - 1, i + 1});
    auto fused = unit.block(add(lower, unit.up(upper)), level_window(opts.tlc_window, i));
    note(opts, "ffm." + std::to_string(s) + "." + std::to_string(i), fused);
    out.emplace(std::make_pair(s, i), std::move(fused));
  }
  return out;
}

template <typename T>
std::vector<Var<T>> Network<T>::skips(const std::vector<Var<T>>& features, const Lattice& lattice) const {
  const auto ffm = config_.effective_ffm();
  std::vector<Var<T>> out;
  for (int i = 1; i <= config_.levels(); ++i) {
    const int last = ffm[i - 1];
    out.push_back(last > 0 ? lattice.at({last, i}) : features[i - 1]);
  }
  return out;
}

template <typename T>
Var<T> Network<T>::bridge(const Var<T>& last_feature, const ForwardOptions& opts) const {
  auto x = down_.back()(last_feature);
  if (mhamb_) x = (*mhamb_)(x);
  note(opts, "bridge", x);
  return x;
}

template <typename T>
Var<T> Network<T>::decode(const std::vector<Var<T>>& skip_features, const Var<T>& bottleneck,
                          const ForwardOptions& opts) const {
  if (static_cast<int>(skip_features.size()) != config_.levels()) {
    throw UsageError("decode: expected " + std::to_string(config_.levels()) + " skip features");
  }
  auto x = bottleneck;
  for (int i = config_.levels(); i >= 1; --i) {
    x = add(up_[i - 1](x), skip_features[i - 1]);
    for (const auto& block : decoder_[i - 1]) x = block(x, level_window(opts.tlc_window, i));
    note(opts, level_name("dec", i), x);
  }
  return x;
}

template <typename T>
Var<T> Network<T>::forward(const Var<T>& image, const ForwardOptions& opts) const {
  auto features = encode(image, opts);
  auto lattice = ffm_lattice(features, opts);
  auto deep = decode(skips(features, lattice), bridge(features.back(), opts), opts);
  auto residual = head_(deep);
  note(opts, "head", residual);
  return add(image, residual);
}

template <typename T>
Var<T> Network<T>::forward_any_size(const Var<T>& image, const ForwardOptions& opts) const {
  check_input(image.shape(), false);
  const std::int64_t m = config_.spatial_multiple();
  const std::int64_t h = image.shape()[2], w = image.shape()[3];
  const std::int64_t ph = (m - h % m) % m, pw = (m - w % m) % m;
  return crop(forward(pad_reflect(image, ph, pw), opts), h, w);
}

// ---------------------------------------------------------------------------

std::int64_t count_params(const ModelConfig& config) {
  return Network<float>(config, 0, InitMode::kZero).parameters().count();
}

MacBreakdown estimate_macs(const ModelConfig& config, std::int64_t height, std::int64_t width, bool tlc) {
  config.validate();
  if (height < 1 || width < 1) throw ConfigError("estimate_macs: resolution must be positive");
  const std::int64_t m = config.spatial_multiple();
  const std::int64_t h0 = (height + m - 1) / m * m, w0 = (width + m - 1) / m * m;
  const int l = config.levels();
  const bool local_pool = tlc && config.tlc_window.has_value();
  MacBreakdown macs;
  auto pixels = [&](int level) { return (h0 >> (level - 1)) * (w0 >> (level - 1)); };
  auto naf = [&](int level) {
    const std::int64_t c = config.channels_at(level), hw = pixels(level);
    const std::int64_t sca = local_pool ? c * c * hw : c * c;
    // expand1 + depthwise + project1 + expand2 + project2, then SCA
    macs.conv += 2 * c * c * hw + 9 * 2 * c * hw + c * c * hw + 2 * c * c * hw + c * c * hw + sca;
  };
  auto down = [&](int level) {  // level -> level+1, 2x2 stride 2
    const std::int64_t c = config.channels_at(level);
    macs.conv += 4 * c * 2 * c * pixels(level + 1);
  };
  auto up = [&](int from_level) {  // 1x1 C -> 2C at the source resolution
    const std::int64_t c = config.channels_at(from_level);
    macs.conv += c * 2 * c * pixels(from_level);
  };

  macs.conv += 9 * 3 * config.width * pixels(1);  // intro
  for (int i = 1; i <= l; ++i) {
    for (int b = 0; b < config.enc_blocks[i - 1]; ++b) naf(i);
    down(i);
  }
  const auto ffm = config.effective_ffm();
  for (int i = 1; i < l; ++i) {
    for (int s = 1; s <= ffm[i - 1]; ++s) {
      up(i + 1);
      naf(i);
    }
  }
  if (config.uses_mhamb()) {
    const std::int64_t c = config.channels_at(l + 1), hw = pixels(l + 1);
    macs.conv += 4 * c * c * hw + 3 * 9 * c * hw;  // q/k/v/out 1x1 + q/k/v depthwise
    macs.attention += 2 * hw * hw * c;
  }
  for (int i = l; i >= 1; --i) {
    up(i + 1);
    for (int b = 0; b < config.dec_blocks[i - 1]; ++b) naf(i);
  }
  macs.conv += 9 * config.width * 3 * pixels(1);  // head
  return macs;
}

template struct Mhamb<float>;
template struct Mhamb<double>;
template class Network<float>;
template class Network<double>;

}  // namespace m3snet
