#include "m3snet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "m3snet/text.hpp"

namespace m3snet {

namespace {

const char* kind_name(DegradationKind k) {
  switch (k) {
    case DegradationKind::kHazeRain: return "haze_rain";
    case DegradationKind::kBlur: return "blur";
    case DegradationKind::kNoiseOnly: return "noise_only";
  }
  return "haze_rain";
}

const char* depth_name(DepthKind k) {
  switch (k) {
    case DepthKind::kConstant: return "constant";
    case DepthKind::kRamp: return "ramp";
    case DepthKind::kFile: return "file";
  }
  return "constant";
}

std::int64_t mirror(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i = ((i % period) + period) % period;
  return i < n ? i : period - i;
}

}  // namespace

void DegradationSpec::validate() const {
  if (!(airlight >= 0.0 && airlight <= 1.0)) throw ConfigError("airlight must lie in [0, 1]");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be finite and >= 0");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("noise_sigma must be finite and >= 0");
  if (depth == DepthKind::kConstant && !(depth_value >= 0.0)) throw ConfigError("depth_value must be >= 0");
  if (depth != DepthKind::kConstant &&
      !(depth_near >= 0.0 && depth_far >= 0.0 && std::isfinite(depth_near) && std::isfinite(depth_far))) {
    throw ConfigError("depth_near and depth_far must be finite and >= 0");
  }
  if (depth == DepthKind::kFile && depth_file.empty()) throw ConfigError("depth = file needs depth_file");
  if (kind == DegradationKind::kBlur) {
    if (blur == BlurKind::kBox && (box_size < 1 || box_size % 2 == 0)) {
      throw ConfigError("box_size must be odd and >= 1");
    }
    if (blur == BlurKind::kMotion && !(motion_length >= 1.0 && motion_length <= 255.0)) {
      throw ConfigError("motion_length must lie in [1, 255]");
    }
    if (blur == BlurKind::kMotion && !std::isfinite(motion_angle)) throw ConfigError("motion_angle must be finite");
  }
}

std::vector<std::pair<std::string, std::string>> DegradationSpec::to_key_values() const {
  return {
      {"kind", kind_name(kind)},
      {"airlight", format_real(airlight)},
      {"alpha", format_real(alpha)},
      {"depth", depth_name(depth)},
      {"depth_value", format_real(depth_value)},
      {"depth_near", format_real(depth_near)},
      {"depth_far", format_real(depth_far)},
      {"depth_file", depth_file},
      {"noise_sigma", format_real(noise_sigma)},
      {"blur", blur == BlurKind::kBox ? "box" : "motion"},
      {"box_size", std::to_string(box_size)},
      {"motion_length", format_real(motion_length)},
      {"motion_angle", format_real(motion_angle)},
  };
}

bool DegradationSpec::apply(std::string_view key, std::string_view value) {
  if (key == "kind") {
    if (value == "haze_rain") kind = DegradationKind::kHazeRain;
    else if (value == "blur") kind = DegradationKind::kBlur;
    else if (value == "noise_only") kind = DegradationKind::kNoiseOnly;
    else throw ConfigError("kind must be haze_rain|blur|noise_only, got '" + std::string(value) + "'");
  } else if (key == "airlight") {
    airlight = parse_real(key, value);
  } else if (key == "alpha") {
    alpha = parse_real(key, value);
  } else if (key == "depth") {
    if (value == "constant") depth = DepthKind::kConstant;
    else if (value == "ramp") depth = DepthKind::kRamp;
    else if (value == "file") depth = DepthKind::kFile;
    else throw ConfigError("depth must be constant|ramp|file, got '" + std::string(value) + "'");
  } else if (key == "depth_value") {
    depth_value = parse_real(key, value);
  } else if (key == "depth_near") {
    depth_near = parse_real(key, value);
  } else if (key == "depth_far") {
    depth_far = parse_real(key, value);
  } else if (key == "depth_file") {
    depth_file = std::string(value);
  } else if (key == "noise_sigma") {
    noise_sigma = parse_real(key, value);
  } else if (key == "blur") {
    if (value == "box") blur = BlurKind::kBox;
    else if (value == "motion") blur = BlurKind::kMotion;
    else throw ConfigError("blur must be box|motion, got '" + std::string(value) + "'");
  } else if (key == "box_size") {
    box_size = parse_int(key, value);
  } else if (key == "motion_length") {
    motion_length = parse_real(key, value);
  } else if (key == "motion_angle") {
    motion_angle = parse_real(key, value);
  } else {
    return false;
  }
  return true;
}

std::string DegradationSpec::to_text() const {
  std::string s;
  for (const auto& [k, v] : to_key_values()) s += k + "=" + v + "\n";
  return s;
}

std::vector<double> depth_map(const DegradationSpec& spec, std::int64_t height, std::int64_t width) {
  const std::size_t n = static_cast<std::size_t>(height * width);
  switch (spec.depth) {
    case DepthKind::kConstant: return std::vector<double>(n, spec.depth_value);
    case DepthKind::kRamp: {
      std::vector<double> d(n);
      for (std::int64_t y = 0; y < height; ++y) {
        const double f = height > 1 ? static_cast<double>(y) / static_cast<double>(height - 1) : 0.0;
        std::fill_n(d.begin() + y * width, width, spec.depth_near + (spec.depth_far - spec.depth_near) * f);
      }
      return d;
    }
    case DepthKind::kFile: {
      const Image img = read_png(spec.depth_file);
      if (img.height != height || img.width != width) {
        throw DimensionError("depth file " + spec.depth_file + " is " + std::to_string(img.height) + "x" +
                             std::to_string(img.width) + ", image is " + std::to_string(height) + "x" +
                             std::to_string(width));
      }
      std::vector<double> d(n);
      for (std::size_t i = 0; i < n; ++i) {
        d[i] = spec.depth_near + (spec.depth_far - spec.depth_near) * img.pixels[i];
      }
      return d;
    }
  }
  return {};
}

std::vector<double> blur_kernel(const DegradationSpec& spec, int& side) {
  if (spec.blur == BlurKind::kBox) {
    side = spec.box_size;
    return std::vector<double>(static_cast<std::size_t>(side * side), 1.0 / (side * side));
  }
  const double len = spec.motion_length;
  side = static_cast<int>(std::ceil(len));
  if (side % 2 == 0) ++side;
  std::vector<double> k(static_cast<std::size_t>(side * side), 0.0);
  const double theta = spec.motion_angle * std::numbers::pi / 180.0;
  const double dx = std::cos(theta), dy = -std::sin(theta);
  const double c = side / 2;
  const int samples = 8 * side;
  for (int s = 0; s < samples; ++s) {
    const double t = (len - 1.0) * ((s + 0.5) / samples - 0.5);
    const double px = c + t * dx, py = c + t * dy;
    const int x0 = static_cast<int>(std::floor(px)), y0 = static_cast<int>(std::floor(py));
    const double fx = px - x0, fy = py - y0;
    const double w[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
    const int xs[4] = {x0, x0 + 1, x0, x0 + 1}, ys[4] = {y0, y0, y0 + 1, y0 + 1};
    for (int q = 0; q < 4; ++q) {
      if (xs[q] >= 0 && xs[q] < side && ys[q] >= 0 && ys[q] < side) k[ys[q] * side + xs[q]] += w[q];
    }
  }
  double total = 0.0;
  for (double v : k) total += v;
  for (double& v : k) v /= total;
  return k;
}

Image degrade(const Image& clean, const DegradationSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto h = clean.height, w = clean.width;
  const std::size_t plane = static_cast<std::size_t>(h * w);
  std::vector<double> out(clean.pixels.size());
  switch (spec.kind) {
    case DegradationKind::kHazeRain: {
      const auto d = depth_map(spec, h, w);
      for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
          const double t = std::exp(-spec.alpha * d[i]);
          const double hv = clean.pixels[c * plane + i];
          out[c * plane + i] = hv * t - spec.airlight * t + spec.airlight;
        }
      break;
    }
    case DegradationKind::kBlur: {
      int side = 1;
      const auto k = blur_kernel(spec, side);
      const int r = side / 2;
      for (int c = 0; c < 3; ++c)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t x = 0; x < w; ++x) {
            double s = 0.0;
            for (int ky = 0; ky < side; ++ky)
              for (int kx = 0; kx < side; ++kx) {
                const double kv = k[ky * side + kx];
                if (kv != 0.0) s += kv * clean.at(c, mirror(y + ky - r, h), mirror(x + kx - r, w));
              }
            out[c * plane + y * w + x] = s;
          }
      break;
    }
    case DegradationKind::kNoiseOnly:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = clean.pixels[i];
      break;
  }
  Image result(h, w);
  Rng rng(seed);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double noisy = spec.noise_sigma > 0.0 ? out[i] + spec.noise_sigma * rng.normal() : out[i];
    result.pixels[i] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
  }
  return result;
}

ImagePair sample_patch(const ImagePair& pair, std::int64_t size, Rng& rng) {
  if (pair.degraded.height != pair.clean.height || pair.degraded.width != pair.clean.width) {
    throw DimensionError("sample_patch: pair '" + pair.id + "' has mismatched sizes");
  }
  const Image a = pad_reflect_to(pair.degraded, size, size);
  const Image b = pad_reflect_to(pair.clean, size, size);
  const auto top = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(a.height - size + 1)));
  const auto left = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(a.width - size + 1)));
  return {crop(a, top, left, size, size), crop(b, top, left, size, size), pair.id};
}

ImagePair apply_flips(const ImagePair& pair, FlipMask mask) {
  if (!mask.horizontal && !mask.vertical) return pair;
  return {flip(pair.degraded, mask.horizontal, mask.vertical), flip(pair.clean, mask.horizontal, mask.vertical),
          pair.id};
}

ImagePair augment(const ImagePair& pair, Rng& rng) {
  FlipMask mask;
  mask.horizontal = rng.coin();
  mask.vertical = rng.coin();
  return apply_flips(pair, mask);
}

namespace {

std::map<std::string, std::filesystem::path> list_pngs(const std::filesystem::path& dir) {
  std::map<std::string, std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) throw IoError("missing directory " + dir.string());
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png") out.emplace(entry.path().stem().string(), entry.path());
  }
  return out;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& root) {
  const auto inputs = list_pngs(root / "input");
  const auto targets = list_pngs(root / "target");
  Dataset ds;
  for (const auto& [stem, path] : inputs) {
    const auto it = targets.find(stem);
    if (it == targets.end()) {
      ds.warnings.push_back("no target for " + path.string() + ", skipped");
      continue;
    }
    ImagePair pair{read_png(path), read_png(it->second), stem};
    if (pair.degraded.height != pair.clean.height || pair.degraded.width != pair.clean.width) {
      throw DimensionError("pair '" + stem + "': input and target sizes differ");
    }
    ds.pairs.push_back(std::move(pair));
  }
  for (const auto& [stem, path] : targets) {
    if (!inputs.contains(stem)) ds.warnings.push_back("no input for " + path.string() + ", skipped");
  }
  if (ds.pairs.empty()) throw IoError("dataset " + root.string() + " contains no matched input/target pairs");
  return ds;
}

void save_dataset(const std::filesystem::path& root, const std::vector<ImagePair>& pairs) {
  std::filesystem::create_directories(root / "input");
  std::filesystem::create_directories(root / "target");
  for (const auto& p : pairs) {
    write_png(root / "input" / (p.id + ".png"), p.degraded);
    write_png(root / "target" / (p.id + ".png"), p.clean);
  }
}

Image synthesize_clean(std::int64_t height, std::int64_t width, Rng& rng) {
  Image img(height, width);
  float c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = static_cast<float>(rng.uniform(0.1, 0.9));
    c1[c] = static_cast<float>(rng.uniform(0.1, 0.9));
  }
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double gx = std::cos(angle), gy = std::sin(angle);
  const double span = std::abs(gx) * width + std::abs(gy) * height;
  for (std::int64_t y = 0; y < height; ++y)
    for (std::int64_t x = 0; x < width; ++x) {
      double f = ((x - width / 2.0) * gx + (y - height / 2.0) * gy) / span + 0.5;
      f = std::clamp(f, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(c0[c] + (c1[c] - c0[c]) * f);
    }

  const int shapes = 4 + static_cast<int>(rng.below(7));
  for (int s = 0; s < shapes; ++s) {
    const int type = static_cast<int>(rng.below(3));  // rectangle, disk, striped rectangle
    float col[3];
    for (auto& v : col) v = static_cast<float>(rng.uniform(0.0, 1.0));
    const double cx = rng.uniform(0.0, static_cast<double>(width));
    const double cy = rng.uniform(0.0, static_cast<double>(height));
    const double rx = rng.uniform(0.05, 0.3) * width, ry = rng.uniform(0.05, 0.3) * height;
    const double period = rng.uniform(3.0, 12.0), phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double sa = rng.uniform(0.0, std::numbers::pi);
    for (std::int64_t y = 0; y < height; ++y)
      for (std::int64_t x = 0; x < width; ++x) {
        const double u = (x + 0.5 - cx) / rx, v = (y + 0.5 - cy) / ry;
        const bool inside = type == 1 ? u * u + v * v <= 1.0 : std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
        if (!inside) continue;
        double gain = 1.0;
        if (type == 2) {
          const double t = (x * std::cos(sa) + y * std::sin(sa)) * 2.0 * std::numbers::pi / period + phase;
          gain = 0.65 + 0.35 * std::sin(t);
        }
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(col[c] * gain);
      }
  }
  return img;
}

std::vector<ImagePair> synthesize_pairs(int count, std::int64_t size, const DegradationSpec& spec,
                                        std::uint64_t seed) {
  if (count < 1) throw ConfigError("count must be >= 1");
  if (size < 1) throw ConfigError("size must be >= 1");
  spec.validate();
  std::vector<ImagePair> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(2 * i)));
    Image clean = from_bytes(size, size, quantize(synthesize_clean(size, size, rng)));
    Image degraded = from_bytes(size, size, quantize(degrade(clean, spec, mix_seed(seed, 2 * i + 1))));
    char id[16];
    std::snprintf(id, sizeof id, "%04d", i);
    out.push_back({std::move(degraded), std::move(clean), id});
  }
  return out;
}

void write_synthetic_dataset(const std::filesystem::path& root, int count, std::int64_t size,
                             const DegradationSpec& spec, std::uint64_t seed) {
  const auto pairs = synthesize_pairs(count, size, spec, seed);
  save_dataset(root, pairs);
  std::ofstream f(root / "spec.txt");
  f << "# synthetic pairs: L = D(H) + gamma, clamped to [0, 1]\n";
  f << "count=" << count << "\nsize=" << size << "\nseed=" << seed << '\n' << spec.to_text();
  if (!f) throw IoError("cannot write " + (root / "spec.txt").string());
}

IndexStream::IndexStream(std::size_t items, std::uint64_t seed) : items_(items), seed_(seed) {
  if (items == 0) throw ConfigError("IndexStream: no items");
}

std::vector<std::size_t> IndexStream::permutation(std::uint64_t epoch) const {
  std::vector<std::size_t> perm(items_);
  for (std::size_t i = 0; i < items_; ++i) perm[i] = i;
  Rng rng(mix_seed(seed_ ^ 0x5eedf00dULL, epoch));
  for (std::size_t i = items_; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  return perm;
}

std::size_t IndexStream::at(std::uint64_t position) const {
  return permutation(position / items_)[position % items_];
}

}  // namespace m3snet
