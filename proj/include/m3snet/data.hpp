#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "m3snet/image.hpp"
#include "m3snet/random.hpp"

namespace m3snet {

struct ImagePair {
  Image degraded;
  Image clean;
  std::string id;
};

enum class DegradationKind { kHazeRain, kBlur, kNoiseOnly };
enum class DepthKind { kConstant, kRamp, kFile };
enum class BlurKind { kBox, kMotion };

/// Observation model L = D(H) + gamma.
///   haze_rain: D(H) = H t - A t + A with t = exp(-alpha d)
///   blur:      D(H) = H * kernel (mirror borders)
///   noise_only: D(H) = H
/// gamma is zero-mean Gaussian with standard deviation noise_sigma; the
/// result is clamped to [0, 1].
struct DegradationSpec {
  DegradationKind kind = DegradationKind::kHazeRain;
  double airlight = 0.8;
  double alpha = 1.0;
  DepthKind depth = DepthKind::kConstant;
  double depth_value = 1.0;  // constant depth
  double depth_near = 0.5;   // ramp top / file value 0
  double depth_far = 2.0;    // ramp bottom / file value 1
  std::string depth_file;    // PNG, red channel mapped to [near, far]
  double noise_sigma = 0.0;
  BlurKind blur = BlurKind::kBox;
  int box_size = 5;
  double motion_length = 9.0;
  double motion_angle = 0.0;  // degrees

  /// Throws ConfigError on the first out-of-range field.
  void validate() const;
  std::vector<std::pair<std::string, std::string>> to_key_values() const;
  /// Returns false for keys it does not own.
  bool apply(std::string_view key, std::string_view value);
  std::string to_text() const;
};

/// Depth field for a height x width image.
std::vector<double> depth_map(const DegradationSpec& spec, std::int64_t height, std::int64_t width);
/// Normalised blur kernel, square with odd side.
std::vector<double> blur_kernel(const DegradationSpec& spec, int& side);

Image degrade(const Image& clean, const DegradationSpec& spec, std::uint64_t seed);

/// Same random window (mirror padded when the image is smaller) from both images.
ImagePair sample_patch(const ImagePair& pair, std::int64_t size, Rng& rng);

struct FlipMask {
  bool horizontal = false;
  bool vertical = false;
};
ImagePair apply_flips(const ImagePair& pair, FlipMask mask);
/// Independent fair coin per axis, shared by both images.
ImagePair augment(const ImagePair& pair, Rng& rng);

struct Dataset {
  std::vector<ImagePair> pairs;
  std::vector<std::string> warnings;
};

/// Reads <root>/input/*.png and <root>/target/*.png matched by file stem,
/// sorted by stem. Unmatched files produce warnings; no pairs is an error.
Dataset load_dataset(const std::filesystem::path& root);
void save_dataset(const std::filesystem::path& root, const std::vector<ImagePair>& pairs);

/// Smooth gradients, flat shapes and striped textures.
Image synthesize_clean(std::int64_t height, std::int64_t width, Rng& rng);
std::vector<ImagePair> synthesize_pairs(int count, std::int64_t size, const DegradationSpec& spec,
                                        std::uint64_t seed);
/// save_dataset plus <root>/spec.txt describing the degradation.
void write_synthetic_dataset(const std::filesystem::path& root, int count, std::int64_t size,
                             const DegradationSpec& spec, std::uint64_t seed);

/// Endless epoch-shuffled index stream. Item j of the stream depends only on
/// (seed, j), so any position can be reproduced without replaying the stream.
class IndexStream {
 public:
  IndexStream(std::size_t items, std::uint64_t seed);
  std::size_t at(std::uint64_t position) const;
  std::vector<std::size_t> permutation(std::uint64_t epoch) const;

 private:
  std::size_t items_;
  std::uint64_t seed_;
};

}  // namespace m3snet
