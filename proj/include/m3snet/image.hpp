#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "m3snet/tensor.hpp"

namespace m3snet {

/// Planar RGB image with samples in [0, 1] (values outside are allowed
/// in flight and clamped on quantisation).
struct Image {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> pixels;  // (3, height, width)

  Image() = default;
  Image(std::int64_t h, std::int64_t w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(3 * h * w), fill) {}

  float& at(int c, std::int64_t y, std::int64_t x) {
    return pixels[static_cast<std::size_t>((c * height + y) * width + x)];
  }
  float at(int c, std::int64_t y, std::int64_t x) const {
    return pixels[static_cast<std::size_t>((c * height + y) * width + x)];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Round-to-nearest 8-bit values of clamp(x, 0, 1) * 255, planar layout.
std::vector<std::uint8_t> quantize(const Image& image);
Image from_bytes(std::int64_t height, std::int64_t width, std::span<const std::uint8_t> planar);

/// Reads an 8-bit PNG (grey, palette and alpha are converted to RGB).
Image read_png(const std::filesystem::path& path);
/// Writes an 8-bit RGB PNG of the clamped, quantised image.
void write_png(const std::filesystem::path& path, const Image& image);

/// Stacks images of equal size into an (N, 3, H, W) tensor.
Tensor<float> to_batch(std::span<const Image> images);
Image from_batch(const Tensor<float>& batch, std::int64_t index);

Image flip(const Image& image, bool horizontal, bool vertical);
Image crop(const Image& image, std::int64_t top, std::int64_t left, std::int64_t height, std::int64_t width);
/// Mirror-pads the bottom/right edges up to at least the given extent.
Image pad_reflect_to(const Image& image, std::int64_t height, std::int64_t width);
Image clamp01(const Image& image);

}  // namespace m3snet
