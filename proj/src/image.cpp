#include "m3snet/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace m3snet {

std::vector<std::uint8_t> quantize(const Image& image) {
  std::vector<std::uint8_t> out(image.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = std::clamp(static_cast<double>(image.pixels[i]), 0.0, 1.0);
    out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

Image from_bytes(std::int64_t height, std::int64_t width, std::span<const std::uint8_t> planar) {
  Image img(height, width);
  if (planar.size() != img.pixels.size()) throw DimensionError("from_bytes: expected 3*H*W samples");
  for (std::size_t i = 0; i < planar.size(); ++i) img.pixels[i] = static_cast<float>(planar[i]) / 255.0f;
  return img;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Image read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError(path.string() + ": not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed");
  }
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path.string() + ": corrupt PNG");
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::int64_t w = png_get_image_width(png, info);
  const std::int64_t h = png_get_image_height(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * static_cast<std::size_t>(h));
  rows.resize(static_cast<std::size_t>(h));
  for (std::int64_t y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Image img(h, w);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(rows[y][x * 3 + c]) / 255.0f;
  return img;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.height < 1 || image.width < 1) throw IoError("write_png: empty image");
  const auto bytes = quantize(image);
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  std::vector<png_byte> row(static_cast<std::size_t>(image.width * 3));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t plane = static_cast<std::size_t>(image.height * image.width);
  for (std::int64_t y = 0; y < image.height; ++y) {
    for (std::int64_t x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c)
        row[static_cast<std::size_t>(x * 3 + c)] =
            bytes[c * plane + static_cast<std::size_t>(y * image.width + x)];
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor<float> to_batch(std::span<const Image> images) {
  if (images.empty()) throw DimensionError("to_batch: no images");
  const auto h = images[0].height, w = images[0].width;
  const std::size_t per = static_cast<std::size_t>(3 * h * w);
  std::vector<float> data;
  data.reserve(per * images.size());
  for (const auto& img : images) {
    if (img.height != h || img.width != w) {
      throw DimensionError("to_batch: image of " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                           " does not match " + std::to_string(h) + "x" + std::to_string(w));
    }
    data.insert(data.end(), img.pixels.begin(), img.pixels.end());
  }
  return Tensor<float>(Shape{static_cast<std::int64_t>(images.size()), 3, h, w}, std::move(data));
}

Image from_batch(const Tensor<float>& batch, std::int64_t index) {
  require_rank(batch.shape(), 4, "from_batch", "batch");
  if (batch.shape()[1] != 3) throw DimensionError("from_batch: batch axis 1 (channels) must be 3");
  if (index < 0 || index >= batch.shape()[0]) throw DimensionError("from_batch: index out of range on axis 0");
  Image img(batch.shape()[2], batch.shape()[3]);
  const auto per = static_cast<std::int64_t>(img.pixels.size());
  std::copy(batch.ptr() + index * per, batch.ptr() + (index + 1) * per, img.pixels.begin());
  return img;
}

Image flip(const Image& image, bool horizontal, bool vertical) {
  Image out(image.height, image.width);
  for (int c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < image.height; ++y)
      for (std::int64_t x = 0; x < image.width; ++x)
        out.at(c, y, x) = image.at(c, vertical ? image.height - 1 - y : y, horizontal ? image.width - 1 - x : x);
  return out;
}

Image crop(const Image& image, std::int64_t top, std::int64_t left, std::int64_t height, std::int64_t width) {
  if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > image.height || left + width > image.width) {
    throw DimensionError("crop: window exceeds the image");
  }
  Image out(height, width);
  for (int c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < height; ++y)
      for (std::int64_t x = 0; x < width; ++x) out.at(c, y, x) = image.at(c, top + y, left + x);
  return out;
}

namespace {
std::int64_t mirror(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}
}  // namespace

Image pad_reflect_to(const Image& image, std::int64_t height, std::int64_t width) {
  const auto h = std::max(height, image.height), w = std::max(width, image.width);
  if (h == image.height && w == image.width) return image;
  Image out(h, w);
  for (int c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) out.at(c, y, x) = image.at(c, mirror(y, image.height), mirror(x, image.width));
  return out;
}

Image clamp01(const Image& image) {
  Image out = image;
  for (auto& v : out.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

}  // namespace m3snet
