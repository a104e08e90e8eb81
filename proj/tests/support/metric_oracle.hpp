#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "m3snet/image.hpp"

// Straightforward reimplementation of the evaluation metrics used as an
// oracle: 2-D window sums, two-pass moments, no shared code with the library.
namespace m3snet::oracle {

inline std::vector<double> channel(const Image& img, int c, bool luma) {
  std::vector<double> out(static_cast<std::size_t>(img.height * img.width));
  auto q = [](float v) {
    const double clamped = std::min(1.0, std::max(0.0, static_cast<double>(v)));
    return std::floor(clamped * 255.0 + 0.5);
  };
  for (std::int64_t y = 0; y < img.height; ++y)
    for (std::int64_t x = 0; x < img.width; ++x) {
      const auto i = static_cast<std::size_t>(y * img.width + x);
      out[i] = luma ? 0.299 * q(img.at(0, y, x)) + 0.587 * q(img.at(1, y, x)) + 0.114 * q(img.at(2, y, x))
                    : q(img.at(c, y, x));
    }
  return out;
}

inline double psnr(const Image& a, const Image& b, bool luma) {
  double sse = 0;
  std::size_t n = 0;
  for (int c = 0; c < (luma ? 1 : 3); ++c) {
    const auto pa = channel(a, c, luma), pb = channel(b, c, luma);
    for (std::size_t i = 0; i < pa.size(); ++i) sse += (pa[i] - pb[i]) * (pa[i] - pb[i]);
    n += pa.size();
  }
  const double mse = std::max(sse / static_cast<double>(n), 1e-8);
  return 20.0 * std::log10(255.0) - 10.0 * std::log10(mse);
}

inline double ssim(const Image& a, const Image& b, bool luma) {
  const double sigma = 1.5;
  double window[11][11];
  double wsum = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      window[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * sigma * sigma));
      wsum += window[i][j];
    }
  for (auto& row : window)
    for (double& v : row) v /= wsum;
  const double c1 = std::pow(0.01 * 255, 2), c2 = std::pow(0.03 * 255, 2);
  const std::int64_t w = a.width;
  double total = 0;
  const int planes = luma ? 1 : 3;
  for (int c = 0; c < planes; ++c) {
    const auto pa = channel(a, c, luma), pb = channel(b, c, luma);
    double plane_sum = 0;
    std::int64_t count = 0;
    for (std::int64_t y = 0; y + 11 <= a.height; ++y)
      for (std::int64_t x = 0; x + 11 <= a.width; ++x) {
        double ma = 0, mb = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            const auto k = static_cast<std::size_t>((y + i) * w + x + j);
            ma += window[i][j] * pa[k];
            mb += window[i][j] * pb[k];
          }
        double va = 0, vb = 0, cov = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            const auto k = static_cast<std::size_t>((y + i) * w + x + j);
            va += window[i][j] * (pa[k] - ma) * (pa[k] - ma);
            vb += window[i][j] * (pb[k] - mb) * (pb[k] - mb);
            cov += window[i][j] * (pa[k] - ma) * (pb[k] - mb);
          }
        plane_sum += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
    total += plane_sum / static_cast<double>(count);
  }
  return std::min(1.0, std::max(0.0, total / planes));
}

}  // namespace m3snet::oracle
