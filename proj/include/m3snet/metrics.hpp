#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "m3snet/autodiff.hpp"
#include "m3snet/image.hpp"

namespace m3snet {

/// Negative PSNR with peak 1: 10 log10(MSE + eps). Scalar, differentiable.
template <typename T>
Var<T> psnr_loss(const Var<T>& pred, const Var<T>& target, T eps = T(1e-8));

enum class ChannelMode { kRgb, kYChannel };
std::string to_string(ChannelMode mode);
ChannelMode parse_channel_mode(std::string_view text);

inline constexpr double kMetricMseFloor = 1e-8;

/// PSNR in dB on 8-bit quantised samples, peak 255. MSE is floored at
/// kMetricMseFloor so identical images give a finite cap.
double psnr_metric(const Image& pred, const Image& target, ChannelMode mode = ChannelMode::kRgb);

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, L = 255, valid positions only, mean over channels. Result is
/// clamped to [0, 1].
double ssim_metric(const Image& pred, const Image& target, ChannelMode mode = ChannelMode::kRgb);

/// 8-bit planes the metrics operate on: three RGB planes, or one
/// Y = 0.299 R + 0.587 G + 0.114 B plane.
std::vector<std::vector<double>> metric_planes(const Image& image, ChannelMode mode);

double rmse_from_psnr(double psnr_db);
double dssim_from_ssim(double ssim);

enum class ReductionKind { kPsnr, kSsim };

struct Reduction {
  double percent = 0.0;
  bool defined = true;
};

/// Relative error reduction of `best` over `other`, in percent.
///   psnr: 1 - 10^((other - best) / 20)
///   ssim: (dssim(other) - dssim(best)) / dssim(other); undefined if dssim(other) == 0
Reduction error_reduction(double best, double other, ReductionKind kind);

struct ImageScore {
  std::string id;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  ChannelMode mode = ChannelMode::kRgb;
  std::vector<ImageScore> images;

  void add(std::string id, const Image& pred, const Image& target);
  double mean_psnr() const;
  double mean_ssim() const;
  std::string to_text() const;
  /// "image,psnr,ssim" header plus one row per image.
  std::string to_csv() const;
};

}  // namespace m3snet
