#include "m3snet/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

#include "m3snet/ops.hpp"

namespace m3snet {

template <typename T>
Var<T> psnr_loss(const Var<T>& pred, const Var<T>& target, T eps) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("psnr_loss: pred " + to_string(pred.shape()) + " vs target " + to_string(target.shape()));
  }
  const auto diff = sub(pred, target);
  const auto mse = mean_all(mul(diff, diff));
  return scale(log(add_scalar(mse, eps)), T(10) / std::log(T(10)));
}

template Var<float> psnr_loss(const Var<float>&, const Var<float>&, float);
template Var<double> psnr_loss(const Var<double>&, const Var<double>&, double);

std::string to_string(ChannelMode mode) { return mode == ChannelMode::kRgb ? "rgb" : "y_channel"; }

ChannelMode parse_channel_mode(std::string_view text) {
  if (text == "rgb") return ChannelMode::kRgb;
  if (text == "y" || text == "y_channel") return ChannelMode::kYChannel;
  throw ConfigError("unknown channel mode '" + std::string(text) + "' (expected rgb or y_channel)");
}

std::vector<std::vector<double>> metric_planes(const Image& image, ChannelMode mode) {
  const auto bytes = quantize(image);
  const std::size_t plane = static_cast<std::size_t>(image.height * image.width);
  if (mode == ChannelMode::kRgb) {
    std::vector<std::vector<double>> out(3, std::vector<double>(plane));
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i) out[c][i] = bytes[c * plane + i];
    return out;
  }
  std::vector<std::vector<double>> out(1, std::vector<double>(plane));
  for (std::size_t i = 0; i < plane; ++i) {
    out[0][i] = 0.299 * bytes[i] + 0.587 * bytes[plane + i] + 0.114 * bytes[2 * plane + i];
  }
  return out;
}

namespace {

void check_sizes(const Image& a, const Image& b, const char* op) {
  if (a.height != b.height || a.width != b.width) {
    throw DimensionError(std::string(op) + ": image sizes differ (" + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) +
                         ")");
  }
}

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;

std::array<double, kWindow> gaussian_taps() {
  std::array<double, kWindow> g{};
  double total = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

// Separable Gaussian filter over valid positions.
std::vector<double> filter_valid(const std::vector<double>& src, std::int64_t h, std::int64_t w) {
  static const auto g = gaussian_taps();
  const std::int64_t oh = h - kWindow + 1, ow = w - kWindow + 1;
  std::vector<double> rows(static_cast<std::size_t>(h * ow));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += g[k] * src[y * w + x + k];
      rows[y * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh * ow));
  for (std::int64_t y = 0; y < oh; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += g[k] * rows[(y + k) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

double ssim_plane(const std::vector<double>& a, const std::vector<double>& b, std::int64_t h, std::int64_t w) {
  constexpr double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  constexpr double c2 = (0.03 * 255.0) * (0.03 * 255.0);
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto mu_a = filter_valid(a, h, w), mu_b = filter_valid(b, h, w);
  const auto e_aa = filter_valid(aa, h, w), e_bb = filter_valid(bb, h, w), e_ab = filter_valid(ab, h, w);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double va = e_aa[i] - mu_a[i] * mu_a[i];
    const double vb = e_bb[i] - mu_b[i] * mu_b[i];
    const double cov = e_ab[i] - mu_a[i] * mu_b[i];
    total += ((2 * (mu_a[i] * mu_b[i]) + c1) * (2 * cov + c2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

}  // namespace

double psnr_metric(const Image& pred, const Image& target, ChannelMode mode) {
  check_sizes(pred, target, "psnr_metric");
  const auto a = metric_planes(pred, mode), b = metric_planes(target, mode);
  double sse = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < a.size(); ++c) {
    for (std::size_t i = 0; i < a[c].size(); ++i) {
      const double d = a[c][i] - b[c][i];
      sse += d * d;
    }
    count += a[c].size();
  }
  const double mse = std::max(sse / static_cast<double>(count), kMetricMseFloor);
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double ssim_metric(const Image& pred, const Image& target, ChannelMode mode) {
  check_sizes(pred, target, "ssim_metric");
  if (pred.height < kWindow || pred.width < kWindow) {
    throw DimensionError("ssim_metric: images must be at least 11x11");
  }
  const auto a = metric_planes(pred, mode), b = metric_planes(target, mode);
  double total = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) total += ssim_plane(a[c], b[c], pred.height, pred.width);
  return std::clamp(total / static_cast<double>(a.size()), 0.0, 1.0);
}

double rmse_from_psnr(double psnr_db) { return std::sqrt(std::pow(10.0, -psnr_db / 10.0)); }

double dssim_from_ssim(double ssim) { return (1.0 - ssim) / 2.0; }

Reduction error_reduction(double best, double other, ReductionKind kind) {
  if (kind == ReductionKind::kPsnr) return {100.0 * (1.0 - std::pow(10.0, (other - best) / 20.0)), true};
  const double d_other = dssim_from_ssim(other);
  if (d_other == 0.0) return {0.0, false};
  return {100.0 * (d_other - dssim_from_ssim(best)) / d_other, true};
}

void MetricReport::add(std::string id, const Image& pred, const Image& target) {
  images.push_back({std::move(id), psnr_metric(pred, target, mode), ssim_metric(pred, target, mode)});
}

double MetricReport::mean_psnr() const {
  if (images.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : images) s += r.psnr_db;
  return s / static_cast<double>(images.size());
}

double MetricReport::mean_ssim() const {
  if (images.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : images) s += r.ssim;
  return s / static_cast<double>(images.size());
}

std::string MetricReport::to_text() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  for (const auto& r : images) os << r.id << " psnr=" << r.psnr_db << " ssim=" << r.ssim << '\n';
  os << "mean images=" << images.size() << " mode=" << to_string(mode) << " psnr=" << mean_psnr()
     << " ssim=" << mean_ssim() << '\n';
  return os.str();
}

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "image,psnr,ssim\n";
  for (const auto& r : images) os << r.id << ',' << r.psnr_db << ',' << r.ssim << '\n';
  return os.str();
}

}  // namespace m3snet
