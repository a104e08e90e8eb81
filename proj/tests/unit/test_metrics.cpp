#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "m3snet/metrics.hpp"
#include "metric_oracle.hpp"

using namespace m3snet;
using namespace m3snet::testing;

namespace {

Image random_image(std::int64_t h, std::int64_t w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

Image perturbed(const Image& base, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  Image out = base;
  for (auto& v : out.pixels) v = std::clamp(static_cast<float>(v + sigma * rng.normal()), 0.0f, 1.0f);
  return out;
}

Image smooth_image(std::int64_t h, std::int64_t w) {
  Image img(h, w);
  for (int c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        img.at(c, y, x) = static_cast<float>(0.3 + 0.2 * std::sin(0.3 * x + c) * std::cos(0.2 * y));
  return img;
}

}  // namespace

TEST_CASE("psnr_loss") {
  auto target = Var<double>::constant(random_tensor({1, 3, 4, 4}, 1, 0, 1));
  Tensor<double> shifted = target.value();
  for (auto& v : shifted.data()) v += 0.1;
  auto loss = psnr_loss(Var<double>::constant(shifted), target);
  CHECK(loss.value().item() == doctest::Approx(-20.0).epsilon(1e-6));
  CHECK(psnr_loss(target, target).value().item() == doctest::Approx(-80.0).epsilon(1e-12));
  CHECK_THROWS_AS(psnr_loss(target, Var<double>::constant(Tensor<double>(Shape{1, 3, 4, 5}))), DimensionError);

  auto pred = Var<double>::leaf(random_tensor({2, 3, 5, 5}, 2, 0, 1));
  auto clean = Var<double>::constant(random_tensor({2, 3, 5, 5}, 3, 0, 1));
  auto r = gradcheck([&] { return psnr_loss(pred, clean); }, {{"pred", pred}}, kFiniteStep);
  CHECK(r.max_error <= kGradTolerance);
}

TEST_CASE("psnr_metric") {
  const Image a = random_image(16, 16, 4);
  CHECK(psnr_metric(a, a) == doctest::Approx(10.0 * std::log10(255.0 * 255.0 / kMetricMseFloor)));

  Image dark(12, 12, 100.0f / 255.0f), brighter(12, 12, 101.0f / 255.0f);
  CHECK(psnr_metric(brighter, dark) == doctest::Approx(20.0 * std::log10(255.0)).epsilon(1e-12));
  CHECK(psnr_metric(brighter, dark) == doctest::Approx(48.1308).epsilon(1e-5));

  double previous = INFINITY;
  for (double sigma : {0.002, 0.01, 0.03, 0.1, 0.3}) {
    const double p = psnr_metric(perturbed(a, sigma, 5), a);
    CHECK(p < previous);
    previous = p;
  }
  CHECK_THROWS_AS(psnr_metric(a, random_image(16, 15, 6)), DimensionError);
}

TEST_CASE("metrics agree with the clean-room oracle") {
  for (std::uint64_t i = 0; i < 20; ++i) {
    CAPTURE(i);
    const Image target = random_image(24 + i % 5, 31 - i % 4, 100 + i);
    const Image pred = perturbed(target, 0.02 + 0.01 * static_cast<double>(i), 200 + i);
    for (bool luma : {false, true}) {
      const auto mode = luma ? ChannelMode::kYChannel : ChannelMode::kRgb;
      CHECK(std::abs(psnr_metric(pred, target, mode) - oracle::psnr(pred, target, luma)) <= 1e-6);
      CHECK(std::abs(ssim_metric(pred, target, mode) - oracle::ssim(pred, target, luma)) <= 1e-6);
    }
  }
}

TEST_CASE("ssim properties") {
  const Image a = smooth_image(32, 40);
  const Image b = perturbed(a, 0.05, 7);
  CHECK(ssim_metric(a, a) == 1.0);
  CHECK(ssim_metric(a, a, ChannelMode::kYChannel) == 1.0);
  CHECK(ssim_metric(a, b) < 1.0);
  CHECK(ssim_metric(a, b) >= 0.0);
  CHECK(ssim_metric(a, b) == ssim_metric(b, a));

  // The luminance term is not exactly shift invariant; with matched local
  // means the effect of a common offset stays well below 1e-3.
  Image a2 = a, b2 = b;
  for (auto& v : a2.pixels) v += 0.1f;
  for (auto& v : b2.pixels) v += 0.1f;
  CHECK(std::abs(ssim_metric(a2, b2) - ssim_metric(a, b)) < 1e-3);

  CHECK_THROWS_AS(ssim_metric(Image(10, 20), Image(10, 20)), DimensionError);
}

TEST_CASE("y channel equals rgb on grey images") {
  Image g = random_image(20, 20, 8);
  for (std::int64_t i = 0; i < 400; ++i) g.pixels[400 + i] = g.pixels[800 + i] = g.pixels[i];
  Image h = perturbed(g, 0.05, 9);
  for (std::int64_t i = 0; i < 400; ++i) h.pixels[400 + i] = h.pixels[800 + i] = h.pixels[i];
  CHECK(psnr_metric(h, g, ChannelMode::kYChannel) == doctest::Approx(psnr_metric(h, g)).epsilon(1e-9));
  CHECK(ssim_metric(h, g, ChannelMode::kYChannel) == doctest::Approx(ssim_metric(h, g)).epsilon(1e-9));
}

TEST_CASE("table arithmetic") {
  CHECK(rmse_from_psnr(20.0) == doctest::Approx(0.1));
  CHECK(dssim_from_ssim(0.9) == doctest::Approx(0.05));
  CHECK(error_reduction(33.84, 33.75, ReductionKind::kPsnr).percent == doctest::Approx(1.031).epsilon(1e-3));
  CHECK(error_reduction(0.926, 0.925, ReductionKind::kSsim).percent == doctest::Approx(4.0 / 3.0).epsilon(1e-9));
  // 1 - 10^(-0.7 / 20) = 7.743%, which the paper prints as 7.8%.
  CHECK(error_reduction(32.62, 31.92, ReductionKind::kPsnr).percent == doctest::Approx(7.7429).epsilon(1e-4));
  CHECK(error_reduction(30.0, 30.0, ReductionKind::kPsnr).percent == 0.0);
  CHECK(error_reduction(0.9, 0.9, ReductionKind::kSsim).percent == 0.0);
  CHECK(error_reduction(31.0, 32.0, ReductionKind::kPsnr).percent < 0.0);
  const auto undefined = error_reduction(1.0, 1.0, ReductionKind::kSsim);
  CHECK_FALSE(undefined.defined);
  CHECK(undefined.percent == 0.0);
}

TEST_CASE("metric report") {
  MetricReport report;
  const Image a = smooth_image(16, 16);
  report.add("b", perturbed(a, 0.05, 10), a);
  report.add("a", a, a);
  CHECK(report.images.size() == 2);
  CHECK(report.mean_ssim() == doctest::Approx((report.images[0].ssim + 1.0) / 2));
  const auto csv = report.to_csv();
  CHECK(csv.rfind("image,psnr,ssim\nb,", 0) == 0);
  CHECK(csv.find("\na,") != std::string::npos);
  CHECK(report.to_text().find("mean images=2 mode=rgb") != std::string::npos);
  CHECK(parse_channel_mode("y") == ChannelMode::kYChannel);
  CHECK_THROWS_AS(parse_channel_mode("lab"), ConfigError);
}
