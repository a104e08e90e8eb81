#include <cmath>
#include <numeric>

#include "doctest.h"
#include "gradcheck.hpp"
#include "m3snet/ops.hpp"

using namespace m3snet;
using namespace m3snet::testing;

namespace {

using VarD = Var<double>;

struct ConvCase {
  const char* name;
  Shape input;
  Shape weight;
  Conv2dOptions opts;
};

// One case per kernel path: pointwise, patchwise, depthwise 3x3, and the
// generic im2col route with strides, padding and groups.
const ConvCase kConvCases[] = {
    {"pointwise", {2, 5, 9, 11}, {6, 5, 1, 1}, {1, 0, 1}},
    {"pointwise wide", {1, 9, 4, 8}, {7, 9, 1, 1}, {1, 0, 1}},
    {"patchwise 2x2", {2, 3, 8, 6}, {5, 3, 2, 2}, {2, 0, 1}},
    {"patchwise 4x4", {1, 2, 8, 8}, {3, 2, 4, 4}, {4, 0, 1}},
    {"depthwise 3x3", {2, 6, 7, 19}, {6, 1, 3, 3}, {1, 1, 6}},
    {"strided padded", {2, 3, 7, 6}, {4, 3, 3, 3}, {2, 1, 1}},
    {"grouped", {1, 4, 6, 5}, {6, 2, 3, 3}, {1, 1, 2}},
    {"grouped pointwise", {1, 4, 5, 5}, {2, 2, 1, 1}, {1, 0, 2}},
    {"valid 3x3", {1, 2, 5, 6}, {3, 2, 3, 3}, {1, 0, 1}},
    {"odd stride 2x2", {1, 2, 7, 7}, {2, 2, 2, 2}, {2, 0, 1}},
};

}  // namespace

TEST_CASE("conv2d center of all-ones 3x3 with padding is 9") {
  auto x = Var<float>::constant(Tensor<float>(Shape{1, 1, 3, 3}, 1.0f));
  auto w = Var<float>::constant(Tensor<float>(Shape{1, 1, 3, 3}, 1.0f));
  auto y = conv2d<float>(x, w, std::nullopt, {1, 1, 1});
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y.value().at(0, 0, 1, 1) == 9.0f);
  CHECK(y.value().at(0, 0, 0, 0) == 4.0f);
}

TEST_CASE("conv2d 1x1 unit weight is the identity") {
  auto xt = random_tensor_f({2, 1, 5, 7}, 1);
  auto y = conv2d<float>(Var<float>::constant(xt), Var<float>::constant(Tensor<float>(Shape{1, 1, 1, 1}, 1.0f)),
                  Var<float>::constant(Tensor<float>(Shape{1}, 0.0f)));
  CHECK(y.value().data().size() == xt.size());
  CHECK(max_abs_diff(y.value(), xt) == 0.0);
}

TEST_CASE("grouped conv equals dense conv with block-diagonal weight") {
  const auto x = random_tensor({2, 4, 8, 8}, 2);
  const auto wg = random_tensor({4, 1, 3, 3}, 3);
  Tensor<double> dense(Shape{4, 4, 3, 3});
  for (int o = 0; o < 4; ++o)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) dense.at(o, o, ky, kx) = wg.at(o, 0, ky, kx);
  auto a = conv2d<double>(VarD::constant(x), VarD::constant(wg), std::nullopt, {1, 1, 4});
  auto b = conv2d<double>(VarD::constant(x), VarD::constant(dense), std::nullopt, {1, 1, 1});
  CHECK(max_abs_diff(a.value(), b.value()) < 1e-12);
}

TEST_CASE("conv2d matches the naive oracle on every kernel path") {
  for (const auto& c : kConvCases) {
    CAPTURE(c.name);
    const auto x = random_tensor(c.input, 10);
    const auto w = random_tensor(c.weight, 11);
    const auto b = random_tensor({c.weight[0]}, 12);
    const auto expect = naive_conv2d(x, w, &b, c.opts.stride, c.opts.padding, c.opts.groups);
    auto got = conv2d<double>(VarD::constant(x), VarD::constant(w), VarD::constant(b), c.opts);
    REQUIRE(got.shape() == expect.shape());
    CHECK(max_abs_diff(got.value(), expect) < 1e-12);

    auto gotf = conv2d<float>(Var<float>::constant(x.cast<float>()), Var<float>::constant(w.cast<float>()),
                       Var<float>::constant(b.cast<float>()), c.opts);
    CHECK(max_abs_diff(gotf.value(), expect.cast<float>()) < 1e-5);
  }
}

TEST_CASE("conv2d gradients pass the finite-difference check on every kernel path") {
  for (const auto& c : kConvCases) {
    CAPTURE(c.name);
    auto x = VarD::leaf(random_tensor(c.input, 20));
    auto w = VarD::leaf(random_tensor(c.weight, 21));
    auto b = VarD::leaf(random_tensor({c.weight[0]}, 22));
    auto r = gradcheck([&] { return probe(conv2d<double>(x, w, b, c.opts)); }, {{"x", x}, {"w", w}, {"b", b}},
                       kFiniteStep);
    CAPTURE(r.worst);
    CHECK(r.max_error <= kGradTolerance);
  }
}

TEST_CASE("conv2d shape errors name the axis") {
  auto x = VarD::constant(Tensor<double>(Shape{1, 6, 4, 4}));
  auto w = VarD::constant(Tensor<double>(Shape{4, 2, 3, 3}));
  CHECK_THROWS_WITH_AS(conv2d<double>(x, w, std::nullopt, {1, 1, 4}), doctest::Contains("axis 1"), DimensionError);
  auto w2 = VarD::constant(Tensor<double>(Shape{4, 5, 3, 3}));
  CHECK_THROWS_AS(conv2d<double>(x, w2, std::nullopt, {1, 1, 1}), DimensionError);
  auto w3 = VarD::constant(Tensor<double>(Shape{4, 6, 7, 7}));
  CHECK_THROWS_AS(conv2d<double>(x, w3, std::nullopt, {1, 0, 1}), DimensionError);
}

TEST_CASE("layer_norm_channel statistics") {
  SUBCASE("constant input normalises to zero") {
    auto x = VarD::constant(Tensor<double>(Shape{1, 4, 2, 2}, 3.5));
    auto y = layer_norm_channel(x, VarD::constant(Tensor<double>(Shape{4}, 1.0)),
                                VarD::constant(Tensor<double>(Shape{4}, 0.0)), 1e-6);
    for (double v : y.value().data()) CHECK(v == 0.0);
  }
  SUBCASE("[1, 3] becomes [-1, 1]") {
    auto x = VarD::constant(Tensor<double>(Shape{1, 2, 1, 1}, std::vector<double>{1.0, 3.0}));
    auto y = layer_norm_channel(x, VarD::constant(Tensor<double>(Shape{2}, 1.0)),
                                VarD::constant(Tensor<double>(Shape{2}, 0.0)), 1e-12);
    CHECK(y.value()[0] == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(y.value()[1] == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("random input has zero channel mean at every pixel") {
    auto x = Var<float>::constant(random_tensor_f({2, 7, 5, 6}, 5, -3, 5));
    auto y = layer_norm_channel(x, Var<float>::constant(Tensor<float>(Shape{7}, 1.0f)),
                                Var<float>::constant(Tensor<float>(Shape{7}, 0.0f)), 1e-6f);
    double worst = 0;
    for (int n = 0; n < 2; ++n)
      for (int yy = 0; yy < 5; ++yy)
        for (int xx = 0; xx < 6; ++xx) {
          double m = 0;
          for (int c = 0; c < 7; ++c) m += y.value().at(n, c, yy, xx);
          worst = std::max(worst, std::abs(m / 7));
        }
    CHECK(worst < 1e-6);
  }
  SUBCASE("gain length mismatch") {
    auto x = VarD::constant(Tensor<double>(Shape{1, 3, 2, 2}));
    CHECK_THROWS_AS(layer_norm_channel(x, VarD::constant(Tensor<double>(Shape{2}, 1.0)),
                                       VarD::constant(Tensor<double>(Shape{3}, 0.0)), 1e-6),
                    DimensionError);
  }
}

TEST_CASE("softmax_lastdim") {
  auto s = softmax_lastdim(VarD::constant(Tensor<double>(Shape{1, 3}, 0.0)));
  for (double v : s.value().data()) CHECK(v == doctest::Approx(1.0 / 3.0));

  auto r = softmax_lastdim(VarD::constant(random_tensor({4, 5, 13}, 6, -20, 20)));
  for (int row = 0; row < 20; ++row) {
    double total = 0;
    for (int j = 0; j < 13; ++j) {
      const double v = r.value()[static_cast<std::size_t>(row * 13 + j)];
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }
}

TEST_CASE("pooling") {
  auto c = adaptive_avg_pool_to_1(VarD::constant(Tensor<double>(Shape{2, 3, 4, 5}, 0.25)));
  CHECK(c.shape() == Shape{2, 3, 1, 1});
  for (double v : c.value().data()) CHECK(v == doctest::Approx(0.25));

  const auto x = random_tensor({2, 3, 6, 5}, 7);
  auto global = adaptive_avg_pool_to_1(VarD::constant(x));
  for (int window : {6, 9}) {
    auto local = local_avg_pool(VarD::constant(x), window);
    double worst = 0;
    for (int n = 0; n < 2; ++n)
      for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < 6; ++y)
          for (int xx = 0; xx < 5; ++xx)
            worst = std::max(worst, std::abs(local.value().at(n, ch, y, xx) - global.value().at(n, ch, 0, 0)));
    CHECK(worst <= 1e-12);
  }
  CHECK_THROWS_AS(local_avg_pool(VarD::constant(x), 0), ConfigError);
}

TEST_CASE("local_avg_pool clamps the box inside the image") {
  Tensor<double> x(Shape{1, 1, 1, 4}, std::vector<double>{1, 2, 3, 4});
  auto y = local_avg_pool(VarD::constant(x), 2);
  // Boxes start at clamp(x - (window - 1) / 2, 0, W - window).
  std::vector<double> expect;
  for (int i = 0; i < 4; ++i) {
    const int start = std::clamp(i, 0, 2);
    expect.push_back((x[static_cast<std::size_t>(start)] + x[static_cast<std::size_t>(start + 1)]) / 2);
  }
  for (int i = 0; i < 4; ++i) CHECK(y.value()[static_cast<std::size_t>(i)] == doctest::Approx(expect[i]));
}

TEST_CASE("pixel shuffle is a bijection and unshuffle inverts it") {
  const auto x = random_tensor({2, 8, 3, 5}, 8);
  auto y = pixel_shuffle(VarD::constant(x), 2);
  CHECK(y.shape() == Shape{2, 2, 6, 10});
  std::vector<double> a(x.data().begin(), x.data().end()), b(y.value().data().begin(), y.value().data().end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);
  // out[n, c, 2h + i, 2w + j] = in[n, 4c + 2i + j, h, w]
  CHECK(y.value().at(1, 1, 3, 4) == x.at(1, 4 + 2 * 1 + 0, 1, 2));
  auto back = pixel_unshuffle(y, 2);
  CHECK(max_abs_diff(back.value(), x) == 0.0);
  CHECK_THROWS_AS(pixel_shuffle(VarD::constant(Tensor<double>(Shape{1, 6, 2, 2})), 2), DimensionError);
}

TEST_CASE("channel slicing and the fused half product") {
  const auto x = random_tensor({2, 6, 3, 4}, 9);
  auto [lo, hi] = split_channels_half(VarD::constant(x));
  auto fused = half_product(VarD::constant(x));
  auto explicit_product = mul(lo, hi);
  CHECK(max_abs_diff(fused.value(), explicit_product.value()) == 0.0);
  for (int c = 0; c < 3; ++c) CHECK(fused.value().at(1, c, 2, 3) == x.at(1, c, 2, 3) * x.at(1, c + 3, 2, 3));
  CHECK_THROWS_AS(half_product(VarD::constant(Tensor<double>(Shape{1, 5, 2, 2}))), DimensionError);
}

TEST_CASE("broadcasting errors") {
  auto a = VarD::constant(Tensor<double>(Shape{2, 3}));
  auto b = VarD::constant(Tensor<double>(Shape{4, 3}));
  CHECK_THROWS_AS(add(a, b), DimensionError);
}

TEST_CASE("backward basics") {
  auto x = VarD::leaf(random_tensor({3, 4}, 10));
  auto g = backward(sum_all(x));
  for (double v : g.at(x.node()).data()) CHECK(v == 1.0);

  auto g2 = backward(sum_all(mul(x, x)));
  for (std::size_t i = 0; i < x.value().size(); ++i) CHECK(g2.at(x.node())[i] == doctest::Approx(2 * x.value()[i]));

  // Fan-out accumulates: y = x + x.
  auto g3 = backward(sum_all(add(x, x)));
  for (double v : g3.at(x.node()).data()) CHECK(v == 2.0);

  CHECK_THROWS_AS(backward(sum_all(VarD::constant(Tensor<double>(Shape{2})))), UsageError);
  CHECK_THROWS_AS(backward(x), UsageError);
}

TEST_CASE("finite-difference check of every primitive") {
  using Leaves = std::vector<std::pair<std::string, VarD>>;
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    std::function<VarD(const std::vector<VarD>&)> fn;
    double lo = -1, hi = 1;
  };
  const std::vector<Case> cases = {
      {"add", {{2, 3, 4, 4}, {2, 3, 4, 4}}, [](auto& v) { return add(v[0], v[1]); }},
      {"add (N,C,1,1) right", {{2, 3, 4, 4}, {2, 3, 1, 1}}, [](auto& v) { return add(v[0], v[1]); }},
      {"add (N,C,1,1) left", {{2, 3, 1, 1}, {2, 3, 4, 4}}, [](auto& v) { return add(v[0], v[1]); }},
      {"add row broadcast", {{2, 3, 4}, {1, 4}}, [](auto& v) { return add(v[0], v[1]); }},
      {"sub", {{3, 5}, {3, 5}}, [](auto& v) { return sub(v[0], v[1]); }},
      {"sub column broadcast", {{3, 5}, {3, 1}}, [](auto& v) { return sub(v[0], v[1]); }},
      {"mul", {{2, 3, 4, 4}, {2, 3, 4, 4}}, [](auto& v) { return mul(v[0], v[1]); }},
      {"mul (N,C,1,1) right", {{2, 3, 4, 4}, {2, 3, 1, 1}}, [](auto& v) { return mul(v[0], v[1]); }},
      {"mul (1,C,1,1) left", {{1, 3, 1, 1}, {2, 3, 4, 4}}, [](auto& v) { return mul(v[0], v[1]); }},
      {"scale", {{4, 4}}, [](auto& v) { return scale(v[0], 2.5); }},
      {"add_scalar", {{4, 4}}, [](auto& v) { return add_scalar(v[0], -0.5); }},
      {"log", {{4, 4}}, [](auto& v) { return log(v[0]); }, 0.5, 2.0},
      {"softplus", {{4, 4}}, [](auto& v) { return softplus(v[0]); }, -3.0, 3.0},
      {"reciprocal", {{4, 4}}, [](auto& v) { return reciprocal(v[0]); }, 0.5, 2.0},
      {"mean_all", {{3, 4}}, [](auto& v) { return mean_all(v[0]); }},
      {"softmax", {{2, 3, 7}}, [](auto& v) { return softmax_lastdim(v[0]); }, -3.0, 3.0},
      {"matmul", {{2, 3, 4}, {2, 4, 5}}, [](auto& v) { return matmul_batched(v[0], v[1]); }},
      {"transpose", {{2, 3, 4}}, [](auto& v) { return transpose_last2(v[0]); }},
      {"reshape", {{2, 3, 4}}, [](auto& v) { return reshape(v[0], Shape{6, 4}); }},
      {"layer norm", {{2, 5, 4, 4}, {5}, {5}},
       [](auto& v) { return layer_norm_channel(v[0], v[1], v[2], 1e-6); }, -2.0, 2.0},
      {"global pool", {{2, 3, 4, 5}}, [](auto& v) { return adaptive_avg_pool_to_1(v[0]); }},
      {"local pool", {{2, 3, 7, 6}}, [](auto& v) { return local_avg_pool(v[0], 3); }},
      {"local pool even window", {{1, 2, 6, 5}}, [](auto& v) { return local_avg_pool(v[0], 4); }},
      {"pixel shuffle", {{2, 8, 3, 3}}, [](auto& v) { return pixel_shuffle(v[0], 2); }},
      {"pixel unshuffle", {{2, 2, 4, 6}}, [](auto& v) { return pixel_unshuffle(v[0], 2); }},
      {"slice", {{2, 5, 3, 3}}, [](auto& v) { return slice_channels(v[0], 1, 3); }},
      {"split", {{2, 4, 3, 3}}, [](auto& v) {
         auto [a, b] = split_channels_half(v[0]);
         return add(a, scale(b, 3.0));
       }},
      {"half product", {{2, 6, 3, 5}}, [](auto& v) { return half_product(v[0]); }},
      {"pad reflect", {{1, 2, 5, 4}}, [](auto& v) { return pad_reflect(v[0], 3, 2); }},
      {"crop", {{1, 2, 5, 4}}, [](auto& v) { return crop(v[0], 3, 2); }},
  };
  std::uint64_t seed = 100;
  for (const auto& c : cases) {
    CAPTURE(c.name);
    std::vector<VarD> vars;
    Leaves leaves;
    for (const auto& shape : c.shapes) {
      vars.push_back(VarD::leaf(random_tensor(shape, seed++, c.lo, c.hi)));
      leaves.emplace_back("input" + std::to_string(leaves.size()), vars.back());
    }
    auto r = gradcheck([&] { return probe(c.fn(vars)); }, leaves, kFiniteStep);
    CAPTURE(r.worst);
    CHECK(r.max_error <= kGradTolerance);
  }
}
