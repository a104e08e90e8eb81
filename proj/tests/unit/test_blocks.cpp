#include "doctest.h"
#include "gradcheck.hpp"
#include "m3snet/blocks.hpp"
#include "m3snet/network.hpp"

using namespace m3snet;
using namespace m3snet::testing;

namespace {

using VarD = Var<double>;

void fill(ParameterSet<double>& params, const std::string& name, double value) {
  for (auto& v : params.at(name).mutable_value().data()) v = value;
}

// Zero every conv weight and bias whose name starts with `prefix`.
void zero_convs(ParameterSet<double>& params, const std::string& prefix) {
  for (auto& [name, var] : params.entries()) {
    if (name.rfind(prefix, 0) != 0) continue;
    if (name.ends_with(".weight") || name.ends_with(".bias")) fill(params, name, 0.0);
  }
}

}  // namespace

TEST_CASE("simple_gate") {
  Tensor<double> x(Shape{1, 4, 1, 1}, std::vector<double>{1, 2, 3, 4});
  auto y = simple_gate(VarD::constant(x));
  CHECK(y.shape() == Shape{1, 2, 1, 1});
  CHECK(y.value()[0] == 3.0);
  CHECK(y.value()[1] == 8.0);

  auto a = random_tensor({2, 3, 4, 5}, 1);
  Tensor<double> cat(Shape{2, 6, 4, 5}, 1.0);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int yy = 0; yy < 4; ++yy)
        for (int xx = 0; xx < 5; ++xx) cat.at(n, c, yy, xx) = a.at(n, c, yy, xx);
  CHECK(max_abs_diff(simple_gate(VarD::constant(cat)).value(), a) == 0.0);

  // Slicing oracle.
  auto r = random_tensor({2, 8, 3, 3}, 2);
  auto g = simple_gate(VarD::constant(r));
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 4; ++c)
      for (int yy = 0; yy < 3; ++yy)
        for (int xx = 0; xx < 3; ++xx) CHECK(g.value().at(n, c, yy, xx) == r.at(n, c, yy, xx) * r.at(n, c + 4, yy, xx));

  CHECK_THROWS_AS(simple_gate(VarD::constant(Tensor<double>(Shape{1, 3, 2, 2}))), DimensionError);
}

TEST_CASE("sca") {
  ParameterSet<double> params;
  Initializer<double> init(InitMode::kFanInUniform, 3);
  auto conv = Conv2d<double>::create(params, init, "sca", 3, 3, 1);

  SUBCASE("identity conv squares a constant input") {
    fill(params, "sca.weight", 0.0);
    fill(params, "sca.bias", 0.0);
    for (int c = 0; c < 3; ++c) params.at("sca.weight").mutable_value().at(c, c, 0, 0) = 1.0;
    auto y = sca(VarD::constant(Tensor<double>(Shape{1, 3, 4, 4}, 0.7)), conv);
    for (double v : y.value().data()) CHECK(v == doctest::Approx(0.49));
  }
  SUBCASE("zero weights with unit bias pass the input through") {
    fill(params, "sca.weight", 0.0);
    fill(params, "sca.bias", 1.0);
    auto x = random_tensor({2, 3, 4, 4}, 4);
    CHECK(max_abs_diff(sca(VarD::constant(x), conv).value(), x) == 0.0);
  }
  SUBCASE("a window covering the image equals global pooling") {
    auto x = VarD::constant(random_tensor({2, 3, 6, 9}, 5));
    auto global = sca(x, conv);
    for (int window : {9, 16, 256}) CHECK(max_abs_diff(sca(x, conv, window).value(), global.value()) <= 1e-6);
  }
  SUBCASE("window must be positive") {
    CHECK_THROWS_AS(sca(VarD::constant(Tensor<double>(Shape{1, 3, 2, 2})), conv, 0), ConfigError);
  }
}

TEST_CASE("naf_block") {
  ParameterSet<double> params;
  Initializer<double> init(InitMode::kFanInUniform, 7);
  auto block = NafBlock<double>::create(params, init, "b", 8);
  auto x = VarD::leaf(random_tensor({2, 8, 16, 16}, 8));

  CHECK(block(x).shape() == x.shape());
  CHECK_THROWS_AS(block(VarD::constant(Tensor<double>(Shape{1, 6, 4, 4}))), DimensionError);

  SUBCASE("every parameter receives a gradient") {
    auto grads = backward(probe(block(x)));
    for (const auto& [name, var] : params.entries()) {
      CAPTURE(name);
      REQUIRE(grads.count(var.node()) == 1);
      double norm = 0;
      for (double g : grads.at(var.node()).data()) norm += g * g;
      CHECK(norm > 0.0);
    }
  }
  SUBCASE("zero convolutions make the block the identity") {
    zero_convs(params, "b.");
    CHECK(max_abs_diff(block(x).value(), x.value()) == 0.0);
  }
}

TEST_CASE("block gradients pass the finite-difference check") {
  ParameterSet<double> params;
  Initializer<double> init(InitMode::kFanInUniform, 11);
  auto naf = NafBlock<double>::create(params, init, "naf", 4);
  auto down = Downsample<double>::create(params, init, "down", 4);
  auto up = Upsample<double>::create(params, init, "up", 4);
  auto gate_conv = Conv2d<double>::create(params, init, "sca", 4, 4, 1);
  auto attn = Mhamb<double>::create(params, init, "mhamb", 8, 2);
  // Offsets away from zero so LayerNorm offsets matter.
  for (auto& [name, var] : params.entries())
    if (name.ends_with(".offset")) params.at(name).mutable_value() = random_tensor(var.shape(), 12, -0.5, 0.5);

  auto x = VarD::leaf(random_tensor({2, 4, 6, 6}, 13));
  auto x8 = VarD::leaf(random_tensor({2, 8, 3, 4}, 14));

  auto check = [&](const char* name, std::function<VarD()> fn, const std::string& prefix, const VarD& input) {
    CAPTURE(name);
    auto leaves = std::vector<std::pair<std::string, VarD>>{{"input", input}};
    for (const auto& e : params.entries())
      if (e.first.rfind(prefix, 0) == 0) leaves.push_back(e);
    auto r = gradcheck([&] { return probe(fn()); }, leaves, kFiniteStep);
    CAPTURE(r.worst);
    CHECK(r.max_error <= kGradTolerance);
  };
  check("simple gate", [&] { return simple_gate(x); }, "-", x);
  check("sca global", [&] { return sca(x, gate_conv); }, "sca.", x);
  check("sca local", [&] { return sca(x, gate_conv, 3); }, "sca.", x);
  check("naf block", [&] { return naf(x); }, "naf.", x);
  check("naf block local", [&] { return naf(x, 4); }, "naf.", x);
  check("downsample", [&] { return down(x); }, "down.", x);
  check("upsample", [&] { return up(x); }, "up.", x);
  check("mhamb", [&] { return attn(x8); }, "mhamb.", x8);
}

TEST_CASE("resampling shapes") {
  ParameterSet<double> params;
  Initializer<double> init(InitMode::kFanInUniform, 15);
  auto down = Downsample<double>::create(params, init, "down", 2);
  auto up = Upsample<double>::create(params, init, "up", 4);
  auto d = down(VarD::constant(Tensor<double>(Shape{1, 2, 4, 4}, 1.0)));
  CHECK(d.shape() == Shape{1, 4, 2, 2});
  CHECK(up(d).shape() == Shape{1, 2, 4, 4});
  CHECK_THROWS_AS(down(VarD::constant(Tensor<double>(Shape{1, 2, 5, 4}))), DimensionError);
  CHECK_THROWS_AS(up(VarD::constant(Tensor<double>(Shape{1, 3, 2, 2}))), DimensionError);
  CHECK_THROWS_AS(Upsample<double>::create(params, init, "odd", 3), ConfigError);

  SUBCASE("channel-replicating upsample keeps a constant constant") {
    auto& w = params.at("up.weight").mutable_value();
    fill(params, "up.weight", 0.0);
    fill(params, "up.bias", 0.0);
    for (int o = 0; o < 8; ++o) w.at(o, o % 4, 0, 0) = 1.0;
    auto y = up(VarD::constant(Tensor<double>(Shape{1, 4, 3, 3}, 0.3)));
    CHECK(y.shape() == Shape{1, 2, 6, 6});
    for (double v : y.value().data()) CHECK(v == 0.3);
  }
}

TEST_CASE("mhamb") {
  ParameterSet<double> params;
  Initializer<double> init(InitMode::kFanInUniform, 16);
  auto attn = Mhamb<double>::create(params, init, "m", 8, 4);
  auto x = VarD::constant(random_tensor({2, 8, 3, 5}, 17));

  CHECK(attn(x).shape() == x.shape());
  auto a = attn.attention(x);
  CHECK(a.shape() == Shape{8, 15, 15});
  for (int row = 0; row < 8 * 15; ++row) {
    double total = 0;
    for (int j = 0; j < 15; ++j) total += a.value()[static_cast<std::size_t>(row * 15 + j)];
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }
  CHECK(params.at("m.beta").value().size() == 4);
  CHECK(attn.beta().value()[0] == doctest::Approx(std::sqrt(2.0)));
  CHECK_THROWS_AS(Mhamb<double>::create(params, init, "bad", 6, 4), ConfigError);

  SUBCASE("constant values give a constant mix") {
    fill(params, "m.v_proj.weight", 0.0);
    fill(params, "m.v_dw.weight", 0.0);
    auto& db = params.at("m.v_dw.bias").mutable_value();
    for (int c = 0; c < 8; ++c) db[static_cast<std::size_t>(c)] = 0.1 * c;
    fill(params, "m.out_proj.weight", 0.0);
    fill(params, "m.out_proj.bias", 0.0);
    for (int c = 0; c < 8; ++c) params.at("m.out_proj.weight").mutable_value().at(c, c, 0, 0) = 1.0;
    auto y = attn(x);
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 8; ++c)
        for (int yy = 0; yy < 3; ++yy)
          for (int xx = 0; xx < 5; ++xx)
            CHECK(y.value().at(n, c, yy, xx) - x.value().at(n, c, yy, xx) == doctest::Approx(0.1 * c));
  }
  SUBCASE("huge beta averages the values over tokens") {
    fill(params, "m.beta", 1e9);
    fill(params, "m.out_proj.weight", 0.0);
    fill(params, "m.out_proj.bias", 0.0);
    for (int c = 0; c < 8; ++c) params.at("m.out_proj.weight").mutable_value().at(c, c, 0, 0) = 1.0;
    auto y = attn(x);
    auto v = attn.v_dw(attn.v_proj(x));
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 8; ++c) {
        double mean = 0;
        for (int t = 0; t < 15; ++t) mean += v.value().at(n, c, t / 5, t % 5);
        mean /= 15;
        for (int t = 0; t < 15; ++t)
          CHECK(y.value().at(n, c, t / 5, t % 5) - x.value().at(n, c, t / 5, t % 5) ==
                doctest::Approx(mean).epsilon(1e-6));
      }
  }
  SUBCASE("a single token attends to itself") {
    auto one = VarD::constant(random_tensor({1, 8, 1, 1}, 18));
    auto y = attn(one);
    auto expect = add(one, attn.out_proj(attn.v_dw(attn.v_proj(one))));
    CHECK(attn.attention(one).value()[0] == 1.0);
    CHECK(max_abs_diff(y.value(), expect.value()) < 1e-12);
  }
}
