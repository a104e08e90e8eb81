#include <algorithm>
#include <set>

#include "doctest.h"
#include "gradcheck.hpp"
#include "m3snet/network.hpp"

using namespace m3snet;
using namespace m3snet::testing;

namespace {

using VarD = Var<double>;

ModelConfig small_config(int width, std::vector<int> ffm = {1, 1, 0, 0}) {
  ModelConfig c;
  c.width = width;
  c.enc_blocks = {1, 1, 1, 1};
  c.dec_blocks = {1, 1, 1, 1};
  c.ffm_blocks = std::move(ffm);
  c.heads = 2;
  return c;
}

template <typename T>
void randomize(ParameterSet<T>& params, const std::string& name, std::uint64_t seed, double bound = 0.1) {
  auto& v = params.at(name).mutable_value();
  v = random_tensor(v.shape(), seed, -bound, bound).template cast<T>();
}

// Unrolls the fusion recursion: unit (s, i) exists when s <= ffm[i] and its
// upper input (s - 1, i + 1) exists (stage 0 being the encoder).
std::set<std::pair<int, int>> unrolled_units(const std::vector<int>& ffm) {
  std::set<std::pair<int, int>> units;
  const int l = static_cast<int>(ffm.size());
  for (int s = 1; s <= 8; ++s)
    for (int i = 1; i < l; ++i) {
      const bool upper = s == 1 || units.count({s - 1, i + 1});
      if (s <= ffm[i - 1] && upper) units.insert({s, i});
    }
  return units;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  auto bad = [](auto mutate) {
    ModelConfig m;
    mutate(m);
    return m;
  };
  CHECK_THROWS_AS(bad([](ModelConfig& m) { m.width = 7; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](ModelConfig& m) { m.ffm_blocks = {1, 2, 0, 0}; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](ModelConfig& m) { m.ffm_blocks = {2, 2, 1, 1}; }).validate(), ConfigError);
  CHECK_THROWS_WITH_AS(bad([](ModelConfig& m) { m.ffm_blocks = {3, 1, 0, 0}; }).validate(),
                       doctest::Contains("needs unit (stage 2, level 2)"), ConfigError);
  CHECK_THROWS_AS(bad([](ModelConfig& m) { m.heads = 7; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](ModelConfig& m) { m.dec_blocks = {1, 1, 1}; }).validate(), ConfigError);
  CHECK_NOTHROW(bad([](ModelConfig& m) {
                  m.heads = 7;
                  m.ablation = Ablation::kFfm;
                }).validate());

  CHECK(parse_ablation("mhamb") == Ablation::kMhamb);
  CHECK_THROWS_AS(parse_ablation("everything"), ConfigError);
  CHECK(parse_int_list("[1, 1,1,28]") == std::vector<int>{1, 1, 1, 28});
  CHECK_THROWS_AS(parse_int_list("1,,2"), ConfigError);
}

TEST_CASE("config key values round-trip and diff") {
  ModelConfig a = small_config(8);
  a.tlc_window = 64;
  ModelConfig b;
  for (const auto& [k, v] : a.to_key_values()) CHECK(b.apply(k, v));
  CHECK(a == b);
  CHECK_FALSE(b.apply("nonsense", "1"));
  b.width = 16;
  b.ablation = Ablation::kBaseline;
  auto diff = config_diff(a, b);
  REQUIRE(diff.size() == 2);
  CHECK(diff[0] == "width: 8 != 16");
  CHECK(diff[1] == "ablation: full != baseline");
}

TEST_CASE("encoder shape law") {
  SUBCASE("width 32 at 256x256") {
    ModelConfig c = small_config(32);
    Network<float> net(c, 0, InitMode::kZero);
    NoGradGuard guard;
    auto fe = net.encode(Var<float>::constant(Tensor<float>(Shape{1, 3, 256, 256})));
    REQUIRE(fe.size() == 4);
    CHECK(fe[3].shape() == Shape{1, 256, 32, 32});
  }
  SUBCASE("width 8 at 64x64") {
    Network<float> net(small_config(8), 0, InitMode::kZero);
    auto fe = net.encode(Var<float>::constant(Tensor<float>(Shape{1, 3, 64, 64})));
    CHECK(fe[1].shape() == Shape{1, 16, 32, 32});
  }
  SUBCASE("non-multiple input is rejected without padding") {
    Network<float> net(small_config(8), 0, InitMode::kZero);
    CHECK_THROWS_AS(net.encode(Var<float>::constant(Tensor<float>(Shape{1, 3, 40, 48}))), DimensionError);
    CHECK_THROWS_AS(net.forward(Var<float>::constant(Tensor<float>(Shape{1, 4, 32, 32}))), DimensionError);
  }
}

TEST_CASE("graph walk follows the level shape law") {
  ModelConfig c = small_config(8, {2, 2, 1, 0});
  Network<float> net(c, 1);
  ShapeTrace trace;
  ForwardOptions opts;
  opts.trace = &trace;
  const std::int64_t h = 32, w = 48;
  net.forward(Var<float>::constant(random_tensor_f({2, 3, h, w}, 1)), opts);
  auto level_shape = [&](int level) {
    return Shape{2, c.channels_at(level), h >> (level - 1), w >> (level - 1)};
  };
  int seen = 0;
  for (const auto& [name, shape] : trace) {
    CAPTURE(name);
    if (name == "intro") {
      CHECK(shape == level_shape(1));
    } else if (name == "bridge") {
      CHECK(shape == level_shape(5));
    } else if (name == "head") {
      CHECK(shape == Shape{2, 3, h, w});
    } else {
      const int level = name.back() - '0';
      CHECK(shape == level_shape(level));
    }
    ++seen;
  }
  // intro, 4 encoder levels, 5 fusion units, bridge, 4 decoder levels, head
  CHECK(seen == 1 + 4 + 5 + 1 + 4 + 1);
}

TEST_CASE("fusion lattice schedule") {
  for (const auto& ffm : std::vector<std::vector<int>>{{2, 2, 1, 0}, {1, 1, 1, 0}, {1, 1, 0, 0}, {0, 0, 0, 0}}) {
    ModelConfig c = small_config(4, ffm);
    Network<double> net(c, 2);
    std::set<std::pair<int, int>> built;
    for (const auto& u : net.fusion_units()) built.insert({u.stage, u.level});
    CHECK(built == unrolled_units(ffm));
  }
  CHECK(unrolled_units({2, 2, 1, 0}).size() == 5);
  CHECK(unrolled_units({2, 2, 1, 0}) == std::set<std::pair<int, int>>{{1, 3}, {1, 2}, {2, 2}, {1, 1}, {2, 1}});

  ModelConfig c = small_config(4, {0, 0, 0, 0});
  Network<double> net(c, 3);
  auto fe = net.encode(VarD::constant(random_tensor({1, 3, 16, 16}, 4)));
  auto lattice = net.ffm_lattice(fe);
  CHECK(lattice.empty());
  auto skips = net.skips(fe, lattice);
  for (int i = 0; i < 4; ++i) CHECK(skips[i].node() == fe[i].node());
}

TEST_CASE("zero weights give spatially constant features for constant input") {
  ModelConfig c = small_config(4, {2, 2, 1, 0});
  Network<double> net(c, 5, InitMode::kZero);
  std::uint64_t seed = 6;
  for (const auto& [name, var] : net.parameters().entries())
    if (name.ends_with(".bias")) randomize(net.parameters(), name, seed++, 0.5);
  auto image = VarD::constant(Tensor<double>(Shape{1, 3, 32, 32}, 0.4));
  auto check_constant = [](const VarD& v) {
    const auto& t = v.value();
    for (std::int64_t ch = 0; ch < t.dim(1); ++ch)
      for (std::int64_t y = 0; y < t.dim(2); ++y)
        for (std::int64_t x = 0; x < t.dim(3); ++x) CHECK(t.at(0, ch, y, x) == doctest::Approx(t.at(0, ch, 0, 0)));
  };
  for (const auto& f : net.encode(image)) check_constant(f);

  // Upsampling biases land on a 2x2 sub-pixel pattern after the shuffle, so
  // fused and decoded features are constant only once those are zero too.
  for (const auto& [name, var] : net.parameters().entries())
    if ((name.rfind("up.", 0) == 0 || name.find(".up.") != std::string::npos) && name.ends_with(".bias")) {
      for (auto& v : net.parameters().at(name).mutable_value().data()) v = 0.0;
    }
  auto fe = net.encode(image);
  auto lattice = net.ffm_lattice(fe);
  for (const auto& [key, f] : lattice) check_constant(f);
  auto deep = net.decode(net.skips(fe, lattice), net.bridge(fe.back()));
  check_constant(deep);
  CHECK(deep.shape() == Shape{1, 4, 32, 32});
}

TEST_CASE("untrained network is the identity") {
  ModelConfig c = small_config(8, {2, 2, 1, 0});
  Network<float> net(c, 7);
  auto x = random_tensor_f({2, 3, 32, 48}, 8, 0, 1);
  auto y = net.forward(Var<float>::constant(x));
  CHECK(y.shape() == x.shape());
  CHECK(y.value().data().size() == x.size());
  CHECK(std::equal(x.data().begin(), x.data().end(), y.value().data().begin()));

  auto odd = random_tensor_f({1, 3, 21, 37}, 9, 0, 1);
  auto z = net.forward_any_size(Var<float>::constant(odd));
  CHECK(z.shape() == odd.shape());
  CHECK(std::equal(odd.data().begin(), odd.data().end(), z.value().data().begin()));
}

TEST_CASE("baseline equals full when fusion and attention are silenced") {
  ModelConfig full = small_config(4, {2, 2, 1, 0});
  ModelConfig base = full;
  base.ablation = Ablation::kBaseline;
  Network<double> a(full, 10), b(base, 11);
  randomize(a.parameters(), "head.weight", 12);
  for (const auto& [name, var] : b.parameters().entries()) b.parameters().at(name).mutable_value() = a.parameters().at(name).value();
  for (auto& [name, var] : a.parameters().entries()) {
    const bool fusion = name.rfind("ffm.", 0) == 0 && (name.ends_with(".weight") || name.ends_with(".bias")) &&
                        name.find(".ln") == std::string::npos;
    if (fusion || name.rfind("mhamb.out_proj", 0) == 0) {
      for (auto& v : a.parameters().at(name).mutable_value().data()) v = 0.0;
    }
  }
  auto x = VarD::constant(random_tensor({1, 3, 16, 32}, 13, 0, 1));
  auto ya = a.forward(x), yb = b.forward(x);
  CHECK(max_abs_diff(ya.value(), x.value()) > 1e-6);
  CHECK(max_abs_diff(ya.value(), yb.value()) < 1e-12);
}

TEST_CASE("batch elements do not interact") {
  ModelConfig c = small_config(4, {1, 1, 1, 0});
  Network<double> net(c, 14);
  randomize(net.parameters(), "head.weight", 15);
  auto x = random_tensor({3, 3, 16, 16}, 16, 0, 1);
  Tensor<double> swapped(x.shape());
  const std::int64_t plane = 3 * 16 * 16;
  const int order[3] = {2, 0, 1};
  for (int n = 0; n < 3; ++n)
    std::copy_n(x.ptr() + order[n] * plane, plane, swapped.ptr() + n * plane);
  auto y = net.forward(VarD::constant(x));
  auto ys = net.forward(VarD::constant(swapped));
  for (int n = 0; n < 3; ++n)
    for (std::int64_t i = 0; i < plane; ++i)
      CHECK(ys.value()[static_cast<std::size_t>(n * plane + i)] ==
            doctest::Approx(y.value()[static_cast<std::size_t>(order[n] * plane + i)]).epsilon(1e-12));
}

TEST_CASE("parameter accounting") {
  auto with = [](Ablation a) {
    ModelConfig c;
    c.ablation = a;
    return count_params(c);
  };
  CHECK(with(Ablation::kBaseline) < with(Ablation::kFfm));
  CHECK(with(Ablation::kFfm) < with(Ablation::kFull));
  CHECK(with(Ablation::kBaseline) < with(Ablation::kMhamb));
  CHECK(with(Ablation::kMhamb) < with(Ablation::kFull));

  // Hand count for a single NAFBlock of C channels.
  ParameterSet<float> params;
  Initializer<float> init(InitMode::kZero, 0);
  NafBlock<float>::create(params, init, "b", 6);
  const std::int64_t c = 6;
  CHECK(params.count() == 4 * c + (2 * c * c + 2 * c) + (18 * c + 2 * c) + 3 * (c * c + c) + (2 * c * c + 2 * c));
}

TEST_CASE("MAC estimate matches executed kernels") {
  for (bool tlc : {false, true}) {
    for (Ablation ab : {Ablation::kBaseline, Ablation::kFull}) {
      ModelConfig c = small_config(8, {2, 2, 1, 0});
      c.ablation = ab;
      c.tlc_window = 16;
      CAPTURE(tlc);
      Network<float> net(c, 17, InitMode::kZero);
      MacCounter counter;
      {
        NoGradGuard guard;
        ForwardOptions opts;
        if (tlc) opts.tlc_window = c.tlc_window;
        net.forward_any_size(Var<float>::constant(Tensor<float>(Shape{1, 3, 40, 56})), opts);
      }
      const auto est = estimate_macs(c, 40, 56, tlc);
      CHECK(counter.conv_macs() == static_cast<std::uint64_t>(est.conv));
      CHECK(counter.matmul_macs() == static_cast<std::uint64_t>(est.attention));
    }
  }
}
