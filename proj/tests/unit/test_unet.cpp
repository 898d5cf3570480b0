#include <doctest.h>

#include <cmath>
#include <random>

#include "../oracles.hpp"
#include "helpers.hpp"
#include "terrai/common.hpp"
#include "terrai/unet.hpp"

using namespace terrai;
using namespace terrai::unet;
using autodiff::Shape;

namespace {

Tensor4 random_input(std::size_t n, std::size_t c, std::uint64_t seed) {
  Tensor4 x({n, c, 8, 8});
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  for (auto& v : x.data()) v = d(rng);
  return x;
}

// Counted layer by layer from the topology description.
std::size_t count_by_hand(std::array<std::size_t, 3> ch, std::size_t cin) {
  using oracle::conv_params;
  const auto [a, b, c] = ch;
  return conv_params(cin, a, 3) + conv_params(a, a, 3)     // enc1
         + conv_params(a, b, 3) + conv_params(b, b, 3)     // enc2
         + conv_params(b, c, 3) + conv_params(c, c, 3)     // bottleneck
         + (c * b * 4 + b) + conv_params(2 * b, b, 3) + conv_params(b, b, 3)  // dec2
         + (b * a * 4 + a) + conv_params(2 * a, a, 3) + conv_params(a, a, 3)  // dec1
         + conv_params(a, 1, 1);
}

}  // namespace

TEST_CASE("forward shape") {
  auto m = build_model(WidthConfig::small(), 1);
  Graph g;
  const auto y = m.forward(g, g.input(random_input(4, 18, 2)));
  CHECK(g.value(y).shape() == Shape{4, 1, 8, 8});
  CHECK(m.predict(random_input(3, 18, 3)).shape() == Shape{3, 1, 8, 8});
}

TEST_CASE("forward rejects wrong channel count or spatial size") {
  auto m = build_model(WidthConfig::small(), 1);
  CHECK_THROWS_AS(m.predict(random_input(1, 17, 1)), ShapeError);
  CHECK_THROWS_AS(m.predict(Tensor4({1, 18, 6, 6})), ShapeError);
}

TEST_CASE("parameter counts follow the closed form") {
  CHECK(oracle::conv_params(18, 4, 3) == 652);
  CHECK(oracle::conv_params(4, 1, 1) == 5);
  for (const auto& cfg : {WidthConfig::small(), WidthConfig::baseline(), WidthConfig::large()}) {
    const auto m = build_model(cfg, 0);
    CHECK(parameter_count(m) == count_by_hand(cfg.channels, 18));
    CHECK(expected_parameter_count(cfg) == count_by_hand(cfg.channels, 18));
  }
  CHECK(expected_parameter_count(WidthConfig::small()) == 8009);
  const auto s = expected_parameter_count(WidthConfig::small());
  const auto b = expected_parameter_count(WidthConfig::baseline());
  const auto l = expected_parameter_count(WidthConfig::large());
  CHECK(b >= 10 * s);
  CHECK(l >= 5 * b);
}

TEST_CASE("width validation") {
  WidthConfig w{"bad", {8, 8, 16}};
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w.channels = {0, 4, 8};
  CHECK_THROWS_AS(w.validate(), ConfigError);
  CHECK_THROWS_AS(WidthConfig::from_name("huge"), ConfigError);
  CHECK(WidthConfig::from_name("large") == WidthConfig::large());
}

TEST_CASE("initialization is seeded") {
  const auto a = build_model(WidthConfig::small(), 5);
  const auto b = build_model(WidthConfig::small(), 5);
  const auto c = build_model(WidthConfig::small(), 6);
  CHECK(a.snapshot() == b.snapshot());
  CHECK_FALSE(a.snapshot() == c.snapshot());
  const auto x = random_input(2, 18, 9);
  CHECK(a.predict(x) == b.predict(x));
}

TEST_CASE("forward agrees with the double-precision reference") {
  for (const auto& cfg : {WidthConfig::small(), WidthConfig::baseline()}) {
    const auto m = build_model(cfg, 11);
    const auto P = oracle::params_of(m);
    const auto x = random_input(3, 18, 12);
    const auto y = m.predict(x);
    double worst = 0.0, scale = 0.0;
    for (std::size_t n = 0; n < 3; ++n) {
      oracle::Vol v(18, 8, 8);
      for (std::size_t i = 0; i < v.v.size(); ++i) v.v[i] = x[n * v.v.size() + i];
      const auto ref = oracle::unet_forward(P, cfg.channels, 18, v);
      for (std::size_t i = 0; i < 64; ++i) {
        worst = std::max(worst, std::abs(ref.v[i] - y[n * 64 + i]));
        scale = std::max(scale, std::abs(ref.v[i]));
      }
    }
    CHECK(worst <= 1e-4 * std::max(1.0, scale));
  }
}

TEST_CASE("masked RMSE examples") {
  Tensor4 p({1, 1, 1, 2}, std::vector<float>{3.0f, 100.0f});
  const std::vector<float> y = {1.0f, -5.0f};
  const std::vector<std::uint8_t> m = {1, 0};
  const auto r = masked_rmse_loss(p, y, m);
  CHECK(r.loss == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(r.valid == 1);
  CHECK(r.grad[1] == 0.0f);
  CHECK(r.grad[0] == doctest::Approx(1.0).epsilon(1e-6));

  Tensor4 same({1, 1, 1, 2}, std::vector<float>{1.0f, 2.0f});
  const std::vector<float> ys = {1.0f, 2.0f};
  const std::vector<std::uint8_t> ms = {1, 1};
  CHECK(masked_rmse_loss(same, ys, ms).loss == doctest::Approx(1e-6));

  const std::vector<std::uint8_t> none = {0, 0};
  CHECK_THROWS(masked_rmse_loss(same, ys, none));
}

TEST_CASE("loss gradient matches the reference") {
  std::mt19937 rng(4);
  std::normal_distribution<float> d(0.0f, 1.0f);
  Tensor4 p({2, 1, 8, 8});
  std::vector<float> y(128);
  std::vector<std::uint8_t> m(128);
  for (std::size_t i = 0; i < 128; ++i) {
    p[i] = d(rng);
    y[i] = d(rng);
    m[i] = i % 3 != 0;
  }
  const auto r = masked_rmse_loss(p, y, m);
  std::vector<double> pd(p.data().begin(), p.data().end()), yd(y.begin(), y.end());
  CHECK(r.loss == doctest::Approx(oracle::masked_rmse(pd, yd, m)).epsilon(1e-9));
  for (std::size_t i = 0; i < 128; ++i) {
    auto up = pd, dn = pd;
    up[i] += 1e-6;
    dn[i] -= 1e-6;
    const double fd = (oracle::masked_rmse(up, yd, m) - oracle::masked_rmse(dn, yd, m)) / 2e-6;
    CHECK(std::abs(r.grad[i] - fd) < 1e-5);
  }
}

TEST_CASE("predictions at masked pixels do not change loss or gradients") {
  const auto x = random_input(2, 18, 4);
  std::vector<float> y(128), y2;
  std::vector<std::uint8_t> mask(128);
  for (std::size_t i = 0; i < 128; ++i) {
    y[i] = std::sin(static_cast<float>(i));
    mask[i] = i % 4 != 1;
  }
  y2 = y;
  for (std::size_t i = 0; i < 128; ++i)
    if (!mask[i]) y2[i] = 1e6f;

  auto run = [&](const std::vector<float>& labels) {
    auto m = build_model(WidthConfig::small(), 3);
    Graph g;
    const auto out = m.forward(g, g.input(x));
    const auto r = masked_rmse_loss(g.value(out), labels, mask);
    g.backward(out, r.grad);
    std::vector<Tensor4> grads;
    for (auto* p : m.parameters()) grads.push_back(p->grad);
    return std::make_pair(r.loss, grads);
  };
  const auto a = run(y), b = run(y2);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("checkpoint round-trip") {
  testutil::TempDir dir("ckpt");
  const auto m = build_model(WidthConfig::small(), 21);
  const auto sum = save_checkpoint(m, dir.path() / "model", "schema123", "cfg9");
  const auto info = read_checkpoint_info(dir.path() / "model");
  CHECK(info.config == WidthConfig::small());
  CHECK(info.seed == 21);
  CHECK(info.parameter_count == 8009);
  CHECK(info.schema_checksum == "schema123");
  CHECK(info.config_checksum == "cfg9");
  CHECK(info.parameters_checksum == sum);
  const auto back = load_checkpoint(dir.path() / "model");
  CHECK(back.snapshot() == m.snapshot());
  const auto x = random_input(2, 18, 1);
  CHECK(back.predict(x) == m.predict(x));
  CHECK(save_checkpoint(back, dir.path() / "again", "schema123", "cfg9") == sum);
}
