#include <doctest.h>

#include <cmath>
#include <random>

#include "../oracles.hpp"
#include "helpers.hpp"
#include "terrai/autodiff.hpp"
#include "terrai/common.hpp"

using namespace terrai;
using namespace terrai::autodiff;

namespace {

void randomize(Tensor4& t, std::mt19937_64& rng, float scale = 1.0f) {
  std::uniform_real_distribution<float> u(-scale, scale);
  for (auto& v : t.data()) v = u(rng);
}

oracle::Vol vol_of(const Tensor4& t, std::size_t n) {
  const auto& s = t.shape();
  oracle::Vol v(s.c, s.h, s.w);
  for (std::size_t i = 0; i < v.v.size(); ++i) v.v[i] = t[n * s.c * s.h * s.w + i];
  return v;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

}  // namespace

TEST_CASE("1x1 identity convolution") {
  Graph g;
  Parameter w("w", {1, 1, 1, 1}), b("b", {1, 1, 1, 1});
  w.value[0] = 1.0f;
  Tensor4 x({1, 1, 3, 4});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(i) - 5.0f;
  const auto y = g.conv2d(g.input(x), w, b, 0);
  CHECK(g.value(y) == x);
}

TEST_CASE("3x3 all-ones kernel shows zero-padding arithmetic") {
  Graph g;
  Parameter w("w", {1, 1, 3, 3}), b("b", {1, 1, 1, 1});
  w.value.fill(1.0f);
  const Tensor4 x({1, 1, 5, 5}, 2.0f);
  const auto& y = g.value(g.conv2d(g.input(x), w, b, 1));
  CHECK(y(0, 0, 2, 2) == 18.0f);
  CHECK(y(0, 0, 0, 2) == 12.0f);
  CHECK(y(0, 0, 0, 0) == 8.0f);
}

TEST_CASE("conv2d channel mismatch is an error") {
  Graph g;
  Parameter w("w", {2, 3, 3, 3}), b("b", {2, 1, 1, 1});
  CHECK_THROWS_AS(g.conv2d(g.input(Tensor4({1, 2, 4, 4})), w, b, 1), ShapeError);
}

TEST_CASE("conv2d gradients match finite differences") {
  std::mt19937_64 rng(1);
  Tensor4 x({2, 3, 5, 5});
  randomize(x, rng);
  Parameter w("w", {4, 3, 3, 3}), b("b", {4, 1, 1, 1});
  randomize(w.value, rng);
  randomize(b.value, rng);
  Tensor4 seed({2, 4, 5, 5});
  randomize(seed, rng);

  Graph g;
  const auto xi = g.input(x);
  const auto y = g.conv2d(xi, w, b, 1);
  g.backward(y, seed);

  // loss(x, w, b) = sum(seed * conv(x)) evaluated in double
  auto loss = [&](const Tensor4& xx, const Parameter& ww, const Parameter& bb) {
    oracle::Layer L{std::vector<double>(ww.value.data().begin(), ww.value.data().end()),
                    std::vector<double>(bb.value.data().begin(), bb.value.data().end()), 4, 3, 3};
    double s = 0.0;
    for (std::size_t n = 0; n < 2; ++n) {
      const auto out = oracle::conv(vol_of(xx, n), L, 1);
      for (std::size_t i = 0; i < out.v.size(); ++i) s += out.v[i] * seed[n * out.v.size() + i];
    }
    return s;
  };
  const double h = 1e-3;
  double worst = 0.0;
  for (std::size_t i = 0; i < w.value.numel(); ++i) {
    Parameter wp = w, wm = w;
    wp.value[i] += static_cast<float>(h);
    wm.value[i] -= static_cast<float>(h);
    const double fd = (loss(x, wp, b) - loss(x, wm, b)) / (static_cast<double>(wp.value[i]) - wm.value[i]);
    worst = std::max(worst, rel_err(w.grad[i], fd));
  }
  for (std::size_t i = 0; i < b.value.numel(); ++i) {
    Parameter bp = b, bm = b;
    bp.value[i] += static_cast<float>(h);
    bm.value[i] -= static_cast<float>(h);
    const double fd = (loss(x, w, bp) - loss(x, w, bm)) / (static_cast<double>(bp.value[i]) - bm.value[i]);
    worst = std::max(worst, rel_err(b.grad[i], fd));
  }
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Tensor4 xp = x, xm = x;
    xp[i] += static_cast<float>(h);
    xm[i] -= static_cast<float>(h);
    const double fd = (loss(xp, w, b) - loss(xm, w, b)) / (static_cast<double>(xp[i]) - xm[i]);
    worst = std::max(worst, rel_err(g.grad(xi)[i], fd));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("upsample2 gradients match finite differences") {
  std::mt19937_64 rng(2);
  Tensor4 x({2, 3, 2, 3});
  randomize(x, rng);
  Parameter w("w", {3, 2, 2, 2}), b("b", {2, 1, 1, 1});
  randomize(w.value, rng);
  randomize(b.value, rng);
  Tensor4 seed({2, 2, 4, 6});
  randomize(seed, rng);

  Graph g;
  const auto xi = g.input(x);
  const auto y = g.upsample2(xi, w, b);
  CHECK(g.value(y).shape() == Shape{2, 2, 4, 6});
  g.backward(y, seed);

  auto loss = [&](const Tensor4& xx, const Parameter& ww, const Parameter& bb) {
    oracle::Layer L{std::vector<double>(ww.value.data().begin(), ww.value.data().end()),
                    std::vector<double>(bb.value.data().begin(), bb.value.data().end()), 3, 2, 2};
    double s = 0.0;
    for (std::size_t n = 0; n < 2; ++n) {
      const auto out = oracle::up(vol_of(xx, n), L);
      for (std::size_t i = 0; i < out.v.size(); ++i) s += out.v[i] * seed[n * out.v.size() + i];
    }
    return s;
  };
  // forward agrees with the reference
  const double ref = loss(x, w, b);
  double got = 0.0;
  for (std::size_t i = 0; i < seed.numel(); ++i) got += static_cast<double>(g.value(y)[i]) * seed[i];
  CHECK(got == doctest::Approx(ref).epsilon(1e-5));

  const float h = 1e-3f;
  double worst = 0.0;
  for (std::size_t i = 0; i < w.value.numel(); ++i) {
    Parameter wp = w, wm = w;
    wp.value[i] += h;
    wm.value[i] -= h;
    const double fd = (loss(x, wp, b) - loss(x, wm, b)) / (static_cast<double>(wp.value[i]) - wm.value[i]);
    worst = std::max(worst, rel_err(w.grad[i], fd));
  }
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Tensor4 xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (loss(xp, w, b) - loss(xm, w, b)) / (static_cast<double>(xp[i]) - xm[i]);
    worst = std::max(worst, rel_err(g.grad(xi)[i], fd));
  }
  for (std::size_t i = 0; i < b.value.numel(); ++i) {
    double fd = 0.0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t p = 0; p < 24; ++p) fd += seed[(n * 2 + i) * 24 + p];
    worst = std::max(worst, rel_err(b.grad[i], fd));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("relu forward and backward") {
  Graph g;
  const auto x = g.input(Tensor4({1, 1, 1, 3}, std::vector<float>{-1.0f, 0.0f, 2.0f}));
  const auto y = g.relu(x);
  CHECK(g.value(y) == Tensor4({1, 1, 1, 3}, std::vector<float>{0.0f, 0.0f, 2.0f}));
  g.backward(g.sum(y));
  CHECK(g.grad(x) == Tensor4({1, 1, 1, 3}, std::vector<float>{0.0f, 0.0f, 1.0f}));
}

TEST_CASE("maxpool2 routes the gradient to the maximum") {
  Graph g;
  const auto x = g.input(Tensor4({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4}));
  const auto y = g.maxpool2(x);
  CHECK(g.value(y)[0] == 4.0f);
  g.backward(g.sum(y));
  CHECK(g.grad(x) == Tensor4({1, 1, 2, 2}, std::vector<float>{0, 0, 0, 1}));
}

TEST_CASE("maxpool2 ties go to the first element and odd sizes fail") {
  Graph g;
  const auto x = g.input(Tensor4({1, 1, 2, 2}, 5.0f));
  g.backward(g.sum(g.maxpool2(x)));
  CHECK(g.grad(x) == Tensor4({1, 1, 2, 2}, std::vector<float>{1, 0, 0, 0}));
  Graph g2;
  CHECK_THROWS_AS(g2.maxpool2(g2.input(Tensor4({1, 1, 3, 4}))), ShapeError);
}

TEST_CASE("concat splits gradients exactly") {
  std::mt19937_64 rng(3);
  Tensor4 a({2, 2, 3, 3}), b({2, 3, 3, 3}), seed({2, 5, 3, 3});
  randomize(a, rng);
  randomize(b, rng);
  randomize(seed, rng);
  Graph g;
  const auto va = g.input(a), vb = g.input(b);
  const auto y = g.concat_channels(va, vb);
  CHECK(g.value(y).shape() == Shape{2, 5, 3, 3});
  CHECK(g.value(y)(1, 3, 2, 1) == b(1, 1, 2, 1));
  g.backward(y, seed);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 5; ++c)
      for (std::size_t i = 0; i < 9; ++i) {
        const float part = c < 2 ? g.grad(va)(n, c, i / 3, i % 3) : g.grad(vb)(n, c - 2, i / 3, i % 3);
        CHECK(part == seed(n, c, i / 3, i % 3));
      }
  Graph g2;
  CHECK_THROWS_AS(g2.concat_channels(g2.input(Tensor4({1, 1, 2, 2})), g2.input(Tensor4({1, 1, 4, 2}))), ShapeError);
}

TEST_CASE("backward seeds and errors") {
  Graph g;
  const auto x = g.input(Tensor4({1, 2, 2, 2}, 3.0f));
  const auto s = g.sum(x);
  g.backward(s);
  for (float v : g.grad(x).data()) CHECK(v == 1.0f);
  CHECK_THROWS(g.backward(s));

  Graph z;
  Parameter w("w", {1, 2, 3, 3}), b("b", {1, 1, 1, 1});
  w.value.fill(0.5f);
  const auto y = z.conv2d(z.input(Tensor4({1, 2, 4, 4}, 1.0f)), w, b, 1);
  z.backward(z.sum(y), 0.0f);
  for (float v : w.grad.data()) CHECK(v == 0.0f);
  CHECK(b.grad[0] == 0.0f);

  Graph empty;
  CHECK_THROWS(empty.backward(Var{0}));
  Graph inference(false);
  const auto v = inference.sum(inference.input(Tensor4({1, 1, 1, 1}, 1.0f)));
  CHECK_THROWS(inference.backward(v));
}

TEST_CASE("conv2d is linear without bias and deterministic") {
  std::mt19937_64 rng(6);
  Tensor4 x({1, 3, 6, 6});
  randomize(x, rng);
  Parameter w("w", {2, 3, 3, 3}), b("b", {2, 1, 1, 1});
  randomize(w.value, rng);
  Tensor4 ax = x;
  for (auto& v : ax.data()) v *= 2.5f;
  Graph g;
  const auto y1 = g.value(g.conv2d(g.input(x), w, b, 1));
  const auto y2 = g.value(g.conv2d(g.input(ax), w, b, 1));
  for (std::size_t i = 0; i < y1.numel(); ++i) {
    CHECK(std::abs(y2[i] - 2.5f * y1[i]) <= 1e-5f * std::max(1.0f, std::abs(y2[i])));
  }
  Graph g2;
  CHECK(g2.value(g2.conv2d(g2.input(x), w, b, 1)) == y1);
}

TEST_CASE("parameter files round-trip") {
  testutil::TempDir dir("params");
  std::mt19937_64 rng(7);
  Parameter a("a.weight", {2, 3, 3, 3}), b("a.bias", {2, 1, 1, 1});
  randomize(a.value, rng);
  randomize(b.value, rng);
  const std::vector<const Parameter*> out = {&a, &b};
  const auto sum = save_parameters(out, dir.path() / "p");
  CHECK(sum == checksum_file(dir.path() / "p.bin"));
  Parameter a2("a.weight", {2, 3, 3, 3}), b2("a.bias", {2, 1, 1, 1});
  std::vector<Parameter*> in = {&a2, &b2};
  load_parameters(in, dir.path() / "p");
  CHECK(a2.value == a.value);
  CHECK(b2.value == b.value);
  Parameter wrong("a.weight", {2, 3, 1, 1});
  std::vector<Parameter*> bad = {&wrong, &b2};
  CHECK_THROWS(load_parameters(bad, dir.path() / "p"));
}
