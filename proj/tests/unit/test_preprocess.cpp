#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "../oracles.hpp"
#include "helpers.hpp"
#include "terrai/common.hpp"
#include "terrai/preprocess.hpp"

using namespace terrai;
using namespace terrai::preprocess;

namespace {

std::vector<synth::SyntheticScene> scenes_with_means(const std::vector<double>& means) {
  std::vector<synth::SyntheticScene> out;
  for (std::size_t i = 0; i < means.size(); ++i) {
    auto s = testutil::random_scene(8, 8, i, "s" + std::to_string(i));
    for (auto& v : s.truth.grid.values()) v = static_cast<float>(means[i]);
    out.push_back(std::move(s));
  }
  return out;
}

// Synthetic patch list: `parcels` parcels with `per_parcel` patches each and
// random mean labels.
std::vector<LabeledPatch> fake_patches(std::size_t parcels, std::size_t per_parcel, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 160.0f);
  std::vector<LabeledPatch> out;
  for (std::size_t p = 0; p < parcels; ++p) {
    for (std::size_t k = 0; k < per_parcel; ++k) {
      LabeledPatch lp;
      lp.input.assign(kPatchPixels, 0.0f);
      lp.label.fill(u(rng));
      lp.label_mask.fill(1);
      lp.origin = {"parcel_" + std::to_string(p), 2, k / 40, k % 40};
      out.push_back(std::move(lp));
    }
  }
  return out;
}

LabeledPatch numbered_patch(std::size_t channels) {
  LabeledPatch p;
  p.input.resize(channels * kPatchPixels);
  for (std::size_t i = 0; i < p.input.size(); ++i) p.input[i] = static_cast<float>(i);
  for (std::size_t i = 0; i < kPatchPixels; ++i) {
    p.label[i] = static_cast<float>(1000 + i);
    p.label_mask[i] = (i % 3) != 0;
  }
  return p;
}

}  // namespace

TEST_CASE("iqr_filter drops the outlying scene") {
  const std::vector<double> means = {10, 11, 12, 13, 14, 15, 16, 17, 18, 500};
  const auto r = iqr_filter(scenes_with_means(means));
  CHECK(r.kept.size() == 9);
  REQUIRE(r.dropped.size() == 1);
  CHECK(r.dropped[0].stack.parcel_id == "s9");
  const double q1 = oracle::quantile(means, 0.25);
  const double q3 = oracle::quantile(means, 0.75);
  CHECK(r.fences.q1 == doctest::Approx(q1));
  CHECK(r.fences.q3 == doctest::Approx(q3));
  CHECK(r.fences.upper == doctest::Approx(q3 + 1.5 * (q3 - q1)));
  for (std::size_t i = 0; i < 9; ++i) CHECK(r.kept[i].stack.parcel_id == "s" + std::to_string(i));
}

TEST_CASE("iqr_filter keeps equal means and needs four scenes") {
  const auto r = iqr_filter(scenes_with_means({7, 7, 7, 7, 7}));
  CHECK(r.kept.size() == 5);
  CHECK(r.dropped.empty());
  CHECK_THROWS_AS(iqr_filter(scenes_with_means({1, 2, 3})), ConfigError);
}

TEST_CASE("iqr_partition matches the quantile oracle on random vectors") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> n_dist(4, 60);
    std::lognormal_distribution<double> val(3.0, 0.8);
    std::vector<double> v(static_cast<std::size_t>(n_dist(rng)));
    for (auto& x : v) x = val(rng);
    const double q1 = oracle::quantile(v, 0.25), q3 = oracle::quantile(v, 0.75);
    const double lo = q1 - 1.5 * (q3 - q1), hi = q3 + 1.5 * (q3 - q1);
    const auto r = iqr_partition(v);
    std::vector<std::size_t> kept, dropped;
    for (std::size_t i = 0; i < v.size(); ++i) (v[i] >= lo && v[i] <= hi ? kept : dropped).push_back(i);
    CHECK(r.kept == kept);
    CHECK(r.dropped == dropped);
  }
}

TEST_CASE("quantile_sorted interpolates linearly") {
  const std::vector<double> v = {1, 2, 3, 4};
  CHECK(quantile_sorted(v, 0.0) == 1.0);
  CHECK(quantile_sorted(v, 1.0) == 4.0);
  CHECK(quantile_sorted(v, 0.25) == doctest::Approx(1.75));
  CHECK(quantile_sorted(v, 0.5) == doctest::Approx(2.5));
}

TEST_CASE("extract_patches counts") {
  auto s10 = testutil::random_scene(10, 10, 1);
  CHECK(extract_patches(s10).size() == 9);
  auto s8 = testutil::random_scene(8, 8, 2);
  CHECK(extract_patches(s8).size() == 1);
  auto dead = testutil::random_scene(8, 8, 3);
  for (std::size_t i = 0; i < 64; ++i) dead.truth.mask.set(i, false);
  dead.stack.mask = dead.truth.mask;
  CHECK(extract_patches(dead).empty());
  auto tiny = testutil::random_scene(7, 12, 4);
  CHECK_THROWS_AS(extract_patches(tiny), ShapeError);
}

TEST_CASE("extract_patches agrees with a brute-force window scan") {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::size_t> dim(8, 30);
  for (int t = 0; t < 10; ++t) {
    const std::size_t h = dim(rng), w = dim(rng);
    auto s = testutil::random_scene(h, w, 100 + t, "p", 0.9);
    std::vector<std::pair<std::size_t, std::size_t>> expect;
    for (std::size_t r = 0; r + 8 <= h; ++r)
      for (std::size_t c = 0; c + 8 <= w; ++c) {
        bool any = false;
        for (std::size_t dr = 0; dr < 8; ++dr)
          for (std::size_t dc = 0; dc < 8; ++dc) any = any || s.truth.mask(r + dr, c + dc);
        if (any) expect.emplace_back(r, c);
      }
    const auto got = extract_patches(s);
    REQUIRE(got.size() == expect.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].origin.row == expect[i].first);
      CHECK(got[i].origin.col == expect[i].second);
    }
    if (!got.empty()) {
      const auto& p = got.back();
      for (std::size_t ch = 0; ch < 3; ++ch)
        CHECK(p.input[ch * 64 + 9] == s.stack.channels[ch](p.origin.row + 1, p.origin.col + 1));
      CHECK(p.label_mask[63] == s.truth.mask(p.origin.row + 7, p.origin.col + 7));
    }
  }
}

TEST_CASE("split isolates test parcels and is deterministic") {
  const auto patches = fake_patches(10, 100, 1);
  const auto a = stratified_split(patches, {}, 99, 10);
  const auto b = stratified_split(patches, {}, 99, 10);
  CHECK(a.train == b.train);
  CHECK(a.validation == b.validation);
  CHECK(a.test == b.test);
  CHECK(a.test_parcels.size() == 2);
  CHECK(a.test.size() == 200);
  CHECK(a.train.size() + a.validation.size() == 800);
  CHECK(std::abs(static_cast<double>(a.train.size()) - 600.0) <= 10.0);

  std::set<std::string> test_ids(a.test_parcels.begin(), a.test_parcels.end());
  std::set<std::size_t> seen;
  for (const auto* part : {&a.train, &a.validation, &a.test}) {
    for (auto i : *part) CHECK(seen.insert(i).second);
  }
  CHECK(seen.size() == patches.size());
  for (auto i : a.train) CHECK_FALSE(test_ids.count(patches[i].origin.parcel_id));
  for (auto i : a.validation) CHECK_FALSE(test_ids.count(patches[i].origin.parcel_id));
  for (auto i : a.test) CHECK(test_ids.count(patches[i].origin.parcel_id));

  const auto c = stratified_split(patches, {}, 100, 10);
  CHECK((c.test_parcels != a.test_parcels || c.train != a.train));
}

TEST_CASE("split keeps every stratum close to the global train share") {
  const auto patches = fake_patches(25, 200, 5);  // 5,000 patches
  const auto s = stratified_split(patches, {}, 3, 10);
  const double global = static_cast<double>(s.train.size()) / static_cast<double>(s.train.size() + s.validation.size());
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> per_bin;
  auto bin_of = [&](std::size_t i) {
    const double m = patches[i].mean_valid_label();
    return static_cast<std::size_t>(std::upper_bound(s.bin_edges.begin(), s.bin_edges.end(), m) - s.bin_edges.begin());
  };
  for (auto i : s.train) per_bin[bin_of(i)].first++;
  for (auto i : s.validation) per_bin[bin_of(i)].second++;
  for (const auto& [bin, counts] : per_bin) {
    const auto n = counts.first + counts.second;
    if (n < 20) continue;
    CHECK(std::abs(static_cast<double>(counts.first) / n - global) <= 0.05);
    CHECK(std::abs(static_cast<double>(counts.first) - 0.75 * n) <= 1.0);
  }
}

TEST_CASE("split needs enough parcels") {
  CHECK_THROWS_AS(stratified_split(fake_patches(1, 50, 1), {}, 1, 5), ConfigError);
}

TEST_CASE("split manifest round-trips") {
  testutil::TempDir dir("split");
  const auto patches = fake_patches(6, 30, 2);
  const auto s = stratified_split(patches, {}, 7, 4);
  write_split(s, patches, dir.path() / "split.json", "cfg");
  const auto back = read_split(dir.path() / "split.json", patches);
  CHECK(back.train == s.train);
  CHECK(back.validation == s.validation);
  CHECK(back.test == s.test);
  CHECK(back.bin_edges == s.bin_edges);
  CHECK(back.test_parcels == s.test_parcels);
}

TEST_CASE("standardizer on {2,4,6}") {
  std::vector<LabeledPatch> ps(3);
  for (int i = 0; i < 3; ++i) {
    ps[i].input.assign(kPatchPixels, static_cast<float>(2 * (i + 1)));
    ps[i].label.fill(static_cast<float>(i));
    ps[i].label_mask.fill(1);
  }
  const auto s = fit_standardizer(ps);
  CHECK(s.mean[0] == doctest::Approx(4.0));
  CHECK(s.scale[0] == doctest::Approx(std::sqrt(8.0 / 3.0)));
  CHECK(apply_standardizer(s, ps[0]).input[0] == doctest::Approx(-1.2247).epsilon(1e-4));
  CHECK(apply_standardizer(s, ps[1]).input[5] == doctest::Approx(0.0).epsilon(1e-4));
  CHECK(apply_standardizer(s, ps[2]).input[63] == doctest::Approx(1.2247).epsilon(1e-4));

  const auto v = fit_standardizer(ps, ScaleMode::variance);
  CHECK(v.scale[0] == doctest::Approx(8.0 / 3.0));
}

TEST_CASE("standardizer with zero mean unit sd is the identity") {
  std::vector<LabeledPatch> ps(2);
  ps[0].input.assign(kPatchPixels, -1.0f);
  ps[1].input.assign(kPatchPixels, 1.0f);
  for (auto& p : ps) {
    p.label_mask.fill(1);
    p.label.fill(0.0f);
  }
  ps[0].label.fill(-1.0f);
  ps[1].label.fill(1.0f);
  const auto s = fit_standardizer(ps);
  LabeledPatch q = numbered_patch(1);
  q.label_mask.fill(1);
  for (std::size_t i = 0; i < kPatchPixels; ++i) q.input[i] = 0.01f * static_cast<float>(i);
  const auto out = apply_standardizer(s, q);
  for (std::size_t i = 0; i < kPatchPixels; ++i) CHECK(std::abs(out.input[i] - q.input[i]) <= 1e-7);
}

TEST_CASE("standardizer leaves masked labels as-is and ignores them when fitting") {
  auto p = numbered_patch(2);
  p.label[0] = -9999.0f;
  p.label_mask[0] = 0;
  std::vector<LabeledPatch> ps = {p};
  const auto s = fit_standardizer(ps);
  const auto out = apply_standardizer(s, p);
  CHECK(out.label[0] == -9999.0f);
  CHECK(out.label_mask == p.label_mask);
  CHECK(out.input[0] == 0.0f);  // invalid pixel inputs become 0
  // fit used valid pixels only: label mean equals mean of valid labels
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < kPatchPixels; ++i)
    if (p.label_mask[i]) {
      sum += p.label[i];
      ++n;
    }
  CHECK(s.label_mean == doctest::Approx(sum / n));
}

TEST_CASE("constant channel clamps the scale with a warning") {
  std::vector<LabeledPatch> ps(2, numbered_patch(2));
  for (auto& p : ps) std::fill(p.input.begin(), p.input.begin() + kPatchPixels, 5.0f);
  const auto s = fit_standardizer(ps);
  CHECK(s.scale[0] == kScaleEpsilon);
  CHECK_FALSE(s.warnings.empty());
}

TEST_CASE("standardizer fitted on train ignores validation changes") {
  auto patches = fake_patches(6, 30, 4);
  std::mt19937 rng(1);
  std::normal_distribution<float> n(0.0f, 3.0f);
  for (auto& p : patches) {
    p.input.resize(2 * kPatchPixels);
    for (auto& v : p.input) v = n(rng);
  }
  const auto split = stratified_split(patches, {}, 5, 4);
  const auto a = fit_standardizer(patches, split.train);
  for (auto i : split.validation) {
    for (auto& v : patches[i].input) v += 100.0f;
  }
  const auto b = fit_standardizer(patches, split.train);
  CHECK(a.mean == b.mean);
  CHECK(a.scale == b.scale);
}

TEST_CASE("standardizer file round-trip") {
  testutil::TempDir dir("std");
  std::vector<LabeledPatch> ps = {numbered_patch(3), numbered_patch(3)};
  ps[1].input[5] = 77.0f;
  const auto s = fit_standardizer(ps);
  write_standardizer(s, dir.path() / "s.json");
  const auto back = read_standardizer(dir.path() / "s.json");
  CHECK(back.mean == s.mean);
  CHECK(back.scale == s.scale);
  CHECK(back.label_mean == s.label_mean);
  CHECK(back.label_scale == s.label_scale);
}

TEST_CASE("flips are involutions and mirror coordinates") {
  const auto p = numbered_patch(2);
  for (bool h : {false, true})
    for (bool v : {false, true}) {
      const auto f = flip_patch(p, h, v);
      const auto back = flip_patch(f, h, v);
      CHECK(back.input == p.input);
      CHECK(back.label == p.label);
      CHECK(back.label_mask == p.label_mask);
      for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 0; c < 8; ++c) {
          const std::size_t rr = v ? 7 - r : r, cc = h ? 7 - c : c;
          CHECK(f.label[r * 8 + c] == p.label[rr * 8 + cc]);
          CHECK(f.label_mask[r * 8 + c] == p.label_mask[rr * 8 + cc]);
          CHECK(f.input[64 + r * 8 + c] == p.input[64 + rr * 8 + cc]);
        }
    }
}

TEST_CASE("flip augmentation preserves per-channel multisets and is seeded") {
  const auto p = numbered_patch(3);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = augment_flips(p, seed);
    CHECK(a.input == augment_flips(p, seed).input);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      std::vector<float> x(p.input.begin() + ch * 64, p.input.begin() + (ch + 1) * 64);
      std::vector<float> y(a.input.begin() + ch * 64, a.input.begin() + (ch + 1) * 64);
      std::sort(x.begin(), x.end());
      std::sort(y.begin(), y.end());
      CHECK(x == y);
    }
  }
}

TEST_CASE("flip draws are fair coins") {
  std::size_t h = 0, v = 0, both = 0;
  for (std::uint64_t i = 0; i < 10000; ++i) {
    const auto d = draw_flips(derive_seed(77, i));
    h += d.horizontal;
    v += d.vertical;
    both += d.horizontal && d.vertical;
  }
  CHECK(h / 10000.0 >= 0.47);
  CHECK(h / 10000.0 <= 0.53);
  CHECK(v / 10000.0 >= 0.47);
  CHECK(v / 10000.0 <= 0.53);
  CHECK(both / 10000.0 == doctest::Approx(0.25).epsilon(0.15));
}
