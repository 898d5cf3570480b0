#include <doctest.h>

#include <cmath>
#include <fstream>

#include "helpers.hpp"
#include "terrai/common.hpp"
#include "terrai/synth.hpp"

using namespace terrai;
using namespace terrai::synth;

namespace {

// Documented ground-truth formula, written out independently.
double truth_formula(double nir, double red) {
  const double ndvi = (nir + red) == 0.0 ? 0.0 : (nir - red) / (nir + red);
  return 160.0 / (1.0 + std::exp(6.0 * ndvi - 1.5));
}

FieldSpec spec_with_seed(std::uint64_t seed) {
  FieldSpec s;
  s.seed = seed;
  return s;
}

}  // namespace

TEST_CASE("generate_scene is deterministic") {
  const auto a = generate_scene(spec_with_seed(42));
  const auto b = generate_scene(spec_with_seed(42));
  REQUIRE(a.stack.channels.size() == b.stack.channels.size());
  for (std::size_t c = 0; c < a.stack.channels.size(); ++c) CHECK(a.stack.channels[c] == b.stack.channels[c]);
  CHECK(a.truth.grid == b.truth.grid);
  CHECK(a.stack.mask == b.stack.mask);
}

TEST_CASE("different seeds give different scenes") {
  const auto base = generate_scene(spec_with_seed(1000));
  for (std::uint64_t s = 1; s <= 10; ++s) {
    const auto other = generate_scene(spec_with_seed(1000 + s));
    CHECK_FALSE(other.truth.grid == base.truth.grid);
    CHECK_FALSE(other.stack.channels[0] == base.stack.channels[0]);
  }
}

TEST_CASE("scene shares mask, ids and dimensions between stack and truth") {
  FieldSpec spec = spec_with_seed(9);
  spec.height = 40;
  spec.width = 56;
  spec.parcel_id = "field_a";
  const auto s = generate_scene(spec);
  CHECK(s.stack.height() == 40);
  CHECK(s.stack.width() == 56);
  CHECK(s.stack.channels.size() == 18);
  CHECK(s.stack.mask == s.truth.mask);
  CHECK(s.stack.parcel_id == s.truth.parcel_id);
  CHECK(s.stack.phase == s.truth.phase);
  CHECK(s.stack.mask.count_valid() < 40 * 56);
}

TEST_CASE("boundary_irregularity 0 leaves the mask fully valid") {
  FieldSpec spec = spec_with_seed(5);
  spec.boundary_irregularity = 0.0;
  const auto s = generate_scene(spec);
  CHECK(s.stack.mask.count_valid() == spec.height * spec.width);
}

TEST_CASE("spectral values stay inside band ranges and truth is nonnegative") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto spec = spec_with_seed(seed);
    const auto s = generate_scene(spec);
    for (std::size_t b = 0; b < 4; ++b) {
      for (std::size_t i = 0; i < s.stack.mask.size(); ++i) {
        if (!s.stack.mask.at(i)) continue;
        const float v = s.stack.channels[b].values()[i];
        CHECK(v >= spec.band_ranges[b].min);
        CHECK(v <= spec.band_ranges[b].max);
      }
    }
    for (std::size_t i = 0; i < s.truth.mask.size(); ++i) {
      if (s.truth.mask.at(i)) CHECK(s.truth.grid.values()[i] >= 0.0f);
    }
  }
}

TEST_CASE("noise-free truth is re-derivable from the emitted bands") {
  FieldSpec spec = spec_with_seed(77);
  spec.label_noise_sd = 0.0;
  const auto s = generate_scene(spec);
  const auto nir = s.stack.schema.index_of("nir").value();
  const auto red = s.stack.schema.index_of("red").value();
  double worst = 0.0;
  for (std::size_t i = 0; i < s.truth.mask.size(); ++i) {
    if (!s.truth.mask.at(i)) continue;
    const double expect = truth_formula(s.stack.channels[nir].values()[i], s.stack.channels[red].values()[i]);
    worst = std::max(worst, std::abs(expect - s.truth.grid.values()[i]));
  }
  CHECK(worst <= 1e-5 * 160.0);
  // stored as float: the absolute gap is float rounding of values up to 160
  CHECK(worst < 2e-5);
}

TEST_CASE("truth decreases with NDVI") {
  CHECK(nitrogen_from_bands(3000.0f, 500.0f) < nitrogen_from_bands(2000.0f, 1000.0f));
  CHECK(nitrogen_from_bands(0.0f, 0.0f) == doctest::Approx(truth_formula(0, 0)));
}

TEST_CASE("field spec validation") {
  FieldSpec s;
  s.correlation_length = 100.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = FieldSpec{};
  s.band_ranges[2] = {5.0f, 5.0f};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = FieldSpec{};
  s.boundary_irregularity = 1.5;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = FieldSpec{};
  s.label_noise_sd = -1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("generate_dataset writes and reloads scenes") {
  testutil::TempDir dir("synth");
  const auto specs = default_specs(35, 123, 16, 16);
  const auto m = generate_dataset(specs, dir.path(), "abc");
  CHECK(m.scenes.size() == 35);
  const auto back = read_manifest(dir.path() / "manifest.json");
  CHECK(back.scenes.size() == 35);
  CHECK(back.config_checksum == "abc");
  CHECK(back.schema.count() == 18);
  const auto scenes = load_dataset(dir.path());
  REQUIRE(scenes.size() == 35);
  const auto regenerated = generate_scene(specs[7]);
  CHECK(scenes[7].truth.grid == regenerated.truth.grid);
  CHECK(scenes[7].stack.channels[3] == regenerated.stack.channels[3]);
}

TEST_CASE("generate_dataset edge cases") {
  testutil::TempDir dir("synth-edge");
  const auto empty = generate_dataset({}, dir.path() / "empty");
  CHECK(empty.scenes.empty());
  CHECK_FALSE(std::filesystem::exists(dir.path() / "empty"));

  auto specs = default_specs(3, 1, 16, 16);
  specs[2].parcel_id = specs[0].parcel_id;
  CHECK_THROWS_AS(generate_dataset(specs, dir.path() / "dup"), ConfigError);
  CHECK_FALSE(std::filesystem::exists(dir.path() / "dup" / "manifest.json"));
}

TEST_CASE("tampered scene file fails the checksum") {
  testutil::TempDir dir("synth-tamper");
  generate_dataset(default_specs(2, 4, 12, 12), dir.path());
  {
    std::fstream f(dir.path() / "parcel_001_k2.truth.band", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(10);
    f.put('\x01');
  }
  CHECK_THROWS(load_dataset(dir.path()));
}
