#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>

#include "terrai/raster.hpp"
#include "terrai/synth.hpp"

namespace testutil {

// Fresh scratch directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("terrai-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Scene with `channels` random planes, truth from a uniform draw and the given mask.
inline terrai::synth::SyntheticScene random_scene(std::size_t h, std::size_t w, std::uint64_t seed,
                                                   const std::string& id = "p", double invalid_rate = 0.0,
                                                   std::size_t channels = 3) {
  using namespace terrai;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 100.0f);
  std::bernoulli_distribution drop(invalid_rate);
  synth::SyntheticScene s;
  raster::ValidityMask mask(h, w, true);
  for (std::size_t i = 0; i < h * w; ++i) mask.set(i, !drop(rng));
  std::vector<raster::ChannelEntry> entries;
  for (std::size_t c = 0; c < channels; ++c) entries.push_back({"c" + std::to_string(c), raster::ChannelKind::spectral});
  s.stack.schema = raster::ChannelSchema(entries);
  for (std::size_t c = 0; c < channels; ++c) {
    raster::BandGrid g(h, w);
    for (auto& v : g.values()) v = u(rng);
    s.stack.channels.push_back(g);
  }
  s.stack.mask = mask;
  s.stack.parcel_id = id;
  s.truth.grid = raster::BandGrid(h, w, raster::kDefaultNoData);
  for (std::size_t i = 0; i < h * w; ++i) {
    if (mask.at(i)) s.truth.grid.values()[i] = u(rng);
  }
  s.truth.mask = mask;
  s.truth.parcel_id = id;
  return s;
}

}  // namespace testutil
