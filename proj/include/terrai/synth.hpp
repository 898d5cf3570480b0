#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "terrai/raster.hpp"

namespace terrai::synth {

struct BandRange {
  float min = 0.0f;
  float max = 1.0f;
};

/// Parameters of one synthetic parcel. Spectral ranges follow the schema's
/// spectral order (nir, red, green, blue) on the 12-bit 0..4095 scale.
struct FieldSpec {
  std::size_t height = 48;
  std::size_t width = 48;
  double correlation_length = 6.0;
  std::array<BandRange, 4> band_ranges = {{{1200.0f, 3800.0f}, {150.0f, 1400.0f},
                                           {250.0f, 1500.0f}, {100.0f, 1100.0f}}};
  double label_noise_sd = 2.0;
  double boundary_irregularity = 0.3;
  std::uint64_t seed = 0;
  std::string parcel_id = "parcel_000";
  int phase = 2;

  /// Throws ConfigError on any violated constraint.
  void validate() const;
};

struct SyntheticScene {
  raster::RasterStack stack;
  raster::PrescriptionMap truth;
};

// Ground-truth nitrogen: N = kNitrogenMax * (1 - sigmoid(kNdviSlope * NDVI + kNdviOffset)),
// plus smoothed noise scaled to label_noise_sd, clipped at 0.
inline constexpr double kNitrogenMax = 160.0;
inline constexpr double kNdviSlope = 6.0;
inline constexpr double kNdviOffset = -1.5;

/// Noise-free nitrogen rate for one pixel, computed in double precision
/// from float band values.
double nitrogen_from_bands(float nir, float red);

/// Deterministic given `spec.seed`.
SyntheticScene generate_scene(const FieldSpec& spec);

/// `count` specs with parcel ids parcel_000.. and per-scene seeds derived
/// from `global_seed`.
std::vector<FieldSpec> default_specs(std::size_t count, std::uint64_t global_seed,
                                     std::size_t height = 48, std::size_t width = 48);

struct SceneRecord {
  std::string scene_id;
  std::string parcel_id;
  int phase = 2;
  std::uint64_t seed = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::string stack_stem;  // relative to the dataset directory
  std::string truth_stem;
  std::string stack_checksum;
  std::string truth_checksum;
};

struct DatasetManifest {
  int schema_version = 1;
  std::string config_checksum;
  raster::ChannelSchema schema;
  std::vector<SceneRecord> scenes;
};

/// Writes one stack/truth pair per spec and `manifest.json` into `out_dir`.
/// Duplicate parcel ids are rejected before anything is written.
DatasetManifest generate_dataset(const std::vector<FieldSpec>& specs, const std::filesystem::path& out_dir,
                                 const std::string& config_checksum = {});

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Loads every scene listed in the manifest, verifying checksums.
std::vector<SyntheticScene> load_dataset(const std::filesystem::path& dataset_dir);

}  // namespace terrai::synth
