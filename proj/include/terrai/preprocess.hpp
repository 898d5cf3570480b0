#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "terrai/synth.hpp"

namespace terrai::preprocess {

inline constexpr std::size_t kPatchSize = 8;
inline constexpr std::size_t kPatchPixels = kPatchSize * kPatchSize;

struct PatchOrigin {
  std::string parcel_id;
  int phase = 2;
  std::size_t row = 0;
  std::size_t col = 0;

  bool operator==(const PatchOrigin&) const = default;
  auto operator<=>(const PatchOrigin&) const = default;
};

/// An 8×8 training window. `input` is channel-major (C×8×8).
struct LabeledPatch {
  std::vector<float> input;
  std::array<float, kPatchPixels> label{};
  std::array<std::uint8_t, kPatchPixels> label_mask{};
  PatchOrigin origin;

  std::size_t channels() const { return input.size() / kPatchPixels; }
  std::size_t valid_count() const;
  /// Mean over valid label pixels; 0 if none.
  double mean_valid_label() const;
};

// ---- outlier removal ------------------------------------------------------

/// Linear-interpolation quantile of sorted data, p in [0, 1].
double quantile_sorted(std::span<const double> sorted, double p);

struct IqrFences {
  double q1 = 0.0;
  double q3 = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

inline constexpr double kIqrMultiplier = 1.5;

IqrFences iqr_fences(std::span<const double> values, double multiplier = kIqrMultiplier);

struct IqrResult {
  std::vector<std::size_t> kept;     // indices into the input, in order
  std::vector<std::size_t> dropped;
  IqrFences fences;
};

/// Index-level IQR partition on per-scene statistics; keeps the closed
/// interval [Q1 - m·IQR, Q3 + m·IQR]. Needs at least four values.
IqrResult iqr_partition(std::span<const double> stats, double multiplier = kIqrMultiplier);

/// Mean of valid prescription values.
double mean_valid_rate(const raster::PrescriptionMap& map);

struct SceneFilterResult {
  std::vector<synth::SyntheticScene> kept;
  std::vector<synth::SyntheticScene> dropped;
  IqrFences fences;
};

/// Drops scenes whose mean valid prescription lies outside the Tukey
/// fences. Throws when fewer than 4 scenes are given or nothing survives.
SceneFilterResult iqr_filter(std::vector<synth::SyntheticScene> scenes, double multiplier = kIqrMultiplier);

// ---- patches ---------------------------------------------------------------

/// All stride-1 8×8 windows in row-major origin order, minus windows whose
/// label mask is entirely invalid.
std::vector<LabeledPatch> extract_patches(const synth::SyntheticScene& scene);

// ---- split -----------------------------------------------------------------

struct SplitRatios {
  double train = 0.60;
  double validation = 0.20;
  double test = 0.20;
};

/// Partitions hold indices into the patch list they were computed from.
struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
  std::vector<std::string> test_parcels;
  std::vector<double> bin_edges;
  SplitRatios ratios;
  std::uint64_t seed = 0;
  std::size_t bins = 10;
};

/// Whole parcels go to test first (seeded order) until the test share is
/// reached; the remainder is binned into quantile strata of the mean valid
/// label and split train:validation within each stratum.
DatasetSplit stratified_split(std::span<const LabeledPatch> patches, SplitRatios ratios, std::uint64_t seed,
                              std::size_t bins = 10);

void write_split(const DatasetSplit& split, std::span<const LabeledPatch> patches,
                 const std::filesystem::path& path, const std::string& config_checksum = {});

/// Maps the origins stored in a split manifest back onto `patches`.
DatasetSplit read_split(const std::filesystem::path& path, std::span<const LabeledPatch> patches);

// ---- standardization -------------------------------------------------------

enum class ScaleMode { stddev, variance };

inline constexpr double kScaleEpsilon = 1e-8;

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;
  double label_mean = 0.0;
  double label_scale = 1.0;
  ScaleMode mode = ScaleMode::stddev;
  std::string fitted_on = "train";
  std::vector<std::string> warnings;

  double label_to_original(double standardized) const { return standardized * label_scale + label_mean; }
};

/// Statistics over valid pixels of the given patches (population moments).
Standardizer fit_standardizer(std::span<const LabeledPatch> train, ScaleMode mode = ScaleMode::stddev);
Standardizer fit_standardizer(std::span<const LabeledPatch> patches, std::span<const std::size_t> indices,
                              ScaleMode mode = ScaleMode::stddev);

/// Valid pixels get (x - mean)/scale; invalid input pixels stay 0 and
/// invalid label pixels keep their raw value.
LabeledPatch apply_standardizer(const Standardizer& s, const LabeledPatch& patch);
void apply_standardizer_inplace(const Standardizer& s, LabeledPatch& patch);

void write_standardizer(const Standardizer& s, const std::filesystem::path& path,
                        const std::string& config_checksum = {});
Standardizer read_standardizer(const std::filesystem::path& path);

// ---- augmentation ----------------------------------------------------------

/// Mirrors columns (horizontal) and/or rows (vertical) of input, label and mask.
LabeledPatch flip_patch(const LabeledPatch& patch, bool horizontal, bool vertical);

struct FlipDraw {
  bool horizontal = false;
  bool vertical = false;
};

/// Independent fair coin per axis, fully determined by `seed`.
FlipDraw draw_flips(std::uint64_t seed);

LabeledPatch augment_flips(const LabeledPatch& patch, std::uint64_t seed);

}  // namespace terrai::preprocess
