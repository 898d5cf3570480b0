#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "terrai/preprocess.hpp"
#include "terrai/raster.hpp"

namespace terrai::evaluate {

enum class Scope { patch, map };
std::string to_string(Scope s);

/// Error metrics in original units (kg N / ha). MAPE skips zero targets and
/// counts them; SMAPE = 100·mean(2|p-y| / (|p|+|y|)) over pixels with |p|+|y| > 0.
struct MetricReport {
  Scope scope = Scope::patch;
  double rmse = 0.0;
  double mape = 0.0;
  double smape = 0.0;
  std::size_t n_items = 0;
  std::size_t n_pixels = 0;
  std::size_t excluded_zero_targets = 0;
};

/// Pools squared, absolute-percentage and symmetric errors across calls.
class MetricAccumulator {
 public:
  void add(double prediction, double target);
  void add_items(std::size_t n) { items_ += n; }
  std::size_t pixels() const { return pixels_; }
  MetricReport finish(Scope scope) const;

 private:
  double sq_ = 0.0;
  double ape_ = 0.0;
  double sape_ = 0.0;
  std::size_t pixels_ = 0;
  std::size_t ape_count_ = 0;
  std::size_t sape_count_ = 0;
  std::size_t zero_targets_ = 0;
  std::size_t items_ = 0;
};

/// Flat arrays of N·64 pixels, pooled over all valid pixels.
MetricReport patch_metrics(std::span<const float> predictions, std::span<const float> labels,
                           std::span<const std::uint8_t> masks);

struct PatchPrediction {
  preprocess::PatchOrigin origin;
  std::array<float, preprocess::kPatchPixels> values{};
};

struct Reconstruction {
  raster::PrescriptionMap map;
  std::vector<std::uint32_t> coverage;  // H×W patch count per pixel
};

/// Each pixel becomes the plain mean of every patch prediction covering it;
/// pixels no patch covers are invalid.
Reconstruction reconstruct_map(std::span<const PatchPrediction> predictions, std::size_t height, std::size_t width,
                               std::string parcel_id = {}, int phase = 2);

/// Metrics over pixels valid in both maps. Every truth-valid pixel must be
/// valid in the reconstruction.
MetricReport map_metrics(const raster::PrescriptionMap& reconstructed, const raster::PrescriptionMap& truth);

/// Adds one map pair to a pooled accumulator.
void accumulate_map(MetricAccumulator& acc, const raster::PrescriptionMap& reconstructed,
                    const raster::PrescriptionMap& truth);

std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& variant, const MetricReport& r);

/// Writes actual and predicted maps as 8-bit binary PGMs on one linear
/// scale spanning the valid values of both; invalid pixels are black.
void render_pgm_pair(const raster::PrescriptionMap& actual, const raster::PrescriptionMap& predicted,
                     const std::filesystem::path& actual_path, const std::filesystem::path& predicted_path);

}  // namespace terrai::evaluate
