#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "terrai/evaluate.hpp"
#include "terrai/green.hpp"
#include "terrai/preprocess.hpp"
#include "terrai/synth.hpp"
#include "terrai/train.hpp"

namespace terrai::pipeline {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kOutputRootEnv = "TERRAI_OUTPUT_ROOT";

struct DatasetConfig {
  std::size_t scenes = 35;
  std::size_t height = 48;
  std::size_t width = 48;
  double correlation_length = 6.0;
  double label_noise_sd = 2.0;
  double boundary_irregularity = 0.3;
  int phase = 2;
};

struct PreprocessConfig {
  double iqr_multiplier = preprocess::kIqrMultiplier;
  std::size_t bins = 10;
  preprocess::SplitRatios ratios;
  preprocess::ScaleMode scale = preprocess::ScaleMode::stddev;
};

struct EnergyConfig {
  std::string mode = "estimated";  // estimated | measured
  double power_watts = 15.0;
  std::map<std::string, double> measured_joules;  // per variant, measured mode
};

struct RenderConfig {
  std::size_t scenes = 2;
};

struct RunConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 20250501;
  std::filesystem::path output_dir = "terrai-run";
  DatasetConfig dataset;
  PreprocessConfig preprocess;
  std::vector<std::string> variants = {"small", "baseline", "large"};
  train::TrainConfig train;
  EnergyConfig energy;
  green::EmissionFactor emission_factor;
  std::string reference_variant = "baseline";
  RenderConfig render;
};

/// Full configuration with every default filled in. `output_dir` falls back
/// to $TERRAI_OUTPUT_ROOT when that is set.
nlohmann::json default_config_json();

/// Strict conversion: unknown keys and wrong types raise ConfigError.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& config);

/// Reads a config file and deep-merges it over the defaults.
nlohmann::json load_config_json(const std::filesystem::path& path);

/// Applies a flattened `a.b.c` override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
void apply_override(nlohmann::json& config, const std::string& dotted_key, const std::string& value);

/// Checksum of the configuration sections a stage depends on.
std::string stage_checksum(const RunConfig& config, const std::string& stage, const std::string& variant = {});

struct Paths {
  std::filesystem::path root;
  std::filesystem::path dataset() const { return root / "dataset"; }
  std::filesystem::path prep() const { return root / "prep"; }
  std::filesystem::path train(const std::string& variant) const { return root / "train" / variant; }
  std::filesystem::path eval(const std::string& variant) const { return root / "eval" / variant; }
  std::filesystem::path render(const std::string& variant) const { return root / "render" / variant; }
  std::filesystem::path green() const { return root / "green"; }
  std::filesystem::path checkpoint(const std::string& variant) const { return train(variant) / "model"; }
};

// ---- stages -----------------------------------------------------------------

synth::DatasetManifest run_synth(const RunConfig& config);

struct PrepSummary {
  std::vector<std::string> kept_scenes;
  std::vector<std::string> dropped_scenes;
  preprocess::IqrFences fences;
  std::size_t patches = 0;
  std::size_t train = 0;
  std::size_t validation = 0;
  std::size_t test = 0;
  std::vector<std::string> test_parcels;
};
PrepSummary run_prep(const RunConfig& config);

/// Scenes that survived outlier removal with their patches, split and
/// standardizer; patches are standardized in place.
struct PreparedData {
  std::vector<synth::SyntheticScene> scenes;
  std::vector<preprocess::LabeledPatch> patches;
  preprocess::DatasetSplit split;
  preprocess::Standardizer standardizer;
  raster::ChannelSchema schema;
};
PreparedData load_prepared(const RunConfig& config);

train::TrainReport run_train(const RunConfig& config, const std::string& variant,
                             const train::ProgressFn& progress = {});
train::TrainReport run_train(const RunConfig& config, const std::string& variant, const PreparedData& data,
                             const train::ProgressFn& progress = {});

struct MapResult {
  std::string parcel_id;
  evaluate::MetricReport metrics;
  evaluate::Reconstruction reconstruction;
  raster::PrescriptionMap truth;
};

struct EvalResult {
  std::string variant;
  std::size_t parameter_count = 0;
  evaluate::MetricReport patch;
  evaluate::MetricReport map;
  evaluate::MetricReport mean_predictor_patch;  // predicts the train label mean everywhere
  std::vector<MapResult> per_map;
};
EvalResult run_eval(const RunConfig& config, const std::string& variant);

/// PGM pairs (actual, predicted) for the first `render.scenes` test maps.
std::vector<std::filesystem::path> run_render(const RunConfig& config, const std::string& variant);

/// Green report over the variants whose train reports exist. `power_watts`
/// re-estimates joules from recorded wall time.
green::GreenReport run_green_report(const RunConfig& config, std::optional<double> power_watts = std::nullopt);

}  // namespace terrai::pipeline
