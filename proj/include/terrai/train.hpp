#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "terrai/green.hpp"
#include "terrai/preprocess.hpp"
#include "terrai/unet.hpp"

namespace terrai::train {

struct TrainConfig {
  double learning_rate = 1e-3;
  int max_epochs = 200;
  int patience = 10;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  bool augment = true;
  // Desk-scale knobs: 0 means "use every patch".
  std::size_t train_patches_per_epoch = 0;
  std::size_t validation_patches = 0;

  void validate() const;
};

struct AdamState {
  std::vector<autodiff::Tensor4> first_moment;
  std::vector<autodiff::Tensor4> second_moment;
  std::uint64_t step = 0;
};

AdamState make_adam_state(std::span<const autodiff::Parameter* const> params);

/// Bias-corrected Adam update; gradients are zeroed afterwards. A NaN
/// gradient aborts before any parameter is touched.
void adam_step(std::span<autodiff::Parameter* const> params, AdamState& state, const TrainConfig& config);

/// Improvement means strictly lower validation loss.
struct EarlyStopState {
  double best_validation_loss = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int epochs_since_improvement = 0;

  /// Returns true when `loss` improves on the best so far.
  bool observe(int epoch, double loss);
  bool exhausted(int patience) const { return epochs_since_improvement >= patience; }
};

enum class StopReason { early_stopping, max_epochs };
std::string to_string(StopReason r);

struct EarlyStopOutcome {
  int epochs_run = 0;
  int best_epoch = 0;
  double best_validation_loss = 0.0;
  StopReason reason = StopReason::max_epochs;
};

/// Epoch driver shared by train_loop and its tests: calls `run_epoch(e)`
/// for e = 1.. until patience runs out or max_epochs is reached; `run_epoch`
/// returns that epoch's validation loss. `on_improvement` fires whenever a
/// new best is observed so the caller can checkpoint.
EarlyStopOutcome run_with_early_stopping(int max_epochs, int patience, const std::function<double(int)>& run_epoch,
                                         const std::function<void(int)>& on_improvement = {});

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
};

struct TrainReport {
  TrainConfig config;
  std::string variant;
  std::array<std::size_t, 3> channels{};
  std::size_t parameter_count = 0;
  std::vector<EpochRecord> epochs;
  StopReason stop_reason = StopReason::max_epochs;
  int best_epoch = 0;
  double best_validation_loss = 0.0;
  double wall_seconds = 0.0;
  green::EnergySample energy;
  std::string checkpoint_path;
  std::string checkpoint_checksum;
  std::string config_checksum;
};

/// Pooled masked RMSE over `indices` (no augmentation), in standardized units.
double evaluate_loss(const unet::UNetModel& model, std::span<const preprocess::LabeledPatch> patches,
                     std::span<const std::size_t> indices, std::size_t batch_size = 256);

/// Stacks patches into an N×C×8×8 batch plus flat labels and masks.
struct Batch {
  autodiff::Tensor4 input;
  std::vector<float> label;
  std::vector<std::uint8_t> mask;
};
Batch make_batch(std::span<const preprocess::LabeledPatch> patches, std::span<const std::size_t> indices);

using ProgressFn = std::function<void(const EpochRecord&)>;

/// Trains on standardized patches. Each epoch shuffles train patches
/// (seeded), flips them on the fly, optimizes masked RMSE with Adam, then
/// scores validation. Restores the best-epoch parameters before returning.
TrainReport train_loop(unet::UNetModel& model, std::span<const preprocess::LabeledPatch> patches,
                       const preprocess::DatasetSplit& split, const TrainConfig& config,
                       green::EnergySource& energy, const ProgressFn& progress = {});

std::string train_report_json(const TrainReport& report);
void write_train_report(const TrainReport& report, const std::filesystem::path& path);
TrainReport read_train_report(const std::filesystem::path& path);

}  // namespace terrai::train
