#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "terrai/autodiff.hpp"

namespace terrai::unet {

using autodiff::Graph;
using autodiff::Parameter;
using autodiff::Tensor4;
using autodiff::Var;

/// Encoder widths per level; the three published variants are
/// small 4/8/16, baseline 24/36/48, large 72/84/96.
struct WidthConfig {
  std::string name;
  std::array<std::size_t, 3> channels{};

  static WidthConfig small() { return {"small", {4, 8, 16}}; }
  static WidthConfig baseline() { return {"baseline", {24, 36, 48}}; }
  static WidthConfig large() { return {"large", {72, 84, 96}}; }
  /// "small" | "baseline" | "large"
  static WidthConfig from_name(const std::string& name);

  /// Throws ConfigError unless widths are positive and strictly increasing.
  void validate() const;
  bool operator==(const WidthConfig&) const = default;
};

inline constexpr std::size_t kDefaultInputChannels = 18;

/// Two double-conv encoder levels (each followed by 2×2 max pooling), a
/// double-conv bottleneck, two decoder levels (transposed-conv upsampling,
/// skip concatenation, double conv) and a 1×1 head with one output channel.
/// All 3×3 convolutions use zero padding 1 and ReLU.
class UNetModel {
 public:
  UNetModel(WidthConfig config, std::size_t input_channels, std::uint64_t seed);

  /// Records the forward pass of an N×C×8×8 batch; returns N×1×8×8.
  Var forward(Graph& graph, Var input);

  /// Forward without recording gradients.
  Tensor4 predict(const Tensor4& input) const;

  const WidthConfig& config() const { return config_; }
  std::size_t input_channels() const { return input_channels_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();

  std::vector<Tensor4> snapshot() const;
  void restore(const std::vector<Tensor4>& values);

 private:
  struct ConvLayer {
    Parameter weight;
    Parameter bias;
  };

  Var double_conv(Graph& g, Var x, ConvLayer& first, ConvLayer& second);
  std::vector<ConvLayer*> layers();
  std::vector<const ConvLayer*> layers() const;

  WidthConfig config_;
  std::size_t input_channels_;
  std::uint64_t seed_;

  ConvLayer enc1a_, enc1b_, enc2a_, enc2b_, bott_a_, bott_b_;
  ConvLayer up2_, dec2a_, dec2b_, up1_, dec1a_, dec1b_, head_;
};

UNetModel build_model(const WidthConfig& config, std::uint64_t seed,
                      std::size_t input_channels = kDefaultInputChannels);

std::size_t parameter_count(const UNetModel& model);

/// Closed-form count for the topology above, independent of any model instance.
std::size_t expected_parameter_count(const WidthConfig& config, std::size_t input_channels = kDefaultInputChannels);

inline constexpr double kLossEpsilon = 1e-12;

struct LossResult {
  double loss = 0.0;
  Tensor4 grad;  // d loss / d prediction, zero at invalid pixels
  std::size_t valid = 0;
};

/// sqrt(sum_valid (pred - label)^2 / |valid| + eps). `label` and `mask`
/// are N·H·W long and follow the prediction's pixel order.
LossResult masked_rmse_loss(const Tensor4& prediction, std::span<const float> label,
                            std::span<const std::uint8_t> mask);

struct CheckpointInfo {
  WidthConfig config;
  std::size_t input_channels = kDefaultInputChannels;
  std::uint64_t seed = 0;
  std::size_t parameter_count = 0;
  std::string schema_checksum;
  std::string parameters_checksum;
  std::string config_checksum;
};

/// Writes `<stem>.bin`, `<stem>.json` (parameter index) and
/// `<stem>.model.json` (architecture header). Returns the payload checksum.
std::string save_checkpoint(const UNetModel& model, const std::filesystem::path& stem,
                            const std::string& schema_checksum, const std::string& config_checksum = {});
CheckpointInfo read_checkpoint_info(const std::filesystem::path& stem);
UNetModel load_checkpoint(const std::filesystem::path& stem);

}  // namespace terrai::unet
