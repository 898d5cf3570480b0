#include "terrai/unet.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "terrai/common.hpp"

namespace terrai::unet {

using autodiff::Shape;

WidthConfig WidthConfig::from_name(const std::string& name) {
  if (name == "small") return small();
  if (name == "baseline") return baseline();
  if (name == "large") return large();
  throw ConfigError("unknown width variant '" + name + "' (expected small, baseline or large)");
}

void WidthConfig::validate() const {
  if (channels[0] == 0) throw ConfigError("width config '" + name + "': channels must be positive");
  if (!(channels[0] < channels[1] && channels[1] < channels[2])) {
    throw ConfigError("width config '" + name + "': channels must increase strictly across levels");
  }
}

namespace {

// He-uniform: U(-b, b) with b = sqrt(6 / fan_in).
void he_uniform(Parameter& p, std::size_t fan_in, std::mt19937_64& rng) {
  const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in)));
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (auto& v : p.value.data()) v = dist(rng);
}

}  // namespace

UNetModel::UNetModel(WidthConfig config, std::size_t input_channels, std::uint64_t seed)
    : config_(std::move(config)), input_channels_(input_channels), seed_(seed) {
  config_.validate();
  if (input_channels_ == 0) throw ConfigError("model needs at least one input channel");
  const auto [c1, c2, c3] = config_.channels;
  std::mt19937_64 rng(seed);

  auto conv = [&](ConvLayer& layer, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k) {
    layer.weight = Parameter(name + ".weight", Shape{cout, cin, k, k});
    layer.bias = Parameter(name + ".bias", Shape{cout, 1, 1, 1});
    he_uniform(layer.weight, cin * k * k, rng);
  };
  // Each output pixel of the stride-2 transposed conv sees exactly Cin inputs.
  auto upconv = [&](ConvLayer& layer, const std::string& name, std::size_t cin, std::size_t cout) {
    layer.weight = Parameter(name + ".weight", Shape{cin, cout, 2, 2});
    layer.bias = Parameter(name + ".bias", Shape{cout, 1, 1, 1});
    he_uniform(layer.weight, cin, rng);
  };

  conv(enc1a_, "enc1.conv1", input_channels_, c1, 3);
  conv(enc1b_, "enc1.conv2", c1, c1, 3);
  conv(enc2a_, "enc2.conv1", c1, c2, 3);
  conv(enc2b_, "enc2.conv2", c2, c2, 3);
  conv(bott_a_, "bottleneck.conv1", c2, c3, 3);
  conv(bott_b_, "bottleneck.conv2", c3, c3, 3);
  upconv(up2_, "dec2.up", c3, c2);
  conv(dec2a_, "dec2.conv1", 2 * c2, c2, 3);
  conv(dec2b_, "dec2.conv2", c2, c2, 3);
  upconv(up1_, "dec1.up", c2, c1);
  conv(dec1a_, "dec1.conv1", 2 * c1, c1, 3);
  conv(dec1b_, "dec1.conv2", c1, c1, 3);
  conv(head_, "head", c1, 1, 1);
}

Var UNetModel::double_conv(Graph& g, Var x, ConvLayer& first, ConvLayer& second) {
  x = g.relu(g.conv2d(x, first.weight, first.bias, 1));
  return g.relu(g.conv2d(x, second.weight, second.bias, 1));
}

Var UNetModel::forward(Graph& g, Var input) {
  const auto& s = g.value(input).shape();
  if (s.c != input_channels_) {
    throw ShapeError("model expects " + std::to_string(input_channels_) + " input channels, got " +
                     std::to_string(s.c));
  }
  if (s.h % 4 != 0 || s.w % 4 != 0) throw ShapeError("model input size must be divisible by 4");
  const Var e1 = double_conv(g, input, enc1a_, enc1b_);
  const Var e2 = double_conv(g, g.maxpool2(e1), enc2a_, enc2b_);
  const Var b = double_conv(g, g.maxpool2(e2), bott_a_, bott_b_);
  const Var d2 = double_conv(g, g.concat_channels(g.upsample2(b, up2_.weight, up2_.bias), e2), dec2a_, dec2b_);
  const Var d1 = double_conv(g, g.concat_channels(g.upsample2(d2, up1_.weight, up1_.bias), e1), dec1a_, dec1b_);
  return g.conv2d(d1, head_.weight, head_.bias, 0);
}

Tensor4 UNetModel::predict(const Tensor4& input) const {
  // Nothing is written through these references when recording is off.
  auto& self = const_cast<UNetModel&>(*this);
  Graph g(false);
  const Var out = self.forward(g, g.input(input));
  return g.value(out);
}

std::vector<UNetModel::ConvLayer*> UNetModel::layers() {
  return {&enc1a_, &enc1b_, &enc2a_, &enc2b_, &bott_a_, &bott_b_, &up2_,
          &dec2a_, &dec2b_, &up1_,   &dec1a_, &dec1b_, &head_};
}

std::vector<const UNetModel::ConvLayer*> UNetModel::layers() const {
  return {&enc1a_, &enc1b_, &enc2a_, &enc2b_, &bott_a_, &bott_b_, &up2_,
          &dec2a_, &dec2b_, &up1_,   &dec1a_, &dec1b_, &head_};
}

std::vector<Parameter*> UNetModel::parameters() {
  std::vector<Parameter*> out;
  for (auto* l : layers()) {
    out.push_back(&l->weight);
    out.push_back(&l->bias);
  }
  return out;
}

std::vector<const Parameter*> UNetModel::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto* l : layers()) {
    out.push_back(&l->weight);
    out.push_back(&l->bias);
  }
  return out;
}

std::size_t UNetModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->value.numel();
  return n;
}

void UNetModel::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

std::vector<Tensor4> UNetModel::snapshot() const {
  std::vector<Tensor4> out;
  for (const auto* p : parameters()) out.push_back(p->value);
  return out;
}

void UNetModel::restore(const std::vector<Tensor4>& values) {
  auto params = parameters();
  if (values.size() != params.size()) throw ShapeError("restore: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (values[i].shape() != params[i]->value.shape()) throw ShapeError("restore: shape mismatch for " + params[i]->name);
    params[i]->value = values[i];
  }
}

UNetModel build_model(const WidthConfig& config, std::uint64_t seed, std::size_t input_channels) {
  return UNetModel(config, input_channels, seed);
}

std::size_t parameter_count(const UNetModel& model) { return model.parameter_count(); }

std::size_t expected_parameter_count(const WidthConfig& config, std::size_t input_channels) {
  const auto [c1, c2, c3] = config.channels;
  auto conv3 = [](std::size_t cin, std::size_t cout) { return cin * cout * 9 + cout; };
  auto up = [](std::size_t cin, std::size_t cout) { return cin * cout * 4 + cout; };
  return conv3(input_channels, c1) + conv3(c1, c1) + conv3(c1, c2) + conv3(c2, c2) + conv3(c2, c3) +
         conv3(c3, c3) + up(c3, c2) + conv3(2 * c2, c2) + conv3(c2, c2) + up(c2, c1) + conv3(2 * c1, c1) +
         conv3(c1, c1) + (c1 + 1);
}

LossResult masked_rmse_loss(const Tensor4& prediction, std::span<const float> label,
                            std::span<const std::uint8_t> mask) {
  const std::size_t n = prediction.numel();
  if (label.size() != n || mask.size() != n) {
    throw ShapeError("masked_rmse_loss: prediction has " + std::to_string(n) + " pixels, labels " +
                     std::to_string(label.size()) + ", mask " + std::to_string(mask.size()));
  }
  double sq = 0.0;
  std::size_t valid = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const double d = static_cast<double>(prediction[i]) - static_cast<double>(label[i]);
    sq += d * d;
    ++valid;
  }
  if (valid == 0) throw ConfigError("masked_rmse_loss: batch has no valid pixels");
  LossResult r;
  r.valid = valid;
  r.loss = std::sqrt(sq / static_cast<double>(valid) + kLossEpsilon);
  r.grad = Tensor4(prediction.shape());
  const double scale = 1.0 / (static_cast<double>(valid) * r.loss);
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    r.grad[i] = static_cast<float>((static_cast<double>(prediction[i]) - static_cast<double>(label[i])) * scale);
  }
  return r;
}

std::string save_checkpoint(const UNetModel& model, const std::filesystem::path& stem,
                            const std::string& schema_checksum, const std::string& config_checksum) {
  const auto params = model.parameters();
  const auto sum = autodiff::save_parameters(params, stem);
  nlohmann::json j;
  j["format"] = "terrai-unet";
  j["version"] = 1;
  j["config_name"] = model.config().name;
  j["channels"] = model.config().channels;
  j["input_channels"] = model.input_channels();
  j["input_schema_checksum"] = schema_checksum;
  j["seed"] = model.seed();
  j["parameter_count"] = model.parameter_count();
  j["parameters_checksum"] = sum;
  j["config_checksum"] = config_checksum;
  std::ofstream out(stem.string() + ".model.json", std::ios::trunc);
  if (!out) throw Error("cannot write " + stem.string() + ".model.json");
  out << j.dump(2) << '\n';
  return sum;
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& stem) {
  std::ifstream in(stem.string() + ".model.json");
  if (!in) throw DependencyError("missing checkpoint " + stem.string() + ".model.json");
  try {
    nlohmann::json j;
    in >> j;
    CheckpointInfo info;
    info.config.name = j.at("config_name").get<std::string>();
    info.config.channels = j.at("channels").get<std::array<std::size_t, 3>>();
    info.input_channels = j.at("input_channels").get<std::size_t>();
    info.seed = j.at("seed").get<std::uint64_t>();
    info.parameter_count = j.at("parameter_count").get<std::size_t>();
    info.schema_checksum = j.at("input_schema_checksum").get<std::string>();
    info.parameters_checksum = j.at("parameters_checksum").get<std::string>();
    info.config_checksum = j.value("config_checksum", std::string{});
    return info;
  } catch (const nlohmann::json::exception& e) {
    throw IngestError(stem.string() + ".model.json: " + e.what());
  }
}

UNetModel load_checkpoint(const std::filesystem::path& stem) {
  const auto info = read_checkpoint_info(stem);
  UNetModel model(info.config, info.input_channels, info.seed);
  auto params = model.parameters();
  autodiff::load_parameters(params, stem);
  if (model.parameter_count() != info.parameter_count) {
    throw IngestError(stem.string() + ": parameter count does not match header");
  }
  return model;
}

}  // namespace terrai::unet
