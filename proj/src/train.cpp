#include "terrai/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "terrai/common.hpp"

namespace terrai::train {

using autodiff::Parameter;
using autodiff::Shape;
using autodiff::Tensor4;
using preprocess::kPatchPixels;
using preprocess::kPatchSize;
using preprocess::LabeledPatch;

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
  if (max_epochs <= 0) throw ConfigError("train: max_epochs must be positive");
  if (patience <= 0 || patience > max_epochs) {
    throw ConfigError("train: patience must lie in [1, max_epochs]");
  }
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("train: Adam betas must lie in [0, 1)");
  }
  if (!(adam_epsilon > 0.0)) throw ConfigError("train: adam_epsilon must be positive");
}

AdamState make_adam_state(std::span<const Parameter* const> params) {
  AdamState s;
  for (const auto* p : params) {
    s.first_moment.emplace_back(p->value.shape());
    s.second_moment.emplace_back(p->value.shape());
  }
  return s;
}

void adam_step(std::span<Parameter* const> params, AdamState& state, const TrainConfig& config) {
  if (state.first_moment.size() != params.size()) throw ShapeError("adam_step: state does not match parameters");
  for (const auto* p : params) {
    for (float g : p->grad.data()) {
      if (!std::isfinite(g)) throw Error("adam_step: non-finite gradient in parameter '" + p->name + "'");
    }
  }
  ++state.step;
  const double b1 = config.adam_beta1;
  const double b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    auto m = state.first_moment[k].data();
    auto v = state.second_moment[k].data();
    auto w = p.value.data();
    auto g = p.grad.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double update = config.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + config.adam_epsilon);
      w[i] = static_cast<float>(w[i] - update);
    }
    p.zero_grad();
  }
}

bool EarlyStopState::observe(int epoch, double loss) {
  if (loss < best_validation_loss) {
    best_validation_loss = loss;
    best_epoch = epoch;
    epochs_since_improvement = 0;
    return true;
  }
  ++epochs_since_improvement;
  return false;
}

std::string to_string(StopReason r) { return r == StopReason::early_stopping ? "early_stopping" : "max_epochs"; }

EarlyStopOutcome run_with_early_stopping(int max_epochs, int patience, const std::function<double(int)>& run_epoch,
                                         const std::function<void(int)>& on_improvement) {
  EarlyStopState state;
  EarlyStopOutcome out;
  for (int epoch = 1; epoch <= max_epochs; ++epoch) {
    const double loss = run_epoch(epoch);
    if (std::isnan(loss)) throw Error("validation loss is NaN at epoch " + std::to_string(epoch));
    out.epochs_run = epoch;
    if (state.observe(epoch, loss) && on_improvement) on_improvement(epoch);
    if (state.exhausted(patience)) {
      out.reason = StopReason::early_stopping;
      break;
    }
  }
  out.best_epoch = state.best_epoch;
  out.best_validation_loss = state.best_validation_loss;
  return out;
}

Batch make_batch(std::span<const LabeledPatch> patches, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ConfigError("make_batch: empty batch");
  const std::size_t channels = patches[indices.front()].channels();
  Batch b;
  b.input = Tensor4(Shape{indices.size(), channels, kPatchSize, kPatchSize});
  b.label.resize(indices.size() * kPatchPixels);
  b.mask.resize(indices.size() * kPatchPixels);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& p = patches[indices[i]];
    if (p.channels() != channels) throw ShapeError("make_batch: patches differ in channel count");
    std::memcpy(b.input.raw() + i * channels * kPatchPixels, p.input.data(), channels * kPatchPixels * sizeof(float));
    std::copy(p.label.begin(), p.label.end(), b.label.begin() + static_cast<std::ptrdiff_t>(i * kPatchPixels));
    std::copy(p.label_mask.begin(), p.label_mask.end(), b.mask.begin() + static_cast<std::ptrdiff_t>(i * kPatchPixels));
  }
  return b;
}

double evaluate_loss(const unet::UNetModel& model, std::span<const LabeledPatch> patches,
                     std::span<const std::size_t> indices, std::size_t batch_size) {
  double sq = 0.0;
  std::size_t valid = 0;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto chunk = indices.subspan(start, std::min(batch_size, indices.size() - start));
    const auto batch = make_batch(patches, chunk);
    const auto pred = model.predict(batch.input);
    for (std::size_t i = 0; i < pred.numel(); ++i) {
      if (!batch.mask[i]) continue;
      const double d = static_cast<double>(pred[i]) - batch.label[i];
      sq += d * d;
      ++valid;
    }
  }
  if (valid == 0) throw ConfigError("evaluate_loss: no valid pixels");
  return std::sqrt(sq / static_cast<double>(valid));
}

namespace {

std::vector<std::size_t> seeded_subset(std::span<const std::size_t> indices, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> out(indices.begin(), indices.end());
  if (count == 0 || count >= out.size()) return out;
  std::mt19937_64 rng(seed);
  std::shuffle(out.begin(), out.end(), rng);
  out.resize(count);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TrainReport train_loop(unet::UNetModel& model, std::span<const LabeledPatch> patches,
                       const preprocess::DatasetSplit& split, const TrainConfig& config,
                       green::EnergySource& energy, const ProgressFn& progress) {
  config.validate();
  if (split.train.empty() || split.validation.empty()) {
    throw ConfigError("train_loop: train and validation partitions must be nonempty");
  }
  const auto wall_start = std::chrono::steady_clock::now();
  energy.start();

  TrainReport report;
  report.config = config;
  report.variant = model.config().name;
  report.channels = model.config().channels;
  report.parameter_count = model.parameter_count();

  const auto validation =
      seeded_subset(split.validation, config.validation_patches, derive_seed(config.seed, "validation-subset"));
  auto params = model.parameters();
  std::vector<const Parameter*> const_params(params.begin(), params.end());
  AdamState adam = make_adam_state(const_params);
  model.zero_grad();
  std::vector<Tensor4> best = model.snapshot();

  auto run_epoch = [&](int epoch) {
    const std::uint64_t epoch_seed = derive_seed(config.seed, static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(split.train.begin(), split.train.end());
    std::mt19937_64 rng(epoch_seed);
    std::shuffle(order.begin(), order.end(), rng);
    if (config.train_patches_per_epoch > 0 && config.train_patches_per_epoch < order.size()) {
      order.resize(config.train_patches_per_epoch);
    }

    double sq = 0.0;
    std::size_t valid = 0;
    std::vector<LabeledPatch> augmented;
    std::vector<std::size_t> local;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, order.size() - start);
      augmented.clear();
      local.clear();
      for (std::size_t i = 0; i < count; ++i) {
        const auto& src = patches[order[start + i]];
        augmented.push_back(config.augment ? preprocess::augment_flips(src, derive_seed(epoch_seed, start + i)) : src);
        local.push_back(i);
      }
      const auto batch = make_batch(augmented, local);
      if (std::none_of(batch.mask.begin(), batch.mask.end(), [](std::uint8_t m) { return m != 0; })) continue;

      autodiff::Graph graph;
      const auto out = model.forward(graph, graph.input(batch.input));
      const auto loss = unet::masked_rmse_loss(graph.value(out), batch.label, batch.mask);
      graph.backward(out, loss.grad);
      adam_step(params, adam, config);
      sq += loss.loss * loss.loss * static_cast<double>(loss.valid);
      valid += loss.valid;
    }
    const double train_loss = valid ? std::sqrt(sq / static_cast<double>(valid)) : 0.0;
    const double val_loss = evaluate_loss(model, patches, validation);
    EpochRecord rec{epoch, train_loss, val_loss};
    report.epochs.push_back(rec);
    if (progress) progress(rec);
    return val_loss;
  };

  const auto outcome = run_with_early_stopping(config.max_epochs, config.patience, run_epoch,
                                               [&](int) { best = model.snapshot(); });
  model.restore(best);

  report.stop_reason = outcome.reason;
  report.best_epoch = outcome.best_epoch;
  report.best_validation_loss = outcome.best_validation_loss;
  report.energy = energy.stop(model.config().name);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  return report;
}

std::string train_report_json(const TrainReport& r) {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["variant"] = r.variant;
  j["channels"] = r.channels;
  j["parameter_count"] = r.parameter_count;
  j["config_checksum"] = r.config_checksum;
  j["config"] = {{"learning_rate", r.config.learning_rate},
                 {"max_epochs", r.config.max_epochs},
                 {"patience", r.config.patience},
                 {"batch_size", r.config.batch_size},
                 {"seed", r.config.seed},
                 {"adam_beta1", r.config.adam_beta1},
                 {"adam_beta2", r.config.adam_beta2},
                 {"adam_epsilon", r.config.adam_epsilon},
                 {"augment", r.config.augment},
                 {"train_patches_per_epoch", r.config.train_patches_per_epoch},
                 {"validation_patches", r.config.validation_patches}};
  auto epochs = nlohmann::ordered_json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"validation_loss", e.validation_loss}});
  }
  j["epochs"] = epochs;
  j["stop_reason"] = to_string(r.stop_reason);
  j["best_epoch"] = r.best_epoch;
  j["best_validation_loss"] = r.best_validation_loss;
  j["restored_best_weights"] = true;
  j["wall_seconds"] = r.wall_seconds;
  j["energy"] = {{"run_id", r.energy.run_id},
                 {"joules", r.energy.joules},
                 {"source", r.energy.source == green::EnergySourceKind::measured ? "measured" : "estimated"},
                 {"wall_seconds", r.energy.wall_seconds},
                 {"assumed_power_watts", r.energy.assumed_power_watts ? nlohmann::ordered_json(*r.energy.assumed_power_watts)
                                                                      : nlohmann::ordered_json(nullptr)}};
  j["checkpoint_path"] = r.checkpoint_path;
  j["checkpoint_checksum"] = r.checkpoint_checksum;
  return j.dump(2) + "\n";
}

void write_train_report(const TrainReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << train_report_json(report);
}

TrainReport read_train_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing train report " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    TrainReport r;
    r.variant = j.at("variant").get<std::string>();
    r.channels = j.at("channels").get<std::array<std::size_t, 3>>();
    r.parameter_count = j.at("parameter_count").get<std::size_t>();
    r.config_checksum = j.value("config_checksum", std::string{});
    const auto& c = j.at("config");
    r.config.learning_rate = c.at("learning_rate").get<double>();
    r.config.max_epochs = c.at("max_epochs").get<int>();
    r.config.patience = c.at("patience").get<int>();
    r.config.batch_size = c.at("batch_size").get<std::size_t>();
    r.config.seed = c.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("epochs")) {
      r.epochs.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(),
                          e.at("validation_loss").get<double>()});
    }
    r.stop_reason = j.at("stop_reason").get<std::string>() == "early_stopping" ? StopReason::early_stopping
                                                                               : StopReason::max_epochs;
    r.best_epoch = j.at("best_epoch").get<int>();
    r.best_validation_loss = j.at("best_validation_loss").get<double>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    const auto& e = j.at("energy");
    r.energy.run_id = e.at("run_id").get<std::string>();
    r.energy.joules = e.at("joules").get<double>();
    r.energy.source = e.at("source").get<std::string>() == "measured" ? green::EnergySourceKind::measured
                                                                       : green::EnergySourceKind::estimated;
    r.energy.wall_seconds = e.at("wall_seconds").get<double>();
    if (!e.at("assumed_power_watts").is_null()) r.energy.assumed_power_watts = e.at("assumed_power_watts").get<double>();
    r.checkpoint_path = j.value("checkpoint_path", std::string{});
    r.checkpoint_checksum = j.value("checkpoint_checksum", std::string{});
    return r;
  } catch (const nlohmann::json::exception& ex) {
    throw IngestError(path.string() + ": " + ex.what());
  }
}

}  // namespace terrai::train
