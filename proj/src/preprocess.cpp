#include "terrai/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "terrai/common.hpp"

namespace terrai::preprocess {

using json = nlohmann::json;

std::size_t LabeledPatch::valid_count() const {
  return static_cast<std::size_t>(std::count(label_mask.begin(), label_mask.end(), std::uint8_t{1}));
}

double LabeledPatch::mean_valid_label() const {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < kPatchPixels; ++i) {
    if (label_mask[i]) {
      sum += label[i];
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw ConfigError("quantile of empty data");
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

IqrFences iqr_fences(std::span<const double> values, double multiplier) {
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  IqrFences f;
  f.q1 = quantile_sorted(sorted, 0.25);
  f.q3 = quantile_sorted(sorted, 0.75);
  const double iqr = f.q3 - f.q1;
  f.lower = f.q1 - multiplier * iqr;
  f.upper = f.q3 + multiplier * iqr;
  return f;
}

IqrResult iqr_partition(std::span<const double> stats, double multiplier) {
  if (stats.size() < 4) {
    throw ConfigError("IQR filter needs at least 4 scenes, got " + std::to_string(stats.size()));
  }
  IqrResult out;
  out.fences = iqr_fences(stats, multiplier);
  for (std::size_t i = 0; i < stats.size(); ++i) {
    const bool inside = stats[i] >= out.fences.lower && stats[i] <= out.fences.upper;
    (inside ? out.kept : out.dropped).push_back(i);
  }
  if (out.kept.empty()) throw ConfigError("IQR filter dropped every scene");
  return out;
}

double mean_valid_rate(const raster::PrescriptionMap& map) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < map.grid.size(); ++i) {
    if (map.mask.at(i)) {
      sum += map.grid.values()[i];
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

SceneFilterResult iqr_filter(std::vector<synth::SyntheticScene> scenes, double multiplier) {
  std::vector<double> stats;
  stats.reserve(scenes.size());
  for (const auto& s : scenes) stats.push_back(mean_valid_rate(s.truth));
  const auto part = iqr_partition(stats, multiplier);
  SceneFilterResult out;
  out.fences = part.fences;
  for (auto i : part.kept) out.kept.push_back(std::move(scenes[i]));
  for (auto i : part.dropped) out.dropped.push_back(std::move(scenes[i]));
  return out;
}

std::vector<LabeledPatch> extract_patches(const synth::SyntheticScene& scene) {
  const auto& stack = scene.stack;
  const auto& truth = scene.truth;
  stack.validate();
  const std::size_t h = stack.height();
  const std::size_t w = stack.width();
  if (h < kPatchSize || w < kPatchSize) {
    throw ShapeError("scene " + stack.parcel_id + " is smaller than 8x8");
  }
  if (!truth.mask.matches(truth.grid) || truth.grid.height() != h || truth.grid.width() != w) {
    throw ShapeError("scene " + stack.parcel_id + ": truth and stack differ in size");
  }
  const std::size_t channels = stack.channels.size();
  std::vector<LabeledPatch> patches;
  patches.reserve((h - kPatchSize + 1) * (w - kPatchSize + 1));
  for (std::size_t r0 = 0; r0 + kPatchSize <= h; ++r0) {
    for (std::size_t c0 = 0; c0 + kPatchSize <= w; ++c0) {
      LabeledPatch p;
      bool any_valid = false;
      for (std::size_t r = 0; r < kPatchSize; ++r) {
        for (std::size_t c = 0; c < kPatchSize; ++c) {
          const bool valid = truth.mask(r0 + r, c0 + c);
          p.label_mask[r * kPatchSize + c] = valid ? 1 : 0;
          p.label[r * kPatchSize + c] = truth.grid(r0 + r, c0 + c);
          any_valid = any_valid || valid;
        }
      }
      if (!any_valid) continue;
      p.input.resize(channels * kPatchPixels);
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const auto& band = stack.channels[ch];
        for (std::size_t r = 0; r < kPatchSize; ++r) {
          for (std::size_t c = 0; c < kPatchSize; ++c) {
            p.input[ch * kPatchPixels + r * kPatchSize + c] = band(r0 + r, c0 + c);
          }
        }
      }
      p.origin = {stack.parcel_id, stack.phase, r0, c0};
      patches.push_back(std::move(p));
    }
  }
  return patches;
}

DatasetSplit stratified_split(std::span<const LabeledPatch> patches, SplitRatios ratios, std::uint64_t seed,
                              std::size_t bins) {
  if (bins == 0) throw ConfigError("stratified_split: bins must be positive");
  if (!(ratios.train > 0.0 && ratios.validation >= 0.0 && ratios.test > 0.0) ||
      std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9) {
    throw ConfigError("stratified_split: ratios must be positive and sum to 1");
  }
  DatasetSplit split;
  split.ratios = ratios;
  split.seed = seed;
  split.bins = bins;

  std::vector<std::string> parcels;
  std::unordered_map<std::string, std::size_t> per_parcel;
  for (const auto& p : patches) {
    if (per_parcel[p.origin.parcel_id]++ == 0) parcels.push_back(p.origin.parcel_id);
  }
  if (parcels.size() < 2) throw ConfigError("stratified_split: need at least 2 parcels to isolate a test set");

  std::mt19937_64 rng(seed);
  std::shuffle(parcels.begin(), parcels.end(), rng);
  const auto total = patches.size();
  const auto test_target = static_cast<std::size_t>(std::ceil(ratios.test * static_cast<double>(total) - 1e-9));
  std::size_t covered = 0;
  std::vector<std::string> test_parcels;
  for (const auto& id : parcels) {
    if (covered >= test_target && !test_parcels.empty()) break;
    test_parcels.push_back(id);
    covered += per_parcel[id];
  }
  if (test_parcels.size() == parcels.size()) {
    throw ConfigError("stratified_split: too few parcels, the test set would consume all of them");
  }
  std::sort(test_parcels.begin(), test_parcels.end());
  split.test_parcels = test_parcels;

  std::vector<std::size_t> remainder;
  for (std::size_t i = 0; i < total; ++i) {
    if (std::binary_search(test_parcels.begin(), test_parcels.end(), patches[i].origin.parcel_id)) {
      split.test.push_back(i);
    } else {
      remainder.push_back(i);
    }
  }
  if (remainder.size() < bins) {
    throw ConfigError("stratified_split: " + std::to_string(remainder.size()) + " patches cannot fill " +
                      std::to_string(bins) + " strata");
  }

  std::vector<double> stats(remainder.size());
  for (std::size_t j = 0; j < remainder.size(); ++j) stats[j] = patches[remainder[j]].mean_valid_label();
  std::vector<double> sorted = stats;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t b = 1; b < bins; ++b) {
    split.bin_edges.push_back(quantile_sorted(sorted, static_cast<double>(b) / static_cast<double>(bins)));
  }

  std::vector<std::vector<std::size_t>> strata(bins);
  for (std::size_t j = 0; j < remainder.size(); ++j) {
    const auto bin = static_cast<std::size_t>(
        std::upper_bound(split.bin_edges.begin(), split.bin_edges.end(), stats[j]) - split.bin_edges.begin());
    strata[bin].push_back(remainder[j]);
  }
  const double train_share = ratios.train / (ratios.train + ratios.validation);
  for (auto& stratum : strata) {
    std::shuffle(stratum.begin(), stratum.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(train_share * static_cast<double>(stratum.size())));
    split.train.insert(split.train.end(), stratum.begin(), stratum.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.validation.insert(split.validation.end(), stratum.begin() + static_cast<std::ptrdiff_t>(n_train),
                            stratum.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  return split;
}

namespace {

json origins_json(std::span<const std::size_t> indices, std::span<const LabeledPatch> patches) {
  json arr = json::array();
  for (auto i : indices) {
    const auto& o = patches[i].origin;
    arr.push_back({o.parcel_id, o.phase, o.row, o.col});
  }
  return arr;
}

}  // namespace

void write_split(const DatasetSplit& split, std::span<const LabeledPatch> patches,
                 const std::filesystem::path& path, const std::string& config_checksum) {
  json j;
  j["schema_version"] = 1;
  j["config_checksum"] = config_checksum;
  j["ratios"] = {{"train", split.ratios.train}, {"validation", split.ratios.validation}, {"test", split.ratios.test}};
  j["seed"] = split.seed;
  j["bins"] = split.bins;
  j["bin_edges"] = split.bin_edges;
  j["test_parcels"] = split.test_parcels;
  j["counts"] = {{"train", split.train.size()}, {"validation", split.validation.size()}, {"test", split.test.size()}};
  j["train"] = origins_json(split.train, patches);
  j["validation"] = origins_json(split.validation, patches);
  j["test"] = origins_json(split.test, patches);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump() << '\n';
}

DatasetSplit read_split(const std::filesystem::path& path, std::span<const LabeledPatch> patches) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing split manifest " + path.string());
  std::map<PatchOrigin, std::size_t> lookup;
  for (std::size_t i = 0; i < patches.size(); ++i) lookup.emplace(patches[i].origin, i);
  try {
    json j;
    in >> j;
    DatasetSplit split;
    split.ratios = {j.at("ratios").at("train").get<double>(), j.at("ratios").at("validation").get<double>(),
                    j.at("ratios").at("test").get<double>()};
    split.seed = j.at("seed").get<std::uint64_t>();
    split.bins = j.at("bins").get<std::size_t>();
    split.bin_edges = j.at("bin_edges").get<std::vector<double>>();
    split.test_parcels = j.at("test_parcels").get<std::vector<std::string>>();
    auto load = [&](const char* key, std::vector<std::size_t>& dst) {
      for (const auto& o : j.at(key)) {
        PatchOrigin origin{o.at(0).get<std::string>(), o.at(1).get<int>(), o.at(2).get<std::size_t>(),
                           o.at(3).get<std::size_t>()};
        const auto it = lookup.find(origin);
        if (it == lookup.end()) {
          throw DependencyError("split manifest references unknown patch " + origin.parcel_id + "@" +
                                std::to_string(origin.row) + "," + std::to_string(origin.col));
        }
        dst.push_back(it->second);
      }
    };
    load("train", split.train);
    load("validation", split.validation);
    load("test", split.test);
    return split;
  } catch (const json::exception& e) {
    throw IngestError(path.string() + ": " + e.what());
  }
}

Standardizer fit_standardizer(std::span<const LabeledPatch> train, ScaleMode mode) {
  std::vector<std::size_t> all(train.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return fit_standardizer(train, all, mode);
}

Standardizer fit_standardizer(std::span<const LabeledPatch> patches, std::span<const std::size_t> indices,
                              ScaleMode mode) {
  if (indices.empty()) throw ConfigError("fit_standardizer: empty training set");
  const std::size_t channels = patches[indices.front()].channels();
  // Two passes: means first, then squared deviations.
  std::vector<double> sum(channels, 0.0);
  double label_sum = 0.0;
  std::size_t n = 0;
  for (auto idx : indices) {
    const auto& p = patches[idx];
    if (p.channels() != channels) throw ShapeError("fit_standardizer: patches differ in channel count");
    for (std::size_t px = 0; px < kPatchPixels; ++px) {
      if (!p.label_mask[px]) continue;
      ++n;
      label_sum += p.label[px];
      for (std::size_t c = 0; c < channels; ++c) sum[c] += p.input[c * kPatchPixels + px];
    }
  }
  if (n == 0) throw ConfigError("fit_standardizer: no valid pixels");
  const double dn = static_cast<double>(n);

  Standardizer s;
  s.mode = mode;
  s.mean.resize(channels);
  for (std::size_t c = 0; c < channels; ++c) s.mean[c] = sum[c] / dn;
  s.label_mean = label_sum / dn;

  std::vector<double> dev(channels, 0.0);
  double label_dev = 0.0;
  for (auto idx : indices) {
    const auto& p = patches[idx];
    for (std::size_t px = 0; px < kPatchPixels; ++px) {
      if (!p.label_mask[px]) continue;
      const double dy = p.label[px] - s.label_mean;
      label_dev += dy * dy;
      for (std::size_t c = 0; c < channels; ++c) {
        const double d = p.input[c * kPatchPixels + px] - s.mean[c];
        dev[c] += d * d;
      }
    }
  }
  auto to_scale = [&](double sq, const std::string& what) {
    const double var = sq / dn;
    double scale = mode == ScaleMode::stddev ? std::sqrt(var) : var;
    if (scale < kScaleEpsilon) {
      s.warnings.push_back(what + " is constant; scale clamped to epsilon");
      scale = kScaleEpsilon;
    }
    return scale;
  };
  s.scale.resize(channels);
  for (std::size_t c = 0; c < channels; ++c) s.scale[c] = to_scale(dev[c], "channel " + std::to_string(c));
  s.label_scale = to_scale(label_dev, "label");
  for (const auto& w : s.warnings) std::cerr << "warning: fit_standardizer: " << w << '\n';
  return s;
}

void apply_standardizer_inplace(const Standardizer& s, LabeledPatch& patch) {
  const std::size_t channels = patch.channels();
  if (channels != s.mean.size()) throw ShapeError("apply_standardizer: channel count mismatch");
  for (std::size_t c = 0; c < channels; ++c) {
    float* plane = patch.input.data() + c * kPatchPixels;
    for (std::size_t px = 0; px < kPatchPixels; ++px) {
      plane[px] = patch.label_mask[px] ? static_cast<float>((plane[px] - s.mean[c]) / s.scale[c]) : 0.0f;
    }
  }
  for (std::size_t px = 0; px < kPatchPixels; ++px) {
    if (patch.label_mask[px]) {
      patch.label[px] = static_cast<float>((patch.label[px] - s.label_mean) / s.label_scale);
    }
  }
}

LabeledPatch apply_standardizer(const Standardizer& s, const LabeledPatch& patch) {
  LabeledPatch out = patch;
  apply_standardizer_inplace(s, out);
  return out;
}

void write_standardizer(const Standardizer& s, const std::filesystem::path& path, const std::string& config_checksum) {
  json j;
  j["schema_version"] = 1;
  j["config_checksum"] = config_checksum;
  j["mode"] = s.mode == ScaleMode::stddev ? "stddev" : "variance";
  j["epsilon"] = kScaleEpsilon;
  j["fitted_on"] = s.fitted_on;
  j["mean"] = s.mean;
  j["scale"] = s.scale;
  j["label_mean"] = s.label_mean;
  j["label_scale"] = s.label_scale;
  j["warnings"] = s.warnings;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Standardizer read_standardizer(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing standardizer " + path.string());
  try {
    json j;
    in >> j;
    Standardizer s;
    s.mode = j.at("mode").get<std::string>() == "variance" ? ScaleMode::variance : ScaleMode::stddev;
    s.fitted_on = j.at("fitted_on").get<std::string>();
    s.mean = j.at("mean").get<std::vector<double>>();
    s.scale = j.at("scale").get<std::vector<double>>();
    s.label_mean = j.at("label_mean").get<double>();
    s.label_scale = j.at("label_scale").get<double>();
    s.warnings = j.value("warnings", std::vector<std::string>{});
    if (s.mean.size() != s.scale.size()) throw IngestError(path.string() + ": mean/scale length mismatch");
    return s;
  } catch (const json::exception& e) {
    throw IngestError(path.string() + ": " + e.what());
  }
}

LabeledPatch flip_patch(const LabeledPatch& patch, bool horizontal, bool vertical) {
  if (!horizontal && !vertical) return patch;
  LabeledPatch out = patch;
  auto src_index = [&](std::size_t r, std::size_t c) {
    const std::size_t sr = vertical ? kPatchSize - 1 - r : r;
    const std::size_t sc = horizontal ? kPatchSize - 1 - c : c;
    return sr * kPatchSize + sc;
  };
  const std::size_t channels = patch.channels();
  for (std::size_t r = 0; r < kPatchSize; ++r) {
    for (std::size_t c = 0; c < kPatchSize; ++c) {
      const std::size_t dst = r * kPatchSize + c;
      const std::size_t src = src_index(r, c);
      out.label[dst] = patch.label[src];
      out.label_mask[dst] = patch.label_mask[src];
      for (std::size_t ch = 0; ch < channels; ++ch) {
        out.input[ch * kPatchPixels + dst] = patch.input[ch * kPatchPixels + src];
      }
    }
  }
  return out;
}

FlipDraw draw_flips(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  FlipDraw d;
  d.horizontal = (rng() >> 63) != 0;
  d.vertical = (rng() >> 63) != 0;
  return d;
}

LabeledPatch augment_flips(const LabeledPatch& patch, std::uint64_t seed) {
  const auto d = draw_flips(seed);
  return flip_patch(patch, d.horizontal, d.vertical);
}

}  // namespace terrai::preprocess
