#include "terrai/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "terrai/common.hpp"

namespace terrai::evaluate {

using preprocess::kPatchPixels;
using preprocess::kPatchSize;

std::string to_string(Scope s) { return s == Scope::patch ? "patch" : "map"; }

void MetricAccumulator::add(double prediction, double target) {
  const double err = prediction - target;
  sq_ += err * err;
  ++pixels_;
  if (target != 0.0) {
    ape_ += std::abs(err) / std::abs(target);
    ++ape_count_;
  } else {
    ++zero_targets_;
  }
  const double den = std::abs(prediction) + std::abs(target);
  if (den > 0.0) {
    sape_ += 2.0 * std::abs(err) / den;
    ++sape_count_;
  }
}

MetricReport MetricAccumulator::finish(Scope scope) const {
  if (pixels_ == 0) throw ConfigError("metrics: no valid pixels");
  MetricReport r;
  r.scope = scope;
  r.rmse = std::sqrt(sq_ / static_cast<double>(pixels_));
  r.mape = ape_count_ ? 100.0 * ape_ / static_cast<double>(ape_count_) : 0.0;
  r.smape = sape_count_ ? 100.0 * sape_ / static_cast<double>(sape_count_) : 0.0;
  r.n_items = items_;
  r.n_pixels = pixels_;
  r.excluded_zero_targets = zero_targets_;
  return r;
}

MetricReport patch_metrics(std::span<const float> predictions, std::span<const float> labels,
                           std::span<const std::uint8_t> masks) {
  if (predictions.size() != labels.size() || labels.size() != masks.size()) {
    throw ShapeError("patch_metrics: predictions, labels and masks differ in length");
  }
  MetricAccumulator acc;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (masks[i]) acc.add(predictions[i], labels[i]);
  }
  acc.add_items(predictions.size() / kPatchPixels);
  return acc.finish(Scope::patch);
}

Reconstruction reconstruct_map(std::span<const PatchPrediction> predictions, std::size_t height, std::size_t width,
                               std::string parcel_id, int phase) {
  if (height == 0 || width == 0) throw ShapeError("reconstruct_map: empty scene");
  std::vector<double> sum(height * width, 0.0);
  Reconstruction out;
  out.coverage.assign(height * width, 0);
  for (const auto& p : predictions) {
    if (p.origin.row + kPatchSize > height || p.origin.col + kPatchSize > width) {
      throw ShapeError("reconstruct_map: patch at (" + std::to_string(p.origin.row) + ", " +
                       std::to_string(p.origin.col) + ") lies outside the " + std::to_string(height) + "x" +
                       std::to_string(width) + " scene");
    }
    for (std::size_t r = 0; r < kPatchSize; ++r) {
      for (std::size_t c = 0; c < kPatchSize; ++c) {
        const std::size_t idx = (p.origin.row + r) * width + p.origin.col + c;
        sum[idx] += p.values[r * kPatchSize + c];
        ++out.coverage[idx];
      }
    }
  }
  out.map.grid = raster::BandGrid(height, width, raster::kDefaultNoData);
  out.map.mask = raster::ValidityMask(height, width, false);
  out.map.parcel_id = std::move(parcel_id);
  out.map.phase = phase;
  for (std::size_t i = 0; i < sum.size(); ++i) {
    if (out.coverage[i] == 0) continue;
    out.map.grid.values()[i] = static_cast<float>(sum[i] / out.coverage[i]);
    out.map.mask.set(i, true);
  }
  return out;
}

void accumulate_map(MetricAccumulator& acc, const raster::PrescriptionMap& reconstructed,
                    const raster::PrescriptionMap& truth) {
  if (!reconstructed.grid.same_shape(truth.grid) || !reconstructed.mask.matches(truth.grid) ||
      !truth.mask.matches(truth.grid)) {
    throw ShapeError("map_metrics: map dimensions differ");
  }
  for (std::size_t i = 0; i < truth.grid.size(); ++i) {
    if (!truth.mask.at(i)) continue;
    if (!reconstructed.mask.at(i)) {
      throw Error("map_metrics: mask mismatch, truth pixel " + std::to_string(i) + " is not reconstructed");
    }
    acc.add(reconstructed.grid.values()[i], truth.grid.values()[i]);
  }
  acc.add_items(1);
}

MetricReport map_metrics(const raster::PrescriptionMap& reconstructed, const raster::PrescriptionMap& truth) {
  MetricAccumulator acc;
  accumulate_map(acc, reconstructed, truth);
  return acc.finish(Scope::map);
}

std::string metrics_csv_header() {
  return "variant,scope,rmse_kg_n_per_ha,mape_percent,smape_percent,n_items,n_pixels,excluded_zero_targets\n";
}

std::string metrics_csv_row(const std::string& variant, const MetricReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6f,%.6f,%zu,%zu,%zu\n", variant.c_str(), to_string(r.scope).c_str(),
                r.rmse, r.mape, r.smape, r.n_items, r.n_pixels, r.excluded_zero_targets);
  return buf;
}

namespace {

void write_pgm(const std::filesystem::path& path, std::size_t h, std::size_t w, const std::vector<unsigned char>& px) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

}  // namespace

void render_pgm_pair(const raster::PrescriptionMap& actual, const raster::PrescriptionMap& predicted,
                     const std::filesystem::path& actual_path, const std::filesystem::path& predicted_path) {
  if (!actual.grid.same_shape(predicted.grid)) throw ShapeError("render: map dimensions differ");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto* m : {&actual, &predicted}) {
    for (std::size_t i = 0; i < m->grid.size(); ++i) {
      if (!m->mask.at(i)) continue;
      lo = std::min(lo, static_cast<double>(m->grid.values()[i]));
      hi = std::max(hi, static_cast<double>(m->grid.values()[i]));
    }
  }
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 1.0;
  }
  const double span = hi > lo ? hi - lo : 1.0;
  // Valid pixels use 1..255 so that 0 stays reserved for no_data.
  auto encode = [&](const raster::PrescriptionMap& m) {
    std::vector<unsigned char> px(m.grid.size(), 0);
    for (std::size_t i = 0; i < px.size(); ++i) {
      if (!m.mask.at(i)) continue;
      const double t = (m.grid.values()[i] - lo) / span;
      px[i] = static_cast<unsigned char>(1 + std::lround(std::clamp(t, 0.0, 1.0) * 254.0));
    }
    return px;
  };
  write_pgm(actual_path, actual.grid.height(), actual.grid.width(), encode(actual));
  write_pgm(predicted_path, predicted.grid.height(), predicted.grid.width(), encode(predicted));
}

}  // namespace terrai::evaluate
