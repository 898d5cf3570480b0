#include "terrai/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "terrai/common.hpp"

namespace terrai::synth {

using json = nlohmann::json;
using raster::BandGrid;
using raster::ValidityMask;

void FieldSpec::validate() const {
  if (height == 0 || width == 0) throw ConfigError("field spec: height and width must be positive");
  if (!(correlation_length > 0.0)) throw ConfigError("field spec: correlation_length must be positive");
  if (correlation_length > static_cast<double>(std::min(height, width))) {
    throw ConfigError("field spec: correlation_length exceeds min(height, width)");
  }
  for (const auto& r : band_ranges) {
    if (!(r.min < r.max)) throw ConfigError("field spec: band range needs min < max");
  }
  if (!(label_noise_sd >= 0.0)) throw ConfigError("field spec: label_noise_sd must be nonnegative");
  if (!(boundary_irregularity >= 0.0 && boundary_irregularity <= 1.0)) {
    throw ConfigError("field spec: boundary_irregularity must lie in [0, 1]");
  }
  if (parcel_id.empty()) throw ConfigError("field spec: parcel_id must not be empty");
}

double nitrogen_from_bands(float nir, float red) {
  const double n = static_cast<double>(nir);
  const double r = static_cast<double>(red);
  const double den = n + r;
  const double ndvi = den == 0.0 ? 0.0 : (n - r) / den;
  const double z = kNdviSlope * ndvi + kNdviOffset;
  return kNitrogenMax * (1.0 - 1.0 / (1.0 + std::exp(-z)));
}

namespace {

using Field = std::vector<double>;

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Mirror index into [0, n).
std::size_t reflect(long i, std::size_t n) {
  const long len = static_cast<long>(n);
  if (len == 1) return 0;
  const long period = 2 * (len - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < len ? i : period - i);
}

Field smooth(const Field& in, std::size_t h, std::size_t w, const std::vector<double>& kernel) {
  const long radius = static_cast<long>(kernel.size() / 2);
  Field tmp(in.size(), 0.0);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      double acc = 0.0;
      for (long k = -radius; k <= radius; ++k) {
        acc += kernel[k + radius] * in[r * w + reflect(static_cast<long>(c) + k, w)];
      }
      tmp[r * w + c] = acc;
    }
  }
  Field out(in.size(), 0.0);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      double acc = 0.0;
      for (long k = -radius; k <= radius; ++k) {
        acc += kernel[k + radius] * tmp[reflect(static_cast<long>(r) + k, h) * w + c];
      }
      out[r * w + c] = acc;
    }
  }
  return out;
}

// Smoothed white noise rescaled to [0, 1].
Field unit_field(std::mt19937_64& rng, std::size_t h, std::size_t w, const std::vector<double>& kernel) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Field noise(h * w);
  for (auto& v : noise) v = normal(rng);
  Field f = smooth(noise, h, w, kernel);
  const auto [lo, hi] = std::minmax_element(f.begin(), f.end());
  const double min = *lo;
  const double span = *hi - *lo;
  for (auto& v : f) v = span > 0.0 ? (v - min) / span : 0.5;
  return f;
}

// Smoothed white noise standardized to zero mean, unit population sd.
Field standard_field(std::mt19937_64& rng, std::size_t h, std::size_t w, const std::vector<double>& kernel) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Field noise(h * w);
  for (auto& v : noise) v = normal(rng);
  Field f = smooth(noise, h, w, kernel);
  double mean = 0.0;
  for (double v : f) mean += v;
  mean /= static_cast<double>(f.size());
  double var = 0.0;
  for (double v : f) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(f.size()));
  for (auto& v : f) v = sd > 0.0 ? (v - mean) / sd : 0.0;
  return f;
}

float to_range(double t, const BandRange& range) {
  t = std::clamp(t, 0.0, 1.0);
  const double v = static_cast<double>(range.min) + t * (static_cast<double>(range.max) - range.min);
  return std::clamp(static_cast<float>(v), range.min, range.max);
}

// Plausible ranges for the four forecast variables on a spring fertilization day.
struct WeatherRange {
  const char* name;
  double min;
  double max;
};
constexpr WeatherRange kWeatherRanges[] = {
    {"temperature", 2.0, 22.0}, {"precipitation", 0.0, 8.0}, {"humidity", 40.0, 95.0}, {"wind_speed", 0.0, 9.0}};

}  // namespace

SyntheticScene generate_scene(const FieldSpec& spec) {
  spec.validate();
  const std::size_t h = spec.height;
  const std::size_t w = spec.width;
  std::mt19937_64 rng(spec.seed);
  const auto kernel = gaussian_kernel(spec.correlation_length);

  // Bands share a vigor field: NIR rises with vigor, visible bands fall.
  const Field vigor = unit_field(rng, h, w, kernel);
  std::array<Field, 4> own;
  for (auto& f : own) f = unit_field(rng, h, w, kernel);
  const Field boundary = unit_field(rng, h, w, kernel);
  const Field label_noise = standard_field(rng, h, w, kernel);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  raster::WeatherSeries weather;
  for (const auto& wr : kWeatherRanges) {
    const double base = wr.min + unit(rng) * (wr.max - wr.min);
    std::vector<float> values;
    for (std::size_t t = 0; t < raster::kWeatherIntervals; ++t) {
      const double drift = (unit(rng) - 0.5) * 0.1 * (wr.max - wr.min);
      values.push_back(static_cast<float>(std::clamp(base + drift, wr.min, wr.max)));
    }
    weather.variables.emplace_back(wr.name);
    weather.values.push_back(std::move(values));
  }

  ValidityMask mask(h, w, true);
  const double half = static_cast<double>(std::min(h, w)) / 2.0;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double edge = static_cast<double>(std::min({r, c, h - 1 - r, w - 1 - c})) / half;
      const double band = spec.boundary_irregularity * (0.25 + 0.25 * boundary[r * w + c]);
      if (edge < band) mask.set(r, c, false);
    }
  }

  std::array<raster::MaskedBand, 4> spectral;
  for (std::size_t b = 0; b < 4; ++b) {
    spectral[b] = {BandGrid(h, w, 0.0f), mask};
  }
  for (std::size_t i = 0; i < h * w; ++i) {
    if (!mask.at(i)) continue;
    const double v = vigor[i];
    spectral[0].grid.values()[i] = to_range(0.75 * v + 0.25 * own[0][i], spec.band_ranges[0]);
    spectral[1].grid.values()[i] = to_range(0.75 * (1.0 - v) + 0.25 * own[1][i], spec.band_ranges[1]);
    spectral[2].grid.values()[i] = to_range(0.5 * v + 0.5 * own[2][i], spec.band_ranges[2]);
    spectral[3].grid.values()[i] = to_range(0.75 * (1.0 - v) + 0.25 * own[3][i], spec.band_ranges[3]);
  }

  SyntheticScene scene;
  scene.stack = raster::assemble_input_stack(spectral, weather, raster::ChannelSchema::default_schema(),
                                             spec.parcel_id, spec.phase);

  scene.truth.grid = BandGrid(h, w, raster::kDefaultNoData);
  scene.truth.mask = mask;
  scene.truth.parcel_id = spec.parcel_id;
  scene.truth.phase = spec.phase;
  for (std::size_t i = 0; i < h * w; ++i) {
    if (!mask.at(i)) continue;
    double n = nitrogen_from_bands(spectral[0].grid.values()[i], spectral[1].grid.values()[i]);
    n += spec.label_noise_sd * label_noise[i];
    scene.truth.grid.values()[i] = static_cast<float>(std::max(0.0, n));
  }
  return scene;
}

std::vector<FieldSpec> default_specs(std::size_t count, std::uint64_t global_seed, std::size_t height,
                                     std::size_t width) {
  std::vector<FieldSpec> specs;
  specs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    FieldSpec s;
    s.height = height;
    s.width = width;
    s.correlation_length = std::min(6.0, static_cast<double>(std::min(height, width)));
    s.seed = derive_seed(global_seed, static_cast<std::uint64_t>(i));
    char id[32];
    std::snprintf(id, sizeof id, "parcel_%03zu", i);
    s.parcel_id = id;
    specs.push_back(std::move(s));
  }
  return specs;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  json j;
  j["schema_version"] = manifest.schema_version;
  j["config_checksum"] = manifest.config_checksum;
  json channels = json::array();
  for (const auto& e : manifest.schema.entries()) {
    channels.push_back({{"name", e.name}, {"kind", std::string(raster::to_string(e.kind))}});
  }
  j["channel_schema"] = channels;
  j["channel_schema_checksum"] = manifest.schema.count() ? manifest.schema.checksum() : "";
  json scenes = json::array();
  for (const auto& s : manifest.scenes) {
    scenes.push_back({{"scene_id", s.scene_id},
                      {"parcel_id", s.parcel_id},
                      {"phase", s.phase},
                      {"seed", s.seed},
                      {"height", s.height},
                      {"width", s.width},
                      {"stack", s.stack_stem},
                      {"truth", s.truth_stem},
                      {"stack_checksum", s.stack_checksum},
                      {"truth_checksum", s.truth_checksum}});
  }
  j["scenes"] = scenes;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing dataset manifest " + path.string());
  try {
    json j;
    in >> j;
    DatasetManifest m;
    m.schema_version = j.at("schema_version").get<int>();
    m.config_checksum = j.value("config_checksum", std::string{});
    std::vector<raster::ChannelEntry> entries;
    for (const auto& c : j.at("channel_schema")) {
      entries.push_back({c.at("name").get<std::string>(),
                         raster::channel_kind_from_string(c.at("kind").get<std::string>())});
    }
    if (!entries.empty()) m.schema = raster::ChannelSchema(std::move(entries));
    for (const auto& s : j.at("scenes")) {
      SceneRecord r;
      r.scene_id = s.at("scene_id").get<std::string>();
      r.parcel_id = s.at("parcel_id").get<std::string>();
      r.phase = s.at("phase").get<int>();
      r.seed = s.at("seed").get<std::uint64_t>();
      r.height = s.at("height").get<std::size_t>();
      r.width = s.at("width").get<std::size_t>();
      r.stack_stem = s.at("stack").get<std::string>();
      r.truth_stem = s.at("truth").get<std::string>();
      r.stack_checksum = s.at("stack_checksum").get<std::string>();
      r.truth_checksum = s.at("truth_checksum").get<std::string>();
      m.scenes.push_back(std::move(r));
    }
    return m;
  } catch (const json::exception& e) {
    throw IngestError(path.string() + ": " + e.what());
  }
}

DatasetManifest generate_dataset(const std::vector<FieldSpec>& specs, const std::filesystem::path& out_dir,
                                 const std::string& config_checksum) {
  std::set<std::string> ids;
  for (const auto& s : specs) {
    s.validate();
    if (!ids.insert(s.parcel_id).second) throw ConfigError("duplicate parcel_id '" + s.parcel_id + "'");
  }
  DatasetManifest manifest;
  manifest.config_checksum = config_checksum;
  if (specs.empty()) return manifest;

  std::filesystem::create_directories(out_dir);
  manifest.schema = raster::ChannelSchema::default_schema();
  for (const auto& spec : specs) {
    const auto scene = generate_scene(spec);
    SceneRecord rec;
    rec.scene_id = spec.parcel_id + "_k" + std::to_string(spec.phase);
    rec.parcel_id = spec.parcel_id;
    rec.phase = spec.phase;
    rec.seed = spec.seed;
    rec.height = spec.height;
    rec.width = spec.width;
    rec.stack_stem = rec.scene_id + ".stack";
    rec.truth_stem = rec.scene_id + ".truth";
    rec.stack_checksum = raster::write_stack(out_dir / rec.stack_stem, scene.stack);
    rec.truth_checksum = raster::write_prescription(out_dir / rec.truth_stem, scene.truth);
    manifest.scenes.push_back(std::move(rec));
  }
  write_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

std::vector<SyntheticScene> load_dataset(const std::filesystem::path& dataset_dir) {
  const auto manifest = read_manifest(dataset_dir / "manifest.json");
  std::vector<SyntheticScene> scenes;
  scenes.reserve(manifest.scenes.size());
  for (const auto& rec : manifest.scenes) {
    const auto stack_header = raster::read_header(dataset_dir / rec.stack_stem);
    const auto truth_header = raster::read_header(dataset_dir / rec.truth_stem);
    if (stack_header.checksum != rec.stack_checksum || truth_header.checksum != rec.truth_checksum) {
      throw DependencyError("checksum mismatch for scene " + rec.scene_id);
    }
    SyntheticScene scene{raster::read_stack(dataset_dir / rec.stack_stem),
                         raster::read_prescription(dataset_dir / rec.truth_stem)};
    if (scene.stack.mask != scene.truth.mask) {
      throw IngestError("scene " + rec.scene_id + ": stack and truth masks differ");
    }
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

}  // namespace terrai::synth
