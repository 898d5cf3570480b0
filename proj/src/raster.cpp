#include "terrai/raster.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "terrai/common.hpp"

namespace terrai::raster {

using json = nlohmann::json;

BandGrid::BandGrid(std::size_t height, std::size_t width, float fill)
    : height_(height), width_(width), values_(height * width, fill) {}

BandGrid::BandGrid(std::size_t height, std::size_t width, std::vector<float> values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (values_.size() != height_ * width_) {
    throw ShapeError("BandGrid: expected " + std::to_string(height_ * width_) + " values, got " +
                     std::to_string(values_.size()));
  }
}

ValidityMask::ValidityMask(std::size_t height, std::size_t width, bool fill)
    : height_(height), width_(width), valid_(height * width, fill ? 1 : 0) {}

std::size_t ValidityMask::count_valid() const {
  return static_cast<std::size_t>(std::count(valid_.begin(), valid_.end(), std::uint8_t{1}));
}

std::string_view to_string(ChannelKind kind) {
  switch (kind) {
    case ChannelKind::spectral: return "spectral";
    case ChannelKind::index: return "index";
    case ChannelKind::weather: return "weather";
  }
  return "spectral";
}

ChannelKind channel_kind_from_string(std::string_view name) {
  if (name == "spectral") return ChannelKind::spectral;
  if (name == "index") return ChannelKind::index;
  if (name == "weather") return ChannelKind::weather;
  throw ConfigError("unknown channel kind '" + std::string(name) + "'");
}

ChannelSchema::ChannelSchema(std::vector<ChannelEntry> entries) : entries_(std::move(entries)) {
  if (entries_.empty()) throw ConfigError("channel schema must not be empty");
  std::set<std::string> seen;
  for (const auto& e : entries_) {
    if (!seen.insert(e.name).second) throw ConfigError("duplicate channel name '" + e.name + "'");
  }
}

ChannelSchema ChannelSchema::default_schema() {
  std::vector<ChannelEntry> entries = {
      {"nir", ChannelKind::spectral},  {"red", ChannelKind::spectral},
      {"green", ChannelKind::spectral}, {"blue", ChannelKind::spectral},
      {"bndvi", ChannelKind::index},   {"ndvi", ChannelKind::index},
  };
  for (const char* var : {"temperature", "precipitation", "humidity", "wind_speed"}) {
    for (std::size_t t = 0; t < kWeatherIntervals; ++t) {
      entries.push_back({weather_channel_name(var, t), ChannelKind::weather});
    }
  }
  return ChannelSchema(std::move(entries));
}

std::optional<std::size_t> ChannelSchema::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  return std::nullopt;
}

std::size_t ChannelSchema::count_of(ChannelKind kind) const {
  return static_cast<std::size_t>(
      std::count_if(entries_.begin(), entries_.end(), [kind](const auto& e) { return e.kind == kind; }));
}

std::string ChannelSchema::checksum() const {
  std::string text;
  for (const auto& e : entries_) {
    text += e.name;
    text += ':';
    text += to_string(e.kind);
    text += ';';
  }
  return checksum_string(text);
}

const BandGrid& RasterStack::channel(std::string_view name) const {
  const auto idx = schema.index_of(name);
  if (!idx) throw ConfigError("stack has no channel '" + std::string(name) + "'");
  return channels[*idx];
}

void RasterStack::validate() const {
  if (channels.size() != schema.count()) {
    throw ShapeError("stack has " + std::to_string(channels.size()) + " channels, schema declares " +
                     std::to_string(schema.count()));
  }
  for (const auto& ch : channels) {
    if (!mask.matches(ch)) throw ShapeError("stack channels and mask differ in size");
  }
}

void PrescriptionMap::validate() const {
  if (!mask.matches(grid)) throw ShapeError("prescription grid and mask differ in size");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (mask.at(i) && !(grid.values()[i] >= 0.0f)) {
      throw IngestError("prescription map has negative rate at pixel " + std::to_string(i));
    }
  }
}

namespace {

void check_finite(const BandGrid& grid, std::string_view what) {
  for (std::size_t r = 0; r < grid.height(); ++r) {
    for (std::size_t c = 0; c < grid.width(); ++c) {
      if (std::isnan(grid(r, c))) {
        std::ostringstream msg;
        msg << what << ": NaN at row " << r << ", col " << c;
        throw IngestError(msg.str());
      }
    }
  }
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return out;
}

float normalized_difference(float a, float b) {
  const float den = a + b;
  if (den == 0.0f) return 0.0f;
  return (a - b) / den;
}

}  // namespace

MaskedBand remap_nodata(const BandGrid& grid, float sentinel) {
  if (!std::isfinite(sentinel)) throw ConfigError("no_data sentinel must be finite");
  check_finite(grid, "remap_nodata");
  MaskedBand out{grid, ValidityMask(grid.height(), grid.width(), true)};
  auto values = out.grid.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] == sentinel) {
      values[i] = 0.0f;
      out.mask.set(i, false);
    }
  }
  return out;
}

bool is_registered_index(std::string_view index_name) {
  const auto name = lower(index_name);
  return name == "bndvi" || name == "ndvi";
}

BandGrid compute_vegetation_index(const RasterStack& stack, std::string_view index_name) {
  const auto name = lower(index_name);
  std::string other;
  if (name == "bndvi") {
    other = "blue";
  } else if (name == "ndvi") {
    other = "red";
  } else {
    throw ConfigError("unknown vegetation index '" + std::string(index_name) + "'");
  }
  const auto nir_idx = stack.schema.index_of("nir");
  const auto other_idx = stack.schema.index_of(other);
  if (!nir_idx || !other_idx) {
    throw ConfigError(std::string(index_name) + " needs channels nir and " + other);
  }
  const BandGrid& nir = stack.channels[*nir_idx];
  const BandGrid& b = stack.channels[*other_idx];
  BandGrid out(nir.height(), nir.width(), 0.0f);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!stack.mask.at(i)) continue;
    out.values()[i] = normalized_difference(nir.values()[i], b.values()[i]);
  }
  return out;
}

std::optional<float> WeatherSeries::value(std::string_view variable, std::size_t interval) const {
  for (std::size_t v = 0; v < variables.size(); ++v) {
    if (variables[v] == variable) {
      if (v >= values.size() || interval >= values[v].size()) return std::nullopt;
      return values[v][interval];
    }
  }
  return std::nullopt;
}

std::string weather_channel_name(std::string_view variable, std::size_t interval) {
  char hours[8];
  std::snprintf(hours, sizeof hours, "%02d", kWeatherHours.at(interval));
  return std::string(variable) + "_h" + hours;
}

std::optional<std::pair<std::string, std::size_t>> parse_weather_channel(std::string_view channel) {
  const auto pos = channel.rfind("_h");
  if (pos == std::string_view::npos || pos == 0) return std::nullopt;
  const auto suffix = channel.substr(pos + 2);
  for (std::size_t t = 0; t < kWeatherIntervals; ++t) {
    char hours[8];
    std::snprintf(hours, sizeof hours, "%02d", kWeatherHours[t]);
    if (suffix == hours) return std::make_pair(std::string(channel.substr(0, pos)), t);
  }
  return std::nullopt;
}

RasterStack assemble_input_stack(std::span<const MaskedBand> spectral, const WeatherSeries& weather,
                                 const ChannelSchema& schema, std::string parcel_id, int phase) {
  if (spectral.empty()) throw ConfigError("assemble_input_stack: no spectral bands");
  if (spectral.size() != schema.count_of(ChannelKind::spectral)) {
    throw ConfigError("assemble_input_stack: schema expects " +
                      std::to_string(schema.count_of(ChannelKind::spectral)) + " spectral bands, got " +
                      std::to_string(spectral.size()));
  }
  const std::size_t h = spectral.front().grid.height();
  const std::size_t w = spectral.front().grid.width();
  ValidityMask mask(h, w, true);
  for (const auto& band : spectral) {
    if (band.grid.height() != h || band.grid.width() != w || !band.mask.matches(band.grid)) {
      throw ShapeError("assemble_input_stack: spectral bands differ in size");
    }
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!band.mask.at(i)) mask.set(i, false);
    }
  }

  // Spectral-only view used to compute the index channels.
  RasterStack spectral_stack;
  {
    std::vector<ChannelEntry> entries;
    for (const auto& e : schema.entries()) {
      if (e.kind == ChannelKind::spectral) entries.push_back(e);
    }
    spectral_stack.schema = ChannelSchema(std::move(entries));
    for (const auto& band : spectral) spectral_stack.channels.push_back(band.grid);
    spectral_stack.mask = mask;
  }

  RasterStack stack;
  stack.schema = schema;
  stack.mask = mask;
  stack.parcel_id = std::move(parcel_id);
  stack.phase = phase;
  stack.channels.reserve(schema.count());
  std::size_t next_spectral = 0;
  for (const auto& entry : schema.entries()) {
    switch (entry.kind) {
      case ChannelKind::spectral:
        stack.channels.push_back(spectral[next_spectral++].grid);
        break;
      case ChannelKind::index:
        stack.channels.push_back(compute_vegetation_index(spectral_stack, entry.name));
        break;
      case ChannelKind::weather: {
        const auto parsed = parse_weather_channel(entry.name);
        if (!parsed) throw ConfigError("weather channel '" + entry.name + "' is not <variable>_hHH");
        const auto value = weather.value(parsed->first, parsed->second);
        if (!value) {
          throw ConfigError("weather series lacks '" + parsed->first + "' at interval " +
                            std::to_string(parsed->second));
        }
        stack.channels.emplace_back(h, w, *value);
        break;
      }
    }
  }
  return stack;
}

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

void write_payload(const std::filesystem::path& path, const std::vector<float>& data) {
  std::vector<std::byte> bytes(data.size() * sizeof(float));
  std::memcpy(bytes.data(), data.data(), bytes.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < bytes.size(); i += 4) std::reverse(bytes.begin() + i, bytes.begin() + i + 4);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

std::vector<float> read_payload(const std::filesystem::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open " + path.string());
  std::vector<std::byte> bytes(count * sizeof(float));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
    throw IngestError(path.string() + ": truncated payload");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IngestError(path.string() + ": trailing bytes");
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < bytes.size(); i += 4) std::reverse(bytes.begin() + i, bytes.begin() + i + 4);
  }
  std::vector<float> data(count);
  std::memcpy(data.data(), bytes.data(), bytes.size());
  return data;
}

std::string write_raster(const std::filesystem::path& stem, const RasterHeader& header,
                         const std::vector<float>& payload) {
  const auto band_path = with_suffix(stem, ".band");
  write_payload(band_path, payload);
  const auto sum = checksum_file(band_path);

  json j;
  j["format"] = "terrai-band";
  j["version"] = 1;
  j["dtype"] = "float32le";
  j["layout"] = "band-interleaved";
  j["height"] = header.height;
  j["width"] = header.width;
  json channels = json::array();
  for (const auto& e : header.schema.entries()) {
    channels.push_back({{"name", e.name}, {"kind", std::string(to_string(e.kind))}});
  }
  j["channels"] = channels;
  j["nodata"] = header.nodata;
  j["parcel_id"] = header.parcel_id;
  j["phase"] = header.phase;
  j["checksum"] = sum;
  std::ofstream out(with_suffix(stem, ".json"), std::ios::trunc);
  if (!out) throw Error("cannot write header for " + stem.string());
  out << j.dump(2) << '\n';
  return sum;
}

std::vector<float> read_checked_payload(const std::filesystem::path& stem, const RasterHeader& header) {
  const auto band_path = with_suffix(stem, ".band");
  if (!header.checksum.empty() && checksum_file(band_path) != header.checksum) {
    throw IngestError(band_path.string() + ": checksum mismatch");
  }
  return read_payload(band_path, header.schema.count() * header.height * header.width);
}

}  // namespace

RasterHeader read_header(const std::filesystem::path& stem) {
  const auto path = with_suffix(stem, ".json");
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open " + path.string());
  json j;
  try {
    in >> j;
    RasterHeader h;
    if (j.at("format").get<std::string>() != "terrai-band") throw IngestError(path.string() + ": not a band header");
    h.height = j.at("height").get<std::size_t>();
    h.width = j.at("width").get<std::size_t>();
    std::vector<ChannelEntry> entries;
    for (const auto& c : j.at("channels")) {
      entries.push_back({c.at("name").get<std::string>(), channel_kind_from_string(c.at("kind").get<std::string>())});
    }
    h.schema = ChannelSchema(std::move(entries));
    h.nodata = j.value("nodata", kDefaultNoData);
    h.parcel_id = j.value("parcel_id", std::string{});
    h.phase = j.value("phase", 2);
    h.checksum = j.value("checksum", std::string{});
    if (h.height == 0 || h.width == 0) throw IngestError(path.string() + ": empty raster");
    return h;
  } catch (const json::exception& e) {
    throw IngestError(path.string() + ": " + e.what());
  }
}

std::string write_stack(const std::filesystem::path& stem, const RasterStack& stack, float nodata) {
  stack.validate();
  RasterHeader header{stack.height(), stack.width(), stack.schema, nodata, stack.parcel_id, stack.phase, {}};
  std::vector<float> payload;
  payload.reserve(stack.channels.size() * stack.mask.size());
  for (const auto& ch : stack.channels) {
    for (std::size_t i = 0; i < ch.size(); ++i) {
      payload.push_back(stack.mask.at(i) ? ch.values()[i] : nodata);
    }
  }
  return write_raster(stem, header, payload);
}

std::string write_prescription(const std::filesystem::path& stem, const PrescriptionMap& map, float nodata) {
  ChannelSchema schema({{"nitrogen", ChannelKind::index}});
  RasterHeader header{map.grid.height(), map.grid.width(), schema, nodata, map.parcel_id, map.phase, {}};
  std::vector<float> payload(map.grid.size());
  for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = map.mask.at(i) ? map.grid.values()[i] : nodata;
  return write_raster(stem, header, payload);
}

RasterStack read_stack(const std::filesystem::path& stem) {
  const auto header = read_header(stem);
  const auto payload = read_checked_payload(stem, header);
  const std::size_t plane = header.height * header.width;
  RasterStack stack;
  stack.schema = header.schema;
  stack.parcel_id = header.parcel_id;
  stack.phase = header.phase;
  stack.mask = ValidityMask(header.height, header.width, true);
  for (std::size_t c = 0; c < header.schema.count(); ++c) {
    BandGrid raw(header.height, header.width,
                 std::vector<float>(payload.begin() + static_cast<std::ptrdiff_t>(c * plane),
                                    payload.begin() + static_cast<std::ptrdiff_t>((c + 1) * plane)));
    auto band = remap_nodata(raw, header.nodata);
    for (std::size_t i = 0; i < plane; ++i) {
      if (!band.mask.at(i)) stack.mask.set(i, false);
    }
    stack.channels.push_back(std::move(band.grid));
  }
  return stack;
}

PrescriptionMap read_prescription(const std::filesystem::path& stem) {
  const auto header = read_header(stem);
  if (header.schema.count() != 1) throw IngestError(stem.string() + ": prescription map must have 1 channel");
  auto payload = read_checked_payload(stem, header);
  PrescriptionMap map;
  map.grid = BandGrid(header.height, header.width, std::move(payload));
  check_finite(map.grid, stem.string());
  map.mask = ValidityMask(header.height, header.width, true);
  for (std::size_t i = 0; i < map.grid.size(); ++i) {
    if (map.grid.values()[i] == header.nodata) map.mask.set(i, false);
  }
  map.parcel_id = header.parcel_id;
  map.phase = header.phase;
  map.validate();
  return map;
}

}  // namespace terrai::raster
