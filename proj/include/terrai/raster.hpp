#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace terrai::raster {

inline constexpr float kDefaultNoData = -9999.0f;

/// One H×W channel slice of a parcel image, row-major.
class BandGrid {
 public:
  BandGrid() = default;
  BandGrid(std::size_t height, std::size_t width, float fill = 0.0f);
  BandGrid(std::size_t height, std::size_t width, std::vector<float> values);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return values_.size(); }

  float operator()(std::size_t r, std::size_t c) const { return values_[r * width_ + c]; }
  float& operator()(std::size_t r, std::size_t c) { return values_[r * width_ + c]; }

  std::span<const float> values() const { return values_; }
  std::span<float> values() { return values_; }

  bool same_shape(const BandGrid& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }
  bool operator==(const BandGrid&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<float> values_;
};

class ValidityMask {
 public:
  ValidityMask() = default;
  ValidityMask(std::size_t height, std::size_t width, bool fill = true);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return valid_.size(); }

  bool operator()(std::size_t r, std::size_t c) const { return valid_[r * width_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { valid_[r * width_ + c] = v ? 1 : 0; }
  bool at(std::size_t i) const { return valid_[i] != 0; }
  void set(std::size_t i, bool v) { valid_[i] = v ? 1 : 0; }

  std::size_t count_valid() const;
  bool matches(const BandGrid& grid) const {
    return height_ == grid.height() && width_ == grid.width();
  }
  bool operator==(const ValidityMask&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> valid_;
};

enum class ChannelKind { spectral, index, weather };

std::string_view to_string(ChannelKind kind);
ChannelKind channel_kind_from_string(std::string_view name);

struct ChannelEntry {
  std::string name;
  ChannelKind kind;
  bool operator==(const ChannelEntry&) const = default;
};

/// Ordered channel layout of a soil-health stack. Names are unique.
class ChannelSchema {
 public:
  ChannelSchema() = default;
  explicit ChannelSchema(std::vector<ChannelEntry> entries);

  /// nir/red/green/blue, bndvi/ndvi, then four weather variables at the
  /// three eight-hour forecast intervals of the fertilization day: 18 channels.
  static ChannelSchema default_schema();

  std::size_t count() const { return entries_.size(); }
  const std::vector<ChannelEntry>& entries() const { return entries_; }
  const ChannelEntry& operator[](std::size_t i) const { return entries_[i]; }
  std::optional<std::size_t> index_of(std::string_view name) const;
  std::size_t count_of(ChannelKind kind) const;

  /// Stable digest of names and kinds, recorded in model checkpoints.
  std::string checksum() const;

  bool operator==(const ChannelSchema&) const = default;

 private:
  std::vector<ChannelEntry> entries_;
};

/// Soil-health tensor of parcel `parcel_id` at fertilization phase `phase`.
struct RasterStack {
  ChannelSchema schema;
  std::vector<BandGrid> channels;
  ValidityMask mask;
  std::string parcel_id;
  int phase = 2;

  std::size_t height() const { return mask.height(); }
  std::size_t width() const { return mask.width(); }
  const BandGrid& channel(std::string_view name) const;

  /// Throws ShapeError when channels and mask disagree.
  void validate() const;
};

/// Nitrogen application rates (kg N / ha). Invalid pixels keep the no_data
/// sentinel in `grid`; only `mask` decides validity.
struct PrescriptionMap {
  BandGrid grid;
  ValidityMask mask;
  std::string parcel_id;
  int phase = 2;

  void validate() const;
};

struct MaskedBand {
  BandGrid grid;
  ValidityMask mask;
};

/// Replaces every `sentinel` entry with 0 and marks it invalid. Throws
/// IngestError naming the first NaN pixel.
MaskedBand remap_nodata(const BandGrid& grid, float sentinel = kDefaultNoData);

/// Registered indices: BNDVI = (NIR-B)/(NIR+B), NDVI = (NIR-R)/(NIR+R).
/// Zero denominators and invalid pixels give 0.
BandGrid compute_vegetation_index(const RasterStack& stack, std::string_view index_name);
bool is_registered_index(std::string_view index_name);

inline constexpr std::size_t kWeatherIntervals = 3;
inline constexpr std::array<int, kWeatherIntervals> kWeatherHours = {0, 8, 16};

/// Forecast values for each variable at the three eight-hour intervals.
struct WeatherSeries {
  std::vector<std::string> variables;
  std::vector<std::vector<float>> values;  // values[v][interval]

  std::optional<float> value(std::string_view variable, std::size_t interval) const;
};

/// Weather channel name for a variable at an interval, e.g. "temperature_h08".
std::string weather_channel_name(std::string_view variable, std::size_t interval);
/// Inverse of weather_channel_name; nullopt when `channel` is not of that form.
std::optional<std::pair<std::string, std::size_t>> parse_weather_channel(std::string_view channel);

/// Builds a stack whose channel order follows `schema`: spectral bands in
/// the order given, indices computed from them, weather broadcast as
/// constant planes. The stack mask is the conjunction of the band masks.
RasterStack assemble_input_stack(std::span<const MaskedBand> spectral, const WeatherSeries& weather,
                                 const ChannelSchema& schema, std::string parcel_id = {},
                                 int phase = 2);

// Band-interleaved float32 little-endian `.band` file plus a `.json` header.

struct RasterHeader {
  std::size_t height = 0;
  std::size_t width = 0;
  ChannelSchema schema;
  float nodata = kDefaultNoData;
  std::string parcel_id;
  int phase = 2;
  std::string checksum;  // of the .band payload
};

/// Writes `<stem>.band` and `<stem>.json`; invalid pixels are written as
/// the sentinel. Returns the payload checksum.
std::string write_stack(const std::filesystem::path& stem, const RasterStack& stack,
                        float nodata = kDefaultNoData);
std::string write_prescription(const std::filesystem::path& stem, const PrescriptionMap& map,
                               float nodata = kDefaultNoData);

/// Reads a stack and applies remap_nodata per channel.
RasterStack read_stack(const std::filesystem::path& stem);
/// Reads a map; sentinel values stay in the grid and are masked out.
PrescriptionMap read_prescription(const std::filesystem::path& stem);

RasterHeader read_header(const std::filesystem::path& stem);

}  // namespace terrai::raster
