#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace terrai {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input data (NaN pixels, bad headers, truncated files).
class IngestError : public Error {
 public:
  using Error::Error;
};

/// Tensor or grid dimensions that do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage was run before the artifacts it needs exist, or they
/// were produced under a different configuration.
class DependencyError : public Error {
 public:
  using Error::Error;
};

/// CRC-32 of a byte range, rendered as 8 lowercase hex digits.
std::string checksum_bytes(std::span<const std::byte> bytes);
std::string checksum_string(std::string_view text);
std::string checksum_file(const std::filesystem::path& path);

/// Per-stage seed derivation: the stage name is hashed and mixed into the
/// global seed with splitmix64, so stages never share a random stream.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stage);
std::uint64_t derive_seed(std::uint64_t global_seed, std::uint64_t index);

}  // namespace terrai
