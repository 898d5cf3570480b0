#include "terrai/common.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <vector>

namespace terrai {

namespace {

std::string to_hex(std::uint32_t value) {
  std::array<char, 9> buf{};
  std::snprintf(buf.data(), buf.size(), "%08x", value);
  return std::string(buf.data());
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::string checksum_bytes(std::span<const std::byte> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  constexpr std::size_t kChunk = 1u << 30;
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const std::size_t n = std::min(kChunk, bytes.size() - offset);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + offset),
                static_cast<uInt>(n));
    offset += n;
  }
  return to_hex(static_cast<std::uint32_t>(crc));
}

std::string checksum_string(std::string_view text) {
  return checksum_bytes(std::as_bytes(std::span(text.data(), text.size())));
}

std::string checksum_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open " + path.string());
  uLong crc = crc32(0L, Z_NULL, 0);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto n = in.gcount();
    if (n > 0) crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(n));
  }
  return to_hex(static_cast<std::uint32_t>(crc));
}

std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stage) {
  const auto name_hash = crc32(0L, reinterpret_cast<const Bytef*>(stage.data()),
                               static_cast<uInt>(stage.size()));
  return splitmix64(global_seed ^ (static_cast<std::uint64_t>(name_hash) << 32 | name_hash));
}

std::uint64_t derive_seed(std::uint64_t global_seed, std::uint64_t index) {
  return splitmix64(splitmix64(global_seed) + index);
}

}  // namespace terrai
