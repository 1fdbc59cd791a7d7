#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace cimp {

// Tensor archive layout (all integers little-endian):
//
//   8 bytes   magic "CIMPARCH"
//   u32       format version
//   u64       header length N
//   N bytes   JSON header {format_version, kind, dtype, meta, blobs[]}
//   ...       blob payloads, back to back, in header order
//
// Each blobs[] entry records name, shape, offset (relative to the end of the
// header), byte_length and the SHA-256 of the payload bytes.

inline constexpr std::uint32_t kArchiveFormatVersion = 1;

enum class BlobDtype { Float32, Float64 };

std::string_view to_string(BlobDtype dtype) noexcept;

struct Blob {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<double> values;
};

struct Archive {
  std::string kind;
  BlobDtype dtype = BlobDtype::Float64;
  nlohmann::json meta;
  std::vector<Blob> blobs;

  /// Format error if absent.
  const Blob& find(std::string_view name) const;
};

void write_archive(const std::filesystem::path& path, std::string_view kind,
                   const nlohmann::json& meta, std::span<const Blob> blobs, BlobDtype dtype);

/// Format error on bad magic, truncation or checksum mismatch; Incompatible
/// error on an unknown format version or a kind other than `expected_kind`.
Archive read_archive(const std::filesystem::path& path, std::string_view expected_kind);

std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_file_hex(const std::filesystem::path& path);

}  // namespace cimp
