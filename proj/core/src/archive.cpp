#include "cimp/archive.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <openssl/evp.h>

#include "cimp/error.hpp"

namespace cimp {
namespace {

constexpr std::array<char, 8> kMagic{'C', 'I', 'M', 'P', 'A', 'R', 'C', 'H'};

template <typename T>
void put_le(std::vector<std::byte>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  auto bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::byte>((bits >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(const std::byte* p) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bits |= static_cast<U>(std::to_integer<std::uint8_t>(p[i])) << (8 * i);
  }
  return std::bit_cast<T>(bits);
}

std::vector<std::byte> encode_values(const std::vector<double>& values, BlobDtype dtype) {
  std::vector<std::byte> out;
  if (dtype == BlobDtype::Float32) {
    out.reserve(values.size() * 4);
    for (double v : values) put_le(out, static_cast<float>(v));
  } else {
    out.reserve(values.size() * 8);
    for (double v : values) put_le(out, v);
  }
  return out;
}

std::size_t dtype_width(BlobDtype dtype) { return dtype == BlobDtype::Float32 ? 4 : 8; }

BlobDtype parse_dtype(const std::string& s) {
  if (s == "float32") return BlobDtype::Float32;
  if (s == "float64") return BlobDtype::Float64;
  fail(ErrorKind::Incompatible, "unsupported archive dtype '" + s + "'");
}

std::int64_t element_count(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

}  // namespace

std::string_view to_string(BlobDtype dtype) noexcept {
  return dtype == BlobDtype::Float32 ? "float32" : "float64";
}

const Blob& Archive::find(std::string_view name) const {
  for (const auto& b : blobs) {
    if (b.name == name) return b;
  }
  fail(ErrorKind::Format, "archive has no blob named '" + std::string(name) + "'");
}

std::string sha256_hex(std::span<const std::byte> bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    fail(ErrorKind::Io, "SHA-256 computation failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_file_hex(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(std::as_bytes(std::span<const char>(raw)));
}

void write_archive(const std::filesystem::path& path, std::string_view kind,
                   const nlohmann::json& meta, std::span<const Blob> blobs, BlobDtype dtype) {
  std::vector<std::vector<std::byte>> payloads;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& blob : blobs) {
    require(element_count(blob.shape) == static_cast<std::int64_t>(blob.values.size()),
            ErrorKind::Shape, "blob '" + blob.name + "' shape does not match its values");
    payloads.push_back(encode_values(blob.values, dtype));
    const auto& bytes = payloads.back();
    entries.push_back({{"name", blob.name},
                       {"shape", blob.shape},
                       {"offset", offset},
                       {"byte_length", bytes.size()},
                       {"sha256", sha256_hex(bytes)}});
    offset += bytes.size();
  }
  nlohmann::json header = {{"format_version", kArchiveFormatVersion},
                           {"kind", std::string(kind)},
                           {"dtype", std::string(to_string(dtype))},
                           {"meta", meta},
                           {"blobs", entries}};
  const std::string header_text = header.dump();

  std::vector<std::byte> prefix;
  for (char c : kMagic) prefix.push_back(static_cast<std::byte>(c));
  put_le(prefix, kArchiveFormatVersion);
  put_le(prefix, static_cast<std::uint64_t>(header_text.size()));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(prefix.data()), static_cast<std::streamsize>(prefix.size()));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& p : payloads) {
    out.write(reinterpret_cast<const char*>(p.data()), static_cast<std::streamsize>(p.size()));
  }
  require(static_cast<bool>(out), ErrorKind::Io, "short write to " + path.string());
}

Archive read_archive(const std::filesystem::path& path, std::string_view expected_kind) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* bytes = reinterpret_cast<const std::byte*>(raw.data());
  const std::string where = path.string();

  constexpr std::size_t prefix_len = kMagic.size() + 4 + 8;
  require(raw.size() >= prefix_len, ErrorKind::Format, where + ": truncated prefix");
  require(std::memcmp(raw.data(), kMagic.data(), kMagic.size()) == 0, ErrorKind::Format,
          where + ": bad magic bytes");
  const auto version = get_le<std::uint32_t>(bytes + kMagic.size());
  require(version == kArchiveFormatVersion, ErrorKind::Incompatible,
          where + ": unsupported format version " + std::to_string(version));
  const auto header_len = get_le<std::uint64_t>(bytes + kMagic.size() + 4);
  require(raw.size() - prefix_len >= header_len, ErrorKind::Format, where + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(raw.begin() + prefix_len,
                                   raw.begin() + static_cast<std::ptrdiff_t>(prefix_len + header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, where + ": malformed header: " + e.what());
  }

  Archive archive;
  try {
    require(header.at("format_version").get<std::uint32_t>() == kArchiveFormatVersion,
            ErrorKind::Incompatible, where + ": header format version mismatch");
    archive.kind = header.at("kind").get<std::string>();
    archive.dtype = parse_dtype(header.at("dtype").get<std::string>());
    archive.meta = header.at("meta");
    require(expected_kind.empty() || archive.kind == expected_kind, ErrorKind::Incompatible,
            where + ": expected a '" + std::string(expected_kind) + "' archive, found '" +
                archive.kind + "'");

    const std::size_t data_start = prefix_len + header_len;
    const std::size_t width = dtype_width(archive.dtype);
    for (const auto& entry : header.at("blobs")) {
      Blob blob;
      blob.name = entry.at("name").get<std::string>();
      blob.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto length = entry.at("byte_length").get<std::uint64_t>();
      const auto count = element_count(blob.shape);
      require(count >= 0 && static_cast<std::uint64_t>(count) * width == length, ErrorKind::Format,
              where + ": blob '" + blob.name + "' length disagrees with its shape");
      require(data_start + offset + length <= raw.size(), ErrorKind::Format,
              where + ": truncated blob '" + blob.name + "'");
      std::span<const std::byte> payload(bytes + data_start + offset, length);
      require(sha256_hex(payload) == entry.at("sha256").get<std::string>(), ErrorKind::Format,
              where + ": checksum mismatch in blob '" + blob.name + "'");
      blob.values.resize(static_cast<std::size_t>(count));
      for (std::size_t i = 0; i < blob.values.size(); ++i) {
        blob.values[i] = archive.dtype == BlobDtype::Float32
                             ? static_cast<double>(get_le<float>(payload.data() + i * 4))
                             : get_le<double>(payload.data() + i * 8);
      }
      archive.blobs.push_back(std::move(blob));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, where + ": malformed header: " + e.what());
  }
  return archive;
}

}  // namespace cimp
