#include "cimp/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include <png.h>

#include "cimp/error.hpp"

namespace cimp {
namespace {

std::string lower_ext(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

struct FileCloser {
  void operator()(FILE* f) const noexcept {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

RawImage read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  require(png_image_begin_read_from_file(&image, path.c_str()) != 0, ErrorKind::Dataset,
          path.string() + ": not a readable PNG: " + image.message);
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(image));
  if (png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr) == 0) {
    std::string msg = image.message;
    png_image_free(&image);
    fail(ErrorKind::Dataset, path.string() + ": PNG decode failed: " + msg);
  }
  RawImage out;
  out.height = static_cast<int>(image.height);
  out.width = static_cast<int>(image.width);
  out.channels = color ? 3 : 1;
  out.pixels.resize(buffer.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) out.pixels[i] = static_cast<float>(buffer[i]) / 255.0f;
  return out;
}

RawImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Dataset, "cannot open " + path.string());
  auto next_token = [&]() {
    std::string tok;
    while (in >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      return tok;
    }
    fail(ErrorKind::Dataset, path.string() + ": truncated PGM header");
  };
  const std::string magic = next_token();
  require(magic == "P5" || magic == "P2", ErrorKind::Dataset, path.string() + ": not a PGM file");
  RawImage out;
  out.width = std::stoi(next_token());
  out.height = std::stoi(next_token());
  out.channels = 1;
  const int maxval = std::stoi(next_token());
  require(maxval > 0 && maxval < 256, ErrorKind::Dataset, path.string() + ": only 8-bit PGM is supported");
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height);
  if (magic == "P5") {
    in.get();
    std::vector<unsigned char> raw(out.pixels.size());
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    require(in.gcount() == static_cast<std::streamsize>(raw.size()), ErrorKind::Dataset,
            path.string() + ": truncated PGM data");
    for (std::size_t i = 0; i < raw.size(); ++i) out.pixels[i] = static_cast<float>(raw[i]) / maxval;
  } else {
    for (auto& p : out.pixels) p = static_cast<float>(std::stoi(next_token())) / maxval;
  }
  return out;
}

}  // namespace

RawImage read_image(const std::filesystem::path& path) {
  const std::string ext = lower_ext(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".pgm") return read_pgm(path);
  fail(ErrorKind::Dataset, path.string() + ": unsupported image extension '" + ext + "'");
}

void write_png(const std::filesystem::path& path, const RawImage& image) {
  require(image.channels == 1 || image.channels == 3, ErrorKind::Shape,
          "PNG output supports 1 or 3 channels");
  std::vector<unsigned char> bytes(image.pixels.size());
  std::transform(image.pixels.begin(), image.pixels.end(), bytes.begin(), to_byte);
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr f(std::fopen(path.c_str(), "wb"));
  require(f != nullptr, ErrorKind::Io, "cannot write " + path.string());
  require(png_image_write_to_stdio(&png, f.get(), 0, bytes.data(), 0, nullptr) != 0, ErrorKind::Io,
          path.string() + ": PNG encode failed");
}

void write_pgm(const std::filesystem::path& path, const RawImage& image) {
  require(image.channels == 1, ErrorKind::Shape, "PGM output needs a single channel");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
  out << "P5\n" << image.width << " " << image.height << "\n255\n";
  for (float p : image.pixels) out.put(static_cast<char>(to_byte(p)));
}

}  // namespace cimp
