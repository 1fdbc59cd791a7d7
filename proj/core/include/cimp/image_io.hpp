#pragma once

#include <filesystem>
#include <vector>

namespace cimp {

/// 8-bit-derived image with pixels in [0, 1], HWC order.
struct RawImage {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> pixels;
};

/// PNG (gray, gray+alpha, RGB, RGBA; alpha dropped) or binary/ASCII PGM,
/// chosen by extension.
RawImage read_image(const std::filesystem::path& path);

/// Values are clamped to [0, 1] and rounded to 8 bits.
void write_png(const std::filesystem::path& path, const RawImage& image);
void write_pgm(const std::filesystem::path& path, const RawImage& image);

}  // namespace cimp
