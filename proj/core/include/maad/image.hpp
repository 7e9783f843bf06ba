#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace maad {

// 8-bit RGB, row-major, tightly packed.
struct ImageRgb {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<uint8_t> pixels;  // height * width * 3

  static ImageRgb filled(int64_t width, int64_t height, uint8_t r, uint8_t g,
                         uint8_t b);

  uint8_t& at(int64_t x, int64_t y, int c) {
    return pixels[static_cast<size_t>((y * width + x) * 3 + c)];
  }
  uint8_t at(int64_t x, int64_t y, int c) const {
    return pixels[static_cast<size_t>((y * width + x) * 3 + c)];
  }
};

void write_png(const std::string& path, const ImageRgb& image);
ImageRgb read_png(const std::string& path);

// Reads just the header, so callers can validate bounds without decoding.
struct PngSize {
  int64_t width = 0;
  int64_t height = 0;
};
PngSize png_size(const std::string& path);

}  // namespace maad
