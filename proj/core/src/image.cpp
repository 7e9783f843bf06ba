#include "maad/image.hpp"

#include <png.h>

#include <cstring>
#include <stdexcept>

namespace maad {

ImageRgb ImageRgb::filled(int64_t width, int64_t height, uint8_t r, uint8_t g,
                          uint8_t b) {
  if (width <= 0 || height <= 0) {
    throw std::invalid_argument("image: nonpositive dimensions");
  }
  ImageRgb img;
  img.width = width;
  img.height = height;
  img.pixels.resize(static_cast<size_t>(width * height * 3));
  for (size_t i = 0; i < img.pixels.size(); i += 3) {
    img.pixels[i] = r;
    img.pixels[i + 1] = g;
    img.pixels[i + 2] = b;
  }
  return img;
}

void write_png(const std::string& path, const ImageRgb& image) {
  if (image.width <= 0 || image.height <= 0 ||
      image.pixels.size() !=
          static_cast<size_t>(image.width * image.height * 3)) {
    throw std::invalid_argument("write_png: inconsistent image buffer for " +
                                path);
  }
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.pixels.data(),
                               static_cast<png_int_32>(image.width * 3),
                               nullptr)) {
    throw std::runtime_error("write_png: " + path + ": " + png.message);
  }
}

ImageRgb read_png(const std::string& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw std::runtime_error("read_png: " + path + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  ImageRgb image;
  image.width = static_cast<int64_t>(png.width);
  image.height = static_cast<int64_t>(png.height);
  image.pixels.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, image.pixels.data(),
                             static_cast<png_int_32>(image.width * 3),
                             nullptr)) {
    throw std::runtime_error("read_png: " + path + ": " + png.message);
  }
  return image;
}

PngSize png_size(const std::string& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw std::runtime_error("png_size: " + path + ": " + png.message);
  }
  PngSize size{static_cast<int64_t>(png.width), static_cast<int64_t>(png.height)};
  png_image_free(&png);
  return size;
}

}  // namespace maad
