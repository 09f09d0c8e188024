// Float RGB images and their on-disk forms: 8-bit PNG for datasets and a
// raw planar 32-bit float format for loss-exactness checks.

#pragma once

#include <string>
#include <vector>

#include "latitude/common.hpp"

namespace latitude {

struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> data;  // interleaved RGB, row-major, values nominally in [0,1]

  Image() = default;
  Image(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, 0.0f) {}

  float& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int x, int y, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  Vec3 pixel(int x, int y) const { return Vec3(at(x, y, 0), at(x, y, 1), at(x, y, 2)); }
  void set_pixel(int x, int y, const Vec3& rgb) {
    for (int c = 0; c < 3; ++c) at(x, y, c) = static_cast<float>(rgb[c]);
  }
  std::size_t size() const { return data.size(); }
};

// 8-bit RGB PNG; values are clamped to [0,1] and quantized with rounding.
void write_png(const std::string& path, const Image& image);
Image read_png(const std::string& path);

// Raw planar float32 file: ASCII header "FPIM\n<width> <height> <channels>\n"
// followed by the R, G, B planes as little-endian float32.
void write_float_image(const std::string& path, const Image& image);
Image read_float_image(const std::string& path);

Image resize_bilinear(const Image& src, int width, int height);

}  // namespace latitude
