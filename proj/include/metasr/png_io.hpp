#pragma once

// 8-bit RGB PNG in and out of (3,h,w) tensors in [0,1].

#include <png.h>

#include <cstdio>
#include <string>
#include <vector>

#include "metasr/tensor.hpp"

namespace metasr {

inline Tensor read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("cannot open " + path);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_stdio(&image, fp)) {
    std::fclose(fp);
    throw IoError(path + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    std::fclose(fp);
    throw IoError(path + ": " + image.message);
  }
  std::fclose(fp);
  const int64_t h = image.height, w = image.width;
  Tensor t({3, h, w});
  double* p = t.mutable_data();
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        p[(c * h + y) * w + x] = buf[(y * w + x) * 3 + c] / 255.0;
  return t;
}

inline void write_png(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw ShapeError("write_png wants (3,h,w), got " + shape_str(img.shape()));
  const int64_t h = img.dim(1), w = img.dim(2);
  std::vector<unsigned char> buf(static_cast<size_t>(3 * h * w));
  const double* p = img.data();
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        double v = p[(c * h + y) * w + x] * 255.0;
        v = v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v);
        buf[static_cast<size_t>((y * w + x) * 3 + c)] =
            static_cast<unsigned char>(std::lround(v));
      }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr))
    throw IoError(path + ": " + image.message);
}

}  // namespace metasr
