#pragma once

#include <png.h>

#include <cstdio>
#include <memory>
#include <string>

#include "core.hpp"

namespace semdefect {

// 8-bit grayscale PNG I/O. Gray values map linearly between [0,1] and [0,255].

inline void write_png_gray8(const std::string& path, const Image2D<uint8_t>& img) {
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw EnvironmentError("write_png_gray8: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw EnvironmentError("write_png_gray8: libpng failure for " + path);
  }

  png_init_io(png, fp);
  png_set_IHDR(png, info, img.cols(), img.rows(), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < img.rows(); ++r)
    png_write_row(png, const_cast<png_bytep>(img.data() + static_cast<size_t>(r) * img.cols()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline Image2D<uint8_t> read_png_gray8(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw EnvironmentError("read_png_gray8: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw EnvironmentError("read_png_gray8: libpng failure for " + path);
  }

  png_init_io(png, fp);
  png_read_info(png, info);

  // Normalize any input to 8-bit grayscale.
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  if (png_get_color_type(png, info) & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray(png, 1, -1, -1);
  if (png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);

  const int rows = static_cast<int>(png_get_image_height(png, info));
  const int cols = static_cast<int>(png_get_image_width(png, info));
  Image2D<uint8_t> img(rows, cols);
  for (int r = 0; r < rows; ++r)
    png_read_row(png, img.data() + static_cast<size_t>(r) * cols, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

inline Image2D<uint8_t> quantize8(const GrayImage& img) {
  Image2D<uint8_t> q(img.rows(), img.cols());
  for (size_t i = 0; i < img.size(); ++i)
    q[i] = static_cast<uint8_t>(std::lround(clip01(img[i]) * 255.0));
  return q;
}

inline GrayImage dequantize8(const Image2D<uint8_t>& q) {
  GrayImage img(q.rows(), q.cols());
  for (size_t i = 0; i < q.size(); ++i) img[i] = q[i] / 255.0;
  return img;
}

inline void save_image(const std::string& path, const SemImage& img) {
  write_png_gray8(path, quantize8(img.pixels));
}

inline SemImage load_image(const std::string& path) {
  return SemImage{dequantize8(read_png_gray8(path)), 0};
}

inline void save_mask(const std::string& path, const DefectMask& mask) {
  Image2D<uint8_t> m(mask.rows(), mask.cols());
  for (size_t i = 0; i < m.size(); ++i) m[i] = mask.labels[i] ? 255 : 0;
  write_png_gray8(path, m);
}

inline DefectMask load_mask(const std::string& path) {
  Image2D<uint8_t> raw = read_png_gray8(path);
  DefectMask mask{Image2D<uint8_t>(raw.rows(), raw.cols())};
  for (size_t i = 0; i < raw.size(); ++i) mask.labels[i] = raw[i] >= 128 ? 1 : 0;
  return mask;
}

}  // namespace semdefect
