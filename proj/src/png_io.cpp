#include "midline/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>
#include <vector>

namespace midline::io {

namespace {
struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;
}  // namespace

void write_png16(const std::string& path, const ad::Tensor<double>& img) {
  if (img.shape.size() != 2) throw std::invalid_argument("write_png16 expects [H,W]");
  const int H = img.shape[0], W = img.shape[1];
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open for writing: " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng write failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, (png_uint_32)W, (png_uint_32)H, 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<uint8_t> row((size_t)W * 2);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double v = img.at2(y, x);
      v = v < 0 ? 0 : (v > 1 ? 1 : v);
      const uint16_t q = (uint16_t)(v * 65535.0 + 0.5);
      row[(size_t)x * 2] = (uint8_t)(q >> 8);  // PNG is big-endian
      row[(size_t)x * 2 + 1] = (uint8_t)(q & 0xff);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

ad::Tensor<double> read_png16(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open image: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng read failed: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  const int W = (int)png_get_image_width(png, info);
  const int H = (int)png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("expected grayscale PNG: " + path);
  }
  if (depth < 16) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);

  auto out = ad::Tensor<double>::zeros({H, W});
  std::vector<uint8_t> row(png_get_rowbytes(png, info));
  const double denom = depth == 16 ? 65535.0 : 255.0;
  for (int y = 0; y < H; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < W; ++x) {
      uint32_t q = depth == 16 ? (uint32_t)((row[(size_t)x * 2] << 8) | row[(size_t)x * 2 + 1])
                               : (uint32_t)row[(size_t)x];
      out.at2(y, x) = (double)q / denom;
    }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace midline::io
