#include "ftfoot/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace ftfoot {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void write_png(const std::string& path, int h, int w, int bit_depth, int color_type,
               const std::vector<png_bytep>& rows) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail("png: cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail("png: create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail("png: create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail("png: write error on " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);  // host is little endian
  png_write_image(png, const_cast<png_bytepp>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct PngImage {
  int h = 0, w = 0, channels = 0, bit_depth = 0;
  std::vector<uint8_t> bytes;  // row-major, host byte order for 16-bit
};

PngImage read_png(const std::string& path, int want_channels, int want_depth) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail("png: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail("png: create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail("png: create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail("png: corrupt file " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_set_expand(png);  // palettes and low bit depths to 8 bit
  if (png_get_color_type(png, info) & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (want_depth == 8 && png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (want_depth == 16 && png_get_bit_depth(png, info) != 16) fail("png: expected 16-bit data in " + path);
  if (want_channels == 3 && !(png_get_color_type(png, info) & PNG_COLOR_MASK_COLOR)) png_set_gray_to_rgb(png);
  if (want_channels == 1 && (png_get_color_type(png, info) & PNG_COLOR_MASK_COLOR)) png_set_rgb_to_gray(png, 1, -1, -1);
  if (want_depth == 16) png_set_swap(png);
  png_read_update_info(png, info);

  PngImage img;
  img.h = static_cast<int>(png_get_image_height(png, info));
  img.w = static_cast<int>(png_get_image_width(png, info));
  img.channels = png_get_channels(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  if (img.channels != want_channels || img.bit_depth != want_depth) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail("png: unexpected format in " + path);
  }
  const size_t rowbytes = png_get_rowbytes(png, info);
  img.bytes.resize(rowbytes * static_cast<size_t>(img.h));
  std::vector<png_bytep> rows(static_cast<size_t>(img.h));
  for (int i = 0; i < img.h; ++i) rows[static_cast<size_t>(i)] = img.bytes.data() + rowbytes * static_cast<size_t>(i);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

uint8_t to_byte(double v) {
  const double s = std::lround(std::min(std::max(v, 0.0), 1.0) * 255.0);
  return static_cast<uint8_t>(s);
}

}  // namespace

void write_rgb8_png(const std::string& path, const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) fail("write_rgb8_png: expected 3xhxw, got " + shape_str(rgb));
  const int h = rgb.dim(1), w = rgb.dim(2);
  const int64_t plane = static_cast<int64_t>(h) * w;
  std::vector<uint8_t> buf(static_cast<size_t>(3 * plane));
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const int64_t px = static_cast<int64_t>(i) * w + j;
      for (int ch = 0; ch < 3; ++ch) buf[static_cast<size_t>(3 * px + ch)] = to_byte(rgb[ch * plane + px]);
    }
  }
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int i = 0; i < h; ++i) rows[static_cast<size_t>(i)] = buf.data() + static_cast<size_t>(3) * w * i;
  write_png(path, h, w, 8, PNG_COLOR_TYPE_RGB, rows);
}

Tensor read_rgb8_png(const std::string& path) {
  PngImage img = read_png(path, 3, 8);
  Tensor rgb({3, img.h, img.w});
  const int64_t plane = static_cast<int64_t>(img.h) * img.w;
  for (int64_t px = 0; px < plane; ++px) {
    for (int ch = 0; ch < 3; ++ch) rgb[ch * plane + px] = img.bytes[static_cast<size_t>(3 * px + ch)] / 255.0;
  }
  return rgb;
}

void write_gray16_png(const std::string& path, const std::vector<uint16_t>& pixels, int h, int w) {
  if (static_cast<int64_t>(pixels.size()) != static_cast<int64_t>(h) * w) fail("write_gray16_png: size mismatch");
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int i = 0; i < h; ++i) {
    rows[static_cast<size_t>(i)] =
        reinterpret_cast<png_bytep>(const_cast<uint16_t*>(pixels.data()) + static_cast<size_t>(i) * w);
  }
  write_png(path, h, w, 16, PNG_COLOR_TYPE_GRAY, rows);
}

std::vector<uint16_t> read_gray16_png(const std::string& path, int& h, int& w) {
  PngImage img = read_png(path, 1, 16);
  h = img.h;
  w = img.w;
  std::vector<uint16_t> out(static_cast<size_t>(img.h) * img.w);
  const auto* p = reinterpret_cast<const uint16_t*>(img.bytes.data());
  out.assign(p, p + out.size());
  return out;
}

void write_mask_png(const std::string& path, const Tensor& mask) {
  if (mask.rank() != 3 || mask.dim(0) != 1) fail("write_mask_png: expected 1xhxw, got " + shape_str(mask));
  const int h = mask.dim(1), w = mask.dim(2);
  std::vector<uint8_t> buf(static_cast<size_t>(h) * w);
  for (int64_t i = 0; i < mask.size(); ++i) buf[static_cast<size_t>(i)] = mask[i] != 0.0 ? 255 : 0;
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int i = 0; i < h; ++i) rows[static_cast<size_t>(i)] = buf.data() + static_cast<size_t>(i) * w;
  write_png(path, h, w, 8, PNG_COLOR_TYPE_GRAY, rows);
}

Tensor read_mask_png(const std::string& path) {
  PngImage img = read_png(path, 1, 8);
  Tensor mask({1, img.h, img.w});
  for (int64_t i = 0; i < mask.size(); ++i) mask[i] = img.bytes[static_cast<size_t>(i)] >= 128 ? 1.0 : 0.0;
  return mask;
}

}  // namespace ftfoot
