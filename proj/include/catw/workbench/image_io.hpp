#pragma once

// 8-bit RGB images: PNG via libpng (read/write), binary PPM (read).

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "catw/nn/checkpoint.hpp"

namespace catw {

struct Image8 {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, interleaved

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
};

namespace detail {

struct PngBuffer {
  const std::uint8_t* data;
  std::size_t size, pos;
};

inline void png_warn(png_structp, png_const_charp) {}

}  // namespace detail

/// Encodes an 8-bit RGB PNG into memory. No timestamp or text chunks, so the
/// bytes depend only on the pixels.
inline std::string encode_png(const Image8& img) {
  if (img.width == 0 || img.height == 0 || img.rgb.size() != img.width * img.height * 3)
    throw ContractError("encode_png: inconsistent image buffer");
  std::string out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, detail::png_warn);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png encoding failed");
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t n) {
        static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<const char*>(data), n);
      },
      [](png_structp) {});
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y) png_write_row(png, const_cast<png_bytep>(img.rgb.data() + y * img.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

inline Image8 decode_png(const std::string& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
    throw LoadError("not a PNG file");
  detail::PngBuffer buf{reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size(), 0};
  Image8 img;
  std::vector<png_bytep> rows;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, detail::png_warn);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw LoadError("undecodable PNG data");
  }
  png_set_read_fn(png, &buf, [](png_structp p, png_bytep out, png_size_t n) {
    auto* b = static_cast<detail::PngBuffer*>(png_get_io_ptr(p));
    if (b->pos + n > b->size) png_error(p, "truncated data");
    std::memcpy(out, b->data + b->pos, n);
    b->pos += n;
  });
  png_read_info(png, info);
  // Normalize every variant to 8-bit RGB.
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  if (png_get_rowbytes(png, info) != img.width * 3) png_error(png, "unexpected row layout");
  img.rgb.resize(img.width * img.height * 3);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.rgb.data() + y * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// Binary (P6) PPM with maxval ≤ 255.
inline Image8 decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#')
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      else if (std::isspace(static_cast<unsigned char>(bytes[pos])))
        ++pos;
      else
        break;
    }
    std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])) && bytes[pos] != '#') ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != "P6") throw LoadError("not a binary PPM file");
  Image8 img;
  std::size_t maxval = 0;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw LoadError("malformed PPM header");
  }
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 255) throw LoadError("unsupported PPM geometry or maxval");
  ++pos;  // single whitespace before the raster
  const std::size_t n = img.width * img.height * 3;
  if (pos + n > bytes.size()) throw LoadError("truncated PPM raster");
  img.rgb.assign(bytes.begin() + std::ptrdiff_t(pos), bytes.begin() + std::ptrdiff_t(pos + n));
  if (maxval != 255)
    for (auto& v : img.rgb) v = std::uint8_t(std::lround(double(v) * 255.0 / double(maxval)));
  return img;
}

inline std::string encode_ppm(const Image8& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
  return out;
}

/// Dispatches on the file signature.
inline Image8 read_image(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes);
  return decode_png(bytes);
}

inline void write_png(const std::filesystem::path& path, const Image8& img) {
  detail::write_file_atomic(path, encode_png(img));
}

/// Sample n of an N×3×H×W tensor in [0, 1] to 8-bit.
inline Image8 to_image8(const Tensor<float>& x, std::size_t n) {
  Image8 img;
  img.height = x.dim(2);
  img.width = x.dim(3);
  img.rgb.resize(img.width * img.height * 3);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t xx = 0; xx < img.width; ++xx)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(xx, y, c) = std::uint8_t(std::lround(std::clamp(double(x.at(n, c, y, xx)), 0.0, 1.0) * 255.0));
  return img;
}

/// Writes pixels into sample n of an N×3×H×W tensor as v/255.
inline void from_image8(const Image8& img, Tensor<float>& x, std::size_t n) {
  if (img.width != x.dim(3) || img.height != x.dim(2)) throw ContractError("from_image8: size mismatch");
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t xx = 0; xx < img.width; ++xx)
      for (std::size_t c = 0; c < 3; ++c) x.at(n, c, y, xx) = float(img.at(xx, y, c)) / 255.0f;
}

}  // namespace catw
