#pragma once

// PNG reading and writing through libpng's simplified API.

#include <png.h>

#include <cstdint>
#include <string>
#include <vector>

#include "mhvit/error.hpp"
#include "mhvit/raster.hpp"

namespace mhvit {

namespace detail {

inline void png_write(const std::string& path, png_uint_32 format, std::size_t w,
                      std::size_t h, const void* data) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, data, 0, nullptr)) {
    throw IoError("cannot write PNG " + path + ": " + image.message);
  }
}

template <class T>
std::vector<T> png_read(const std::string& path, png_uint_32 format, std::size_t& w,
                        std::size_t& h) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot read PNG " + path + ": " + image.message);
  }
  image.format = format;
  std::vector<T> buffer(PNG_IMAGE_SIZE(image) / sizeof(T));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path + ": " + image.message);
  }
  w = image.width;
  h = image.height;
  return buffer;
}

}  // namespace detail

inline void write_png_gray8(const std::string& path, const GrayRaster& r) {
  detail::png_write(path, PNG_FORMAT_GRAY, r.width, r.height, r.pixels.data());
}

inline GrayRaster read_png_gray8(const std::string& path) {
  GrayRaster r;
  r.pixels = detail::png_read<std::uint8_t>(path, PNG_FORMAT_GRAY, r.width, r.height);
  return r;
}

// 16-bit grayscale stored with a linear (gamma 1.0) transfer, so values
// round-trip unchanged.
inline void write_png_gray16(const std::string& path, const Raster<std::uint16_t>& r) {
  detail::png_write(path, PNG_FORMAT_LINEAR_Y, r.width, r.height, r.pixels.data());
}

inline Raster<std::uint16_t> read_png_gray16(const std::string& path) {
  Raster<std::uint16_t> r;
  r.pixels = detail::png_read<std::uint16_t>(path, PNG_FORMAT_LINEAR_Y, r.width, r.height);
  return r;
}

inline void write_png_rgb8(const std::string& path, const RgbRaster& r) {
  detail::png_write(path, PNG_FORMAT_RGB, r.width, r.height, r.rgb.data());
}

inline RgbRaster read_png_rgb8(const std::string& path) {
  RgbRaster r;
  r.rgb = detail::png_read<std::uint8_t>(path, PNG_FORMAT_RGB, r.width, r.height);
  return r;
}

}  // namespace mhvit
