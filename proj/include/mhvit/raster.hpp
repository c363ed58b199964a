#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mhvit/error.hpp"

namespace mhvit {

// Row-major single-channel raster.
template <class T>
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<T> pixels;

  Raster() = default;
  Raster(std::size_t w, std::size_t h, T fill = T{})
      : width(w), height(h), pixels(w * h, fill) {}

  T& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  const T& at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  bool operator==(const Raster&) const = default;
};

using GrayRaster = Raster<std::uint8_t>;

struct RgbRaster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // 3 bytes per pixel
  bool operator==(const RgbRaster&) const = default;
};

// Binary tissue mask; nonzero pixels are tissue.
struct TissueMaskRaster {
  std::size_t width = 0;
  std::size_t height = 0;
  double spacing_um = 0.5;
  std::vector<std::uint8_t> bitmap;

  TissueMaskRaster() = default;
  TissueMaskRaster(std::size_t w, std::size_t h, double spacing = 0.5)
      : width(w), height(h), spacing_um(spacing), bitmap(w * h, 0) {
    validate();
  }

  // Multi-class masks are binarized: any nonzero value becomes 1.
  static TissueMaskRaster from_gray(const GrayRaster& gray, double spacing) {
    TissueMaskRaster m;
    m.width = gray.width;
    m.height = gray.height;
    m.spacing_um = spacing;
    m.bitmap.resize(gray.pixels.size());
    for (std::size_t i = 0; i < gray.pixels.size(); ++i) m.bitmap[i] = gray.pixels[i] ? 1 : 0;
    m.validate();
    return m;
  }

  void validate() const {
    if (width == 0 || height == 0) throw ValidationError("tissue mask must be at least 1x1");
    if (!(spacing_um > 0.0)) throw ValidationError("tissue mask spacing must be > 0");
    if (bitmap.size() != width * height) throw ShapeError("tissue mask bitmap size mismatch");
  }

  bool tissue(std::size_t x, std::size_t y) const { return bitmap[y * width + x] != 0; }
  void set(std::size_t x, std::size_t y, bool value) { bitmap[y * width + x] = value ? 1 : 0; }

  GrayRaster to_gray() const {
    GrayRaster g(width, height);
    for (std::size_t i = 0; i < bitmap.size(); ++i) g.pixels[i] = bitmap[i] ? 255 : 0;
    return g;
  }
};

}  // namespace mhvit
