#pragma once

// Region-level attention heatmaps and slide-level stitching.
//
// A region heatmap paints each patch's PxP block with the class-token
// attention it receives, averaged over heads. Values are min-max normalized
// over the patches that took part in attention into [kHeatmapFloor, 1], so
// that exactly 0 is reserved for "no attention" (masked background).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhvit/attention.hpp"
#include "mhvit/binary_io.hpp"
#include "mhvit/hvit.hpp"
#include "mhvit/image_io.hpp"
#include "mhvit/raster.hpp"
#include "mhvit/tensor.hpp"

namespace mhvit {

inline constexpr double kHeatmapFloor = 1.0 / 255.0;

struct HeatmapRaster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;  // row-major, in [0, 1]
  nlohmann::json provenance = nlohmann::json::object();

  HeatmapRaster() = default;
  HeatmapRaster(std::size_t w, std::size_t h) : width(w), height(h), values(w * h, 0.0) {}

  double at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
  double& at(std::size_t x, std::size_t y) { return values[y * width + x]; }
};

// Class-token attention onto each patch column, averaged over heads.
// `weights` is (heads, T+1, T+1) for one region.
inline std::vector<double> class_token_attention(const Tensor& weights) {
  if (weights.ndim() != 3 || weights.dim(1) != weights.dim(2) || weights.dim(1) < 2)
    throw ShapeError("class_token_attention: weights " + shape_str(weights.shape()));
  const std::size_t heads = weights.dim(0), cols = weights.dim(2);
  const auto w = weights.data();
  std::vector<double> out(cols - 1, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t j = 1; j < cols; ++j) out[j - 1] += w[h * cols * cols + j];
  for (auto& v : out) v /= static_cast<double>(heads);
  return out;
}

// (M, heads, T', T') -> (heads, T', T') of region m.
inline Tensor region_slice(const Tensor& weights, std::size_t m) {
  if (weights.ndim() != 4 || m >= weights.dim(0))
    throw ShapeError("region_slice " + std::to_string(m) + " of " + shape_str(weights.shape()));
  const std::size_t per = weights.numel() / weights.dim(0);
  const auto w = weights.data();
  return Tensor({weights.dim(1), weights.dim(2), weights.dim(3)},
                std::vector<double>(w.begin() + static_cast<std::ptrdiff_t>(m * per),
                                    w.begin() + static_cast<std::ptrdiff_t>((m + 1) * per)));
}

// `masked` selects the masked-attention rendering: zero-tissue patches are
// painted exactly 0 and left out of the normalization range.
inline HeatmapRaster region_heatmap(const Tensor& weights, const AttentionMaskVector& tissue,
                                    std::size_t region_size, std::size_t patch_size, bool masked) {
  if (patch_size == 0 || region_size % patch_size != 0)
    throw ShapeError("region_heatmap: region size not a multiple of patch size");
  const std::size_t grid = region_size / patch_size;
  const std::vector<double> attn = class_token_attention(weights);
  if (attn.size() != grid * grid || tissue.pct.size() != attn.size()) {
    throw ShapeError("region_heatmap: " + std::to_string(attn.size()) + " attention columns, " +
                     std::to_string(tissue.pct.size()) + " tissue entries, " +
                     std::to_string(grid * grid) + " patches");
  }
  std::vector<bool> active(attn.size(), true);
  if (masked)
    for (std::size_t j = 0; j < attn.size(); ++j) active[j] = tissue.pct[j] != 0.0;

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t j = 0; j < attn.size(); ++j) {
    if (!active[j]) continue;
    lo = std::min(lo, attn[j]);
    hi = std::max(hi, attn[j]);
  }
  if (lo > hi) throw ValidationError("region_heatmap: region has no tissue patch");

  std::vector<double> patch_value(attn.size(), 0.0);
  for (std::size_t j = 0; j < attn.size(); ++j) {
    if (!active[j]) continue;
    patch_value[j] =
        hi > lo ? std::clamp(1.0 - (1.0 - kHeatmapFloor) * (hi - attn[j]) / (hi - lo), kHeatmapFloor, 1.0)
                : 1.0;
  }

  HeatmapRaster out(region_size, region_size);
  for (std::size_t y = 0; y < region_size; ++y) {
    const std::size_t prow = (y / patch_size) * grid;
    double* row = out.values.data() + y * region_size;
    for (std::size_t x = 0; x < region_size; ++x) row[x] = patch_value[prow + x / patch_size];
  }
  out.provenance = {{"kind", "region"},
                    {"masked", masked},
                    {"head_reduction", "mean"},
                    {"query", "class_token"},
                    {"normalization", "min-max over attended patches into [1/255, 1]; constant -> 1"}};
  return out;
}

// Pastes region heatmaps at their slide coordinates on a zero canvas and
// average-pools by `downsample`. Output is ceil(W/s) x ceil(H/s); each
// output pixel is the mean of the canvas pixels of its sxs block that lie
// inside the slide. Parts of a region past the slide edge are dropped.
inline HeatmapRaster stitch_heatmaps(std::span<const HeatmapRaster> regions,
                                     std::span<const RegionCoord> coords, std::size_t slide_width,
                                     std::size_t slide_height, std::size_t downsample) {
  if (regions.size() != coords.size())
    throw ShapeError("stitch_heatmaps: region and coordinate counts differ");
  if (downsample == 0) throw ValidationError("stitch_heatmaps: downsample must be >= 1");
  if (slide_width == 0 || slide_height == 0) throw ValidationError("stitch_heatmaps: empty slide");
  for (std::size_t i = 0; i < regions.size(); ++i) {
    if (coords[i].x >= slide_width || coords[i].y >= slide_height)
      throw ValidationError("stitch_heatmaps: region " + std::to_string(i) + " lies outside the slide");
    for (std::size_t j = 0; j < i; ++j) {
      const bool disjoint = coords[i].x + regions[i].width <= coords[j].x ||
                            coords[j].x + regions[j].width <= coords[i].x ||
                            coords[i].y + regions[i].height <= coords[j].y ||
                            coords[j].y + regions[j].height <= coords[i].y;
      if (!disjoint)
        throw ValidationError("stitch_heatmaps: regions " + std::to_string(j) + " and " +
                              std::to_string(i) + " overlap");
    }
  }

  const std::size_t s = downsample;
  const std::size_t ow = (slide_width + s - 1) / s;
  const std::size_t oh = (slide_height + s - 1) / s;
  HeatmapRaster out(ow, oh);

  std::vector<std::size_t> by_x(regions.size());
  for (std::size_t i = 0; i < by_x.size(); ++i) by_x[i] = i;
  std::sort(by_x.begin(), by_x.end(), [&](auto a, auto b) { return coords[a].x < coords[b].x; });

  // Canvas rows top to bottom, pixels left to right: each output pixel sums
  // its block in row-major order, exactly as a full-canvas paint would.
  std::vector<double> acc(ow, 0.0);
  for (std::size_t v = 0; v < oh; ++v) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const std::size_t y_end = std::min(slide_height, (v + 1) * s);
    for (std::size_t y = v * s; y < y_end; ++y) {
      for (std::size_t idx : by_x) {
        const auto& reg = regions[idx];
        const auto& c = coords[idx];
        if (y < c.y || y >= c.y + reg.height) continue;
        const double* src = reg.values.data() + (y - c.y) * reg.width;
        const std::size_t x_end = std::min(slide_width, c.x + reg.width);
        for (std::size_t x = c.x; x < x_end; ++x) acc[x / s] += src[x - c.x];
      }
    }
    const double rows = static_cast<double>(y_end - v * s);
    for (std::size_t u = 0; u < ow; ++u) {
      const double cols = static_cast<double>(std::min(slide_width, (u + 1) * s) - u * s);
      out.values[v * ow + u] = acc[u] / (rows * cols);
    }
  }
  out.provenance = {{"kind", "stitched"}, {"downsample", s}, {"regions", regions.size()}};
  return out;
}

// ---------------------------------------------------------------------------
// Image output

enum class Colormap { gray16, hot };

inline Colormap parse_colormap(const std::string& s) {
  if (s == "gray16") return Colormap::gray16;
  if (s == "hot") return Colormap::hot;
  throw ValidationError("colormap must be 'gray16' or 'hot', got '" + s + "'");
}

// 8-bit level of a heatmap value: 0 only for exactly 0, otherwise 1..255.
inline std::uint8_t heat_level(double v) {
  if (v == 0.0) return 0;
  return static_cast<std::uint8_t>(std::clamp<long>(std::lround(v * 255.0), 1, 255));
}

// "Hot" ramp: red rises over levels 1..85, then green over 86..170, then
// blue over 171..255. R+G+B is strictly increasing in the level, and level 0
// is the reserved "no attention" colour, pure black.
inline std::array<std::uint8_t, 3> hot_color(std::uint8_t level) {
  const int l = level;
  const int r = std::min(255, 3 * l);
  const int g = std::clamp(3 * (l - 85), 0, 255);
  const int b = std::clamp(3 * (l - 170), 0, 255);
  return {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)};
}

inline std::uint8_t hot_level(const std::array<std::uint8_t, 3>& c) {
  return static_cast<std::uint8_t>((c[0] + c[1] + c[2]) / 3);
}

inline void check_heatmap_range(const HeatmapRaster& h) {
  for (double v : h.values)
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("heatmap value outside [0, 1]");
}

inline RgbRaster apply_colormap(const HeatmapRaster& h) {
  check_heatmap_range(h);
  RgbRaster out{h.width, h.height, std::vector<std::uint8_t>(h.values.size() * 3)};
  for (std::size_t i = 0; i < h.values.size(); ++i) {
    const auto c = hot_color(heat_level(h.values[i]));
    std::copy(c.begin(), c.end(), out.rgb.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }
  return out;
}

// Lossless PNG plus a "<path>.json" sidecar with provenance and colormap.
inline void write_image(const HeatmapRaster& h, Colormap cmap, const std::string& path) {
  check_heatmap_range(h);
  if (cmap == Colormap::gray16) {
    Raster<std::uint16_t> r(h.width, h.height);
    for (std::size_t i = 0; i < h.values.size(); ++i)
      r.pixels[i] = static_cast<std::uint16_t>(std::lround(h.values[i] * 65535.0));
    write_png_gray16(path, r);
  } else {
    write_png_rgb8(path, apply_colormap(h));
  }
  nlohmann::json meta = h.provenance;
  meta["colormap"] = cmap == Colormap::gray16 ? "gray16" : "hot";
  meta["width"] = h.width;
  meta["height"] = h.height;
  write_file(path + ".json", meta.dump(2) + "\n");
}

// Inverse of write_image: values come back as level / 65535 (gray16) or
// level / 255 (hot).
inline HeatmapRaster read_image(const std::string& path, Colormap cmap) {
  HeatmapRaster h;
  if (cmap == Colormap::gray16) {
    const auto r = read_png_gray16(path);
    h = HeatmapRaster(r.width, r.height);
    for (std::size_t i = 0; i < r.pixels.size(); ++i) h.values[i] = r.pixels[i] / 65535.0;
  } else {
    const auto r = read_png_rgb8(path);
    h = HeatmapRaster(r.width, r.height);
    for (std::size_t i = 0; i < h.values.size(); ++i)
      h.values[i] = hot_level({r.rgb[3 * i], r.rgb[3 * i + 1], r.rgb[3 * i + 2]}) / 255.0;
  }
  return h;
}

}  // namespace mhvit
