#pragma once

// Region extraction and per-patch tissue fractions.
//
// Regions lie on a grid anchored at (0, 0) with stride R. Regions that run
// past the right or bottom edge are kept in the grid; pixels outside the
// raster count as background. A region is retained iff its tissue fraction
// (tissue pixels / R^2) is >= min_tissue.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mhvit/attention.hpp"
#include "mhvit/error.hpp"
#include "mhvit/raster.hpp"

namespace mhvit {

inline constexpr double kDefaultMinTissue = 0.10;

struct RegionSpec {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t size = 0;
  double tissue_fraction = 0.0;
};

inline std::vector<RegionSpec> extract_regions(const TissueMaskRaster& mask, std::size_t region_size,
                                               double min_tissue = kDefaultMinTissue) {
  mask.validate();
  if (region_size == 0) throw ValidationError("extract_regions: region size must be >= 1");
  if (!(min_tissue >= 0.0 && min_tissue <= 1.0))
    throw ValidationError("extract_regions: min_tissue must lie in [0, 1]");

  const std::size_t nx = (mask.width + region_size - 1) / region_size;
  const std::size_t ny = (mask.height + region_size - 1) / region_size;
  std::vector<std::uint64_t> counts(nx * ny, 0);
  for (std::size_t y = 0; y < mask.height; ++y) {
    const std::uint8_t* row = mask.bitmap.data() + y * mask.width;
    std::uint64_t* crow = counts.data() + (y / region_size) * nx;
    for (std::size_t x = 0; x < mask.width; ++x) crow[x / region_size] += row[x] ? 1 : 0;
  }

  const double area = static_cast<double>(region_size) * static_cast<double>(region_size);
  std::vector<RegionSpec> out;
  for (std::size_t gy = 0; gy < ny; ++gy) {
    for (std::size_t gx = 0; gx < nx; ++gx) {
      const double frac = static_cast<double>(counts[gy * nx + gx]) / area;
      if (frac >= min_tissue)
        out.push_back({gx * region_size, gy * region_size, region_size, frac});
    }
  }
  return out;
}

// Fraction of tissue pixels in each PxP patch of `region`, row-major over
// the (R/P) x (R/P) patch grid.
inline AttentionMaskVector patch_tissue_fractions(const TissueMaskRaster& mask,
                                                  const RegionSpec& region,
                                                  std::size_t patch_size) {
  if (patch_size == 0 || region.size == 0 || region.size % patch_size != 0) {
    throw ShapeError("patch_tissue_fractions: region size " + std::to_string(region.size) +
                     " is not a multiple of patch size " + std::to_string(patch_size));
  }
  if (region.x >= mask.width || region.y >= mask.height)
    throw ShapeError("patch_tissue_fractions: region origin outside the mask");
  const std::size_t grid = region.size / patch_size;
  std::vector<std::uint64_t> counts(grid * grid, 0);
  const std::size_t x_end = std::min(mask.width, region.x + region.size);
  const std::size_t y_end = std::min(mask.height, region.y + region.size);
  for (std::size_t y = region.y; y < y_end; ++y) {
    const std::uint8_t* row = mask.bitmap.data() + y * mask.width;
    std::uint64_t* crow = counts.data() + ((y - region.y) / patch_size) * grid;
    for (std::size_t x = region.x; x < x_end; ++x)
      crow[(x - region.x) / patch_size] += row[x] ? 1 : 0;
  }
  const double area = static_cast<double>(patch_size) * static_cast<double>(patch_size);
  AttentionMaskVector out;
  out.pct.resize(counts.size());
  for (std::size_t j = 0; j < counts.size(); ++j)
    out.pct[j] = static_cast<double>(counts[j]) / area;
  return out;
}

}  // namespace mhvit
