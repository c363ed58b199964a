#pragma once

// Toy patch encoder standing in for a frozen pretrained patch transformer.
//
// Each PxP patch is summarized by its tissue fraction f, the mean stain of
// its tissue pixels t and the mean stain of its background pixels b (pixels
// outside the raster are background with stain 0). These statistics go
// through a fixed random tanh layer:
//
//   feature_k = tanh(A_k . [f, f*t, (1-f)*b, 1-f] + c_k)
//
// A and c depend only on the extractor seed, so every slide is embedded by
// the same function.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mhvit/hvit.hpp"
#include "mhvit/params.hpp"
#include "mhvit/pipeline/regions.hpp"
#include "mhvit/raster.hpp"

namespace mhvit {

struct PatchStatistics {
  double tissue_fraction = 0.0;
  double tissue_stain = 0.0;      // in [0, 1], 0 when the patch has no tissue
  double background_stain = 0.0;  // in [0, 1], 0 when the patch is all tissue
};

inline std::vector<PatchStatistics> region_patch_statistics(const TissueMaskRaster& mask,
                                                            const GrayRaster& stain,
                                                            const RegionSpec& region,
                                                            std::size_t patch_size) {
  if (stain.width != mask.width || stain.height != mask.height)
    throw ShapeError("stain raster and tissue mask differ in size");
  if (patch_size == 0 || region.size % patch_size != 0)
    throw ShapeError("region size is not a multiple of patch size");
  const std::size_t grid = region.size / patch_size;
  const std::size_t n = grid * grid;
  std::vector<std::uint64_t> tissue(n, 0), tissue_sum(n, 0), bg_sum(n, 0);
  const std::size_t x_end = std::min(mask.width, region.x + region.size);
  const std::size_t y_end = std::min(mask.height, region.y + region.size);
  for (std::size_t y = region.y; y < y_end; ++y) {
    const std::size_t prow = ((y - region.y) / patch_size) * grid;
    const std::uint8_t* mrow = mask.bitmap.data() + y * mask.width;
    const std::uint8_t* srow = stain.pixels.data() + y * stain.width;
    for (std::size_t x = region.x; x < x_end; ++x) {
      const std::size_t j = prow + (x - region.x) / patch_size;
      if (mrow[x]) {
        ++tissue[j];
        tissue_sum[j] += srow[x];
      } else {
        bg_sum[j] += srow[x];
      }
    }
  }
  const std::uint64_t area = static_cast<std::uint64_t>(patch_size) * patch_size;
  std::vector<PatchStatistics> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    out[j].tissue_fraction = static_cast<double>(tissue[j]) / static_cast<double>(area);
    if (tissue[j])
      out[j].tissue_stain =
          static_cast<double>(tissue_sum[j]) / (255.0 * static_cast<double>(tissue[j]));
    if (tissue[j] < area)
      out[j].background_stain =
          static_cast<double>(bg_sum[j]) / (255.0 * static_cast<double>(area - tissue[j]));
  }
  return out;
}

class PatchFeatureExtractor {
 public:
  static constexpr std::size_t kStatistics = 4;

  PatchFeatureExtractor(std::size_t dim, std::uint64_t seed) : dim_(dim) {
    if (dim == 0) throw ValidationError("feature dimension must be positive");
    Rng rng(RngSeed{mix_seed(seed, 0xfea7)});
    weights_.resize(dim * kStatistics);
    for (auto& w : weights_) w = rng.normal(0.0, 2.0);
    bias_.resize(dim);
    for (auto& b : bias_) b = rng.normal(0.0, 0.5);
  }

  std::size_t dim() const { return dim_; }

  void encode(const PatchStatistics& s, double* out) const {
    const double f = s.tissue_fraction;
    const double u[kStatistics] = {f, f * s.tissue_stain, (1.0 - f) * s.background_stain,
                                   1.0 - f};
    for (std::size_t k = 0; k < dim_; ++k) {
      double z = bias_[k];
      for (std::size_t i = 0; i < kStatistics; ++i) z += weights_[k * kStatistics + i] * u[i];
      out[k] = std::tanh(z);
    }
  }

 private:
  std::size_t dim_;
  std::vector<double> weights_;
  std::vector<double> bias_;
};

struct TilingConfig {
  std::size_t region_size = 1024;
  std::size_t patch_size = 256;
  double min_tissue = kDefaultMinTissue;
};

// Region extraction, tissue vectors and patch features for one slide.
// Returns a sample with zero regions when every region is discarded.
inline SlideSample preprocess_slide(const std::string& slide_id, int label,
                                    const TissueMaskRaster& mask, const GrayRaster& stain,
                                    const TilingConfig& tiling,
                                    const PatchFeatureExtractor& extractor) {
  if (tiling.patch_size == 0 || tiling.region_size % tiling.patch_size != 0)
    throw ValidationError("region size must be a multiple of patch size");
  SlideSample s;
  s.slide_id = slide_id;
  s.label = label;
  s.width = mask.width;
  s.height = mask.height;
  const auto regions = extract_regions(mask, tiling.region_size, tiling.min_tissue);
  if (regions.empty()) return s;

  const std::size_t grid = tiling.region_size / tiling.patch_size;
  const std::size_t t = grid * grid;
  const std::size_t f = extractor.dim();
  std::vector<double> features(regions.size() * t * f);
  for (std::size_t m = 0; m < regions.size(); ++m) {
    s.region_coords.push_back({regions[m].x, regions[m].y});
    s.tissue.push_back(patch_tissue_fractions(mask, regions[m], tiling.patch_size));
    const auto stats = region_patch_statistics(mask, stain, regions[m], tiling.patch_size);
    for (std::size_t j = 0; j < t; ++j) extractor.encode(stats[j], &features[(m * t + j) * f]);
  }
  s.patch_features = Tensor({regions.size(), t, f}, std::move(features));
  return s;
}

}  // namespace mhvit
