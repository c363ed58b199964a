#pragma once

// Synthetic slides: elliptical tissue blobs on a background canvas.
//
// Every tissue pixel carries a stain intensity; the slide label is the
// mean tissue stain binned into six ordinal classes, so it is a function of
// tissue pixels only. Background pixels carry a distractor intensity that
// tracks the label the generator aimed for. A model that looks at
// background can exploit it, which is the interpretability hazard masking
// removes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "mhvit/hvit.hpp"
#include "mhvit/params.hpp"
#include "mhvit/pipeline/features.hpp"
#include "mhvit/pipeline/regions.hpp"
#include "mhvit/raster.hpp"

namespace mhvit {

struct SyntheticSlideSpec {
  std::size_t region_size = 1024;
  std::size_t patch_size = 256;
  std::size_t min_regions_x = 2, max_regions_x = 3;  // full regions across
  std::size_t min_regions_y = 2, max_regions_y = 3;
  std::size_t min_blobs = 2, max_blobs = 5;
  double min_blob_radius = 0.2;  // as a fraction of region_size
  double max_blob_radius = 0.6;
  double intensity_jitter = 0.04;    // per-blob stddev around the class centre
  double distractor_strength = 0.7;  // background stain slope over labels
  double distractor_noise = 0.05;    // per-slide background stddev
  double spacing_um = 0.5;
  std::size_t feature_dim = 16;
  std::uint64_t feature_seed = 1234;

  void validate() const {
    auto fail = [](const std::string& m) { throw ValidationError("synthetic spec: " + m); };
    if (region_size == 0 || patch_size == 0 || region_size % patch_size != 0)
      fail("region_size must be a positive multiple of patch_size");
    if (min_regions_x == 0 || min_regions_y == 0 || min_regions_x > max_regions_x ||
        min_regions_y > max_regions_y)
      fail("region counts must satisfy 1 <= min <= max");
    if (min_blobs == 0 || min_blobs > max_blobs) fail("blob counts must satisfy 1 <= min <= max");
    if (!(min_blob_radius > 0.0 && min_blob_radius <= max_blob_radius))
      fail("blob radii must satisfy 0 < min <= max");
    if (!(intensity_jitter >= 0.0) || !(distractor_noise >= 0.0))
      fail("noise levels must be non-negative");
    if (!(spacing_um > 0.0)) fail("spacing must be positive");
    if (feature_dim == 0) fail("feature_dim must be positive");
  }

  TilingConfig tiling() const { return {region_size, patch_size, kDefaultMinTissue}; }
};

struct SyntheticSlide {
  std::string slide_id;
  TissueMaskRaster mask;
  GrayRaster stain;
  int label = 0;
};

inline std::string synthetic_slide_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "slide_%04zu", index);
  return buf;
}

// Six-bin ordinal label of the mean tissue stain. Exact integer arithmetic.
inline int label_from_pixels(const TissueMaskRaster& mask, const GrayRaster& stain) {
  std::uint64_t count = 0, total = 0;
  for (std::size_t i = 0; i < mask.bitmap.size(); ++i) {
    if (mask.bitmap[i]) {
      ++count;
      total += stain.pixels[i];
    }
  }
  if (count == 0) throw ValidationError("label_from_pixels: slide has no tissue");
  const std::uint64_t bin = (static_cast<std::uint64_t>(kNumIsupClasses) * total) / (255 * count);
  return static_cast<int>(std::min<std::uint64_t>(bin, kNumIsupClasses - 1));
}

inline std::uint8_t to_stain_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 1.0 / 255.0, 1.0) * 255.0));
}

// Deterministic in (spec, seed, index). Retries with fresh sub-seeds until
// at least one region survives the tissue threshold.
inline SyntheticSlide generate_synthetic_slide(const SyntheticSlideSpec& spec, std::uint64_t seed,
                                               std::size_t index) {
  spec.validate();
  const int target = static_cast<int>(index % kNumIsupClasses);
  const double r = static_cast<double>(spec.region_size);
  for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
    Rng rng(RngSeed{mix_seed(mix_seed(seed, index), attempt)});
    const auto nx = static_cast<std::size_t>(
        rng.integer(static_cast<std::int64_t>(spec.min_regions_x),
                    static_cast<std::int64_t>(spec.max_regions_x)));
    const auto ny = static_cast<std::size_t>(
        rng.integer(static_cast<std::int64_t>(spec.min_regions_y),
                    static_cast<std::int64_t>(spec.max_regions_y)));
    // A partial strip on the right and bottom exercises edge padding.
    const std::size_t width =
        nx * spec.region_size + static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(spec.region_size / 2)));
    const std::size_t height =
        ny * spec.region_size + static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(spec.region_size / 2)));

    SyntheticSlide slide;
    slide.slide_id = synthetic_slide_id(index);
    slide.mask = TissueMaskRaster(width, height, spec.spacing_um);
    const double background =
        0.15 + spec.distractor_strength * static_cast<double>(target) / (kNumIsupClasses - 1) +
        rng.normal(0.0, spec.distractor_noise);
    slide.stain = GrayRaster(width, height, to_stain_byte(background));

    const double centre = (static_cast<double>(target) + 0.5) / kNumIsupClasses;
    const auto blobs = rng.integer(static_cast<std::int64_t>(spec.min_blobs),
                                   static_cast<std::int64_t>(spec.max_blobs));
    for (std::int64_t b = 0; b < blobs; ++b) {
      const double cx = rng.uniform(0.0, static_cast<double>(width));
      const double cy = rng.uniform(0.0, static_cast<double>(height));
      const double rx = r * rng.uniform(spec.min_blob_radius, spec.max_blob_radius);
      const double ry = r * rng.uniform(spec.min_blob_radius, spec.max_blob_radius);
      const std::uint8_t value = to_stain_byte(centre + rng.normal(0.0, spec.intensity_jitter));
      const auto y0 = static_cast<std::size_t>(std::max(0.0, std::ceil(cy - ry)));
      const auto y1 = static_cast<std::size_t>(std::min(static_cast<double>(height - 1), std::floor(cy + ry)));
      for (std::size_t y = y0; y <= y1 && y < height; ++y) {
        const double dy = (static_cast<double>(y) - cy) / ry;
        if (dy * dy > 1.0) continue;
        const double half = rx * std::sqrt(1.0 - dy * dy);
        const double xa = std::max(0.0, std::ceil(cx - half));
        const double xb = std::min(static_cast<double>(width - 1), std::floor(cx + half));
        if (xa > xb) continue;
        for (auto x = static_cast<std::size_t>(xa); x <= static_cast<std::size_t>(xb); ++x) {
          slide.mask.bitmap[y * width + x] = 1;
          slide.stain.pixels[y * width + x] = value;
        }
      }
    }
    if (extract_regions(slide.mask, spec.region_size).empty()) continue;
    slide.label = label_from_pixels(slide.mask, slide.stain);
    return slide;
  }
  throw ValidationError("synthetic spec: no slide with a retained region after 64 attempts; "
                        "increase blob sizes or counts");
}

inline SlideSample preprocess_synthetic(const SyntheticSlide& slide, const SyntheticSlideSpec& spec) {
  const PatchFeatureExtractor extractor(spec.feature_dim, spec.feature_seed);
  return preprocess_slide(slide.slide_id, slide.label, slide.mask, slide.stain, spec.tiling(),
                          extractor);
}

inline std::vector<SlideSample> synthesize_dataset(const SyntheticSlideSpec& spec,
                                                   std::size_t n_slides, std::uint64_t seed) {
  if (n_slides == 0) throw ValidationError("synthesize_dataset: n_slides must be >= 1");
  spec.validate();
  const PatchFeatureExtractor extractor(spec.feature_dim, spec.feature_seed);
  std::vector<SlideSample> out;
  out.reserve(n_slides);
  for (std::size_t i = 0; i < n_slides; ++i) {
    const SyntheticSlide slide = generate_synthetic_slide(spec, seed, i);
    out.push_back(preprocess_slide(slide.slide_id, slide.label, slide.mask, slide.stain,
                                   spec.tiling(), extractor));
  }
  return out;
}

}  // namespace mhvit
