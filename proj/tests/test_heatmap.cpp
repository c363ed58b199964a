#include <filesystem>

#include <gtest/gtest.h>

#include "mhvit/eval/heatmap.hpp"

using namespace mhvit;

namespace {

Rng& rng_for(std::uint64_t seed) {
  static thread_local Rng rng(RngSeed{0});
  rng = Rng(RngSeed{seed});
  return rng;
}

// (heads, T+1, T+1) row-stochastic weights; masked columns (tissue 0) get
// exactly zero when `masked`.
Tensor synthetic_weights(const AttentionMaskVector& tissue, std::size_t heads, bool masked,
                         std::uint64_t seed) {
  Rng& rng = rng_for(seed);
  const std::size_t c = tissue.pct.size() + 1;
  std::vector<double> w(heads * c * c);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < c; ++i) {
      double z = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const bool off = masked && j > 0 && tissue.pct[j - 1] == 0.0;
        w[(h * c + i) * c + j] = off ? 0.0 : rng.uniform(0.1, 1.0);
        z += w[(h * c + i) * c + j];
      }
      for (std::size_t j = 0; j < c; ++j) w[(h * c + i) * c + j] /= z;
    }
  return Tensor({heads, c, c}, w);
}

HeatmapRaster random_raster(std::size_t w, std::size_t h, std::uint64_t seed) {
  Rng& rng = rng_for(seed);
  HeatmapRaster r(w, h);
  for (auto& v : r.values) v = rng.uniform() < 0.2 ? 0.0 : rng.uniform(kHeatmapFloor, 1.0);
  return r;
}

// Paint every region onto a full-size canvas, then average each sxs block
// over its in-slide pixels in raster order.
HeatmapRaster paint_then_pool(const std::vector<HeatmapRaster>& regions,
                              const std::vector<RegionCoord>& coords, std::size_t w,
                              std::size_t h, std::size_t s) {
  std::vector<double> canvas(w * h, 0.0);
  for (std::size_t i = 0; i < regions.size(); ++i)
    for (std::size_t y = 0; y < regions[i].height; ++y)
      for (std::size_t x = 0; x < regions[i].width; ++x) {
        const std::size_t cx = coords[i].x + x, cy = coords[i].y + y;
        if (cx < w && cy < h) canvas[cy * w + cx] = regions[i].at(x, y);
      }
  HeatmapRaster out((w + s - 1) / s, (h + s - 1) / s);
  for (std::size_t v = 0; v < out.height; ++v)
    for (std::size_t u = 0; u < out.width; ++u) {
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t y = v * s; y < std::min(h, (v + 1) * s); ++y)
        for (std::size_t x = u * s; x < std::min(w, (u + 1) * s); ++x) {
          sum += canvas[y * w + x];
          ++n;
        }
      out.at(u, v) = sum / static_cast<double>(n);
    }
  return out;
}

std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "mhvit_test_heatmap";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

}  // namespace

TEST(ClassTokenAttention, AveragesHeadsOverRowZero) {
  const Tensor w({2, 3, 3}, {0.2, 0.3, 0.5, 0, 0, 0, 0, 0, 0,  //
                             0.4, 0.5, 0.1, 0, 0, 0, 0, 0, 0});
  const auto a = class_token_attention(w);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_DOUBLE_EQ(a[0], 0.4);
  EXPECT_DOUBLE_EQ(a[1], 0.3);
}

TEST(RegionHeatmap, MaskedZeroBlocksAreExactlyTheBackgroundPatches) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng& rng = rng_for(seed + 50);
    AttentionMaskVector tissue{std::vector<double>(16)};
    for (auto& p : tissue.pct) p = rng.uniform() < 0.4 ? 0.0 : rng.uniform(0.01, 1.0);
    tissue.pct[3] = 0.7;
    const HeatmapRaster h = region_heatmap(synthetic_weights(tissue, 3, true, seed), tissue, 32, 8, true);
    for (std::size_t j = 0; j < 16; ++j) {
      const std::size_t px = (j % 4) * 8, py = (j / 4) * 8;
      for (std::size_t y = py; y < py + 8; ++y)
        for (std::size_t x = px; x < px + 8; ++x) {
          if (tissue.pct[j] == 0.0)
            EXPECT_EQ(h.at(x, y), 0.0);
          else
            EXPECT_GE(h.at(x, y), kHeatmapFloor);
          EXPECT_LE(h.at(x, y), 1.0);
        }
    }
  }
}

TEST(RegionHeatmap, PlainHeatmapIsPositiveOnBackground) {
  AttentionMaskVector tissue{{1.0, 0.0, 0.0, 0.5}};
  const HeatmapRaster h = region_heatmap(synthetic_weights(tissue, 2, false, 1), tissue, 4, 2, false);
  EXPECT_GT(h.at(2, 0), 0.0);
  EXPECT_GT(h.at(0, 2), 0.0);
}

TEST(RegionHeatmap, UniformAttentionIsOne) {
  AttentionMaskVector tissue{{1.0, 1.0, 1.0, 1.0}};
  const Tensor w = Tensor::full({2, 5, 5}, 0.2);
  const HeatmapRaster h = region_heatmap(w, tissue, 4, 2, false);
  for (double v : h.values) EXPECT_EQ(v, 1.0);
}

TEST(RegionHeatmap, ShapeChecks) {
  AttentionMaskVector tissue{{1.0, 1.0, 1.0}};
  EXPECT_THROW(region_heatmap(Tensor::full({1, 5, 5}, 0.2), tissue, 4, 2, false), ShapeError);
  EXPECT_THROW(region_heatmap(Tensor::full({1, 5, 5}, 0.2), tissue, 4, 3, false), ShapeError);
}

TEST(Stitch, SingleRegionAtOriginUnitScale) {
  const HeatmapRaster r = random_raster(4, 4, 2);
  const std::vector<HeatmapRaster> regs{r};
  const std::vector<RegionCoord> coords{{0, 0}};
  const HeatmapRaster s = stitch_heatmaps(regs, coords, 6, 5, 1);
  ASSERT_EQ(s.width, 6u);
  ASSERT_EQ(s.height, 5u);
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 6; ++x) EXPECT_EQ(s.at(x, y), x < 4 && y < 4 ? r.at(x, y) : 0.0);
}

TEST(Stitch, DownsampleByRegionSizeGivesRegionMean) {
  const HeatmapRaster r = random_raster(8, 8, 3);
  const std::vector<HeatmapRaster> regs{r};
  const std::vector<RegionCoord> coords{{8, 0}};
  const HeatmapRaster s = stitch_heatmaps(regs, coords, 16, 8, 8);
  ASSERT_EQ(s.width, 2u);
  double sum = 0.0;
  for (double v : r.values) sum += v;
  EXPECT_EQ(s.at(0, 0), 0.0);
  EXPECT_NEAR(s.at(1, 0), sum / 64.0, 1e-15);
}

TEST(Stitch, MatchesPaintThenPoolReference) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng& rng = rng_for(seed + 200);
    const std::size_t r = 8;
    const auto nx = static_cast<std::size_t>(rng.integer(1, 4));
    const auto ny = static_cast<std::size_t>(rng.integer(1, 4));
    const std::size_t w = nx * r + static_cast<std::size_t>(rng.integer(0, 7));
    const std::size_t h = ny * r + static_cast<std::size_t>(rng.integer(0, 7));
    const auto s = static_cast<std::size_t>(rng.integer(1, 6));
    std::vector<HeatmapRaster> regs;
    std::vector<RegionCoord> coords;
    for (std::size_t gy = 0; gy * r < h; ++gy)
      for (std::size_t gx = 0; gx * r < w; ++gx)
        if (rng_for(seed * 100 + gy * 10 + gx).uniform() < 0.7) {
          coords.push_back({gx * r, gy * r});
          regs.push_back(random_raster(r, r, seed * 1000 + regs.size()));
        }
    const HeatmapRaster got = stitch_heatmaps(regs, coords, w, h, s);
    const HeatmapRaster want = paint_then_pool(regs, coords, w, h, s);
    ASSERT_EQ(got.width, (w + s - 1) / s);
    ASSERT_EQ(got.height, (h + s - 1) / s);
    EXPECT_EQ(got.values, want.values) << "seed " << seed;
  }
}

TEST(Stitch, RejectsOverlapAndOutOfBounds) {
  const std::vector<HeatmapRaster> regs{HeatmapRaster(4, 4), HeatmapRaster(4, 4)};
  const std::vector<RegionCoord> overlap{{0, 0}, {2, 2}};
  EXPECT_THROW(stitch_heatmaps(regs, overlap, 8, 8, 1), ValidationError);
  const std::vector<RegionCoord> outside{{0, 0}, {8, 0}};
  EXPECT_THROW(stitch_heatmaps(regs, outside, 8, 8, 1), ValidationError);
  const std::vector<RegionCoord> fine{{0, 0}, {4, 0}};
  EXPECT_THROW(stitch_heatmaps(regs, fine, 8, 8, 0), ValidationError);
  EXPECT_NO_THROW(stitch_heatmaps(regs, fine, 8, 8, 3));
}

TEST(Colormap, HotIsStrictlyMonotoneWithBlackReserved) {
  EXPECT_EQ(hot_color(0), (std::array<std::uint8_t, 3>{0, 0, 0}));
  int prev = -1;
  for (int l = 0; l <= 255; ++l) {
    const auto c = hot_color(static_cast<std::uint8_t>(l));
    const int total = c[0] + c[1] + c[2];
    EXPECT_GT(total, prev);
    prev = total;
    EXPECT_EQ(hot_level(c), l);
  }
  EXPECT_EQ(heat_level(0.0), 0);
  EXPECT_EQ(heat_level(1e-9), 1);
  EXPECT_EQ(heat_level(1.0), 255);
}

TEST(WriteImage, RoundTripIsExact) {
  HeatmapRaster h(7, 5);
  Rng& rng = rng_for(9);
  for (auto& v : h.values) v = static_cast<double>(rng.integer(0, 65535)) / 65535.0;
  const std::string p16 = temp_path("round16.png");
  write_image(h, Colormap::gray16, p16);
  EXPECT_EQ(read_image(p16, Colormap::gray16).values, h.values);

  for (auto& v : h.values) v = static_cast<double>(rng.integer(0, 255)) / 255.0;
  const std::string p8 = temp_path("round_hot.png");
  write_image(h, Colormap::hot, p8);
  EXPECT_EQ(read_image(p8, Colormap::hot).values, h.values);
  EXPECT_TRUE(std::filesystem::exists(p8 + ".json"));
}

TEST(WriteImage, AllZeroRasterIsUniformReservedColour) {
  const HeatmapRaster h(6, 4);
  const std::string p = temp_path("zeros.png");
  write_image(h, Colormap::hot, p);
  const RgbRaster rgb = read_png_rgb8(p);
  for (auto b : rgb.rgb) EXPECT_EQ(b, 0);
}

TEST(WriteImage, RejectsOutOfRangeValues) {
  HeatmapRaster h(2, 2);
  h.values[1] = 1.5;
  EXPECT_THROW(write_image(h, Colormap::gray16, temp_path("bad.png")), ValidationError);
}
