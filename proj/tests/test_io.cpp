#include <filesystem>

#include <gtest/gtest.h>

#include "mhvit/app/config_file.hpp"
#include "mhvit/binary_io.hpp"
#include "mhvit/image_io.hpp"
#include "mhvit/pipeline/slide_io.hpp"
#include "mhvit/pipeline/synth.hpp"

using namespace mhvit;

namespace {

std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "mhvit_test_io";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

PreprocessedSlide sample_slide() {
  SyntheticSlideSpec spec;
  spec.region_size = 64;
  spec.patch_size = 16;
  spec.feature_dim = 4;
  const auto raw = generate_synthetic_slide(spec, 1, 2);
  PreprocessedSlide p;
  p.sample = preprocess_synthetic(raw, spec);
  p.spacing_um = raw.mask.spacing_um;
  p.region_size = 64;
  p.patch_size = 16;
  return p;
}

}  // namespace

TEST(BinaryIo, RoundTripAndTruncation) {
  BinaryWriter w;
  w.put<std::uint32_t>(7);
  w.put<double>(-2.5);
  w.put_string("abc");
  const std::vector<double> v{1.0, 2.0};
  w.put_doubles(v);
  BinaryReader r(w.bytes());
  EXPECT_EQ(r.get<std::uint32_t>(), 7u);
  EXPECT_EQ(r.get<double>(), -2.5);
  EXPECT_EQ(r.get_string(), "abc");
  EXPECT_EQ(r.get_doubles(2), v);
  EXPECT_TRUE(r.at_end());
  EXPECT_THROW(r.get<std::uint8_t>(), IoError);
  BinaryReader huge(std::string(4, '\xff'));
  EXPECT_THROW(huge.get_string(), IoError);
}

TEST(BinaryIo, MissingFileIsIoError) {
  EXPECT_THROW(read_file(temp_path("does_not_exist.bin")), IoError);
}

TEST(SlideIo, SerializeDeserializeSerializeIsStable) {
  const PreprocessedSlide p = sample_slide();
  const std::string bytes = serialize_slide(p);
  const PreprocessedSlide back = deserialize_slide(bytes, "mem");
  EXPECT_EQ(serialize_slide(back), bytes);
  EXPECT_EQ(back.sample.slide_id, p.sample.slide_id);
  EXPECT_EQ(back.sample.label, p.sample.label);
  EXPECT_EQ(back.sample.region_coords, p.sample.region_coords);
  EXPECT_THROW(deserialize_slide(bytes.substr(0, bytes.size() - 3), "mem"), IoError);
  EXPECT_THROW(deserialize_slide("MHVSLIDX" + bytes.substr(8), "mem"), IoError);
}

TEST(SlideIo, SlideWithoutRegionsCannotBeStored) {
  PreprocessedSlide p;
  p.region_size = 64;
  p.patch_size = 16;
  EXPECT_THROW(serialize_slide(p), ValidationError);
}

TEST(Manifest, LinesRoundTrip) {
  const std::string path = temp_path("manifest.jsonl");
  const ManifestRecord a{"s1", 3, "masks/s1.png", "stain/s1.png", 0.25};
  const ManifestRecord b{"s2", 0, "masks/s2.png", "stain/s2.png", 0.5};
  write_file(path, manifest_line(a) + "\n" + manifest_line(b) + "\n");
  const auto recs = read_manifest(path);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].id, "s1");
  EXPECT_EQ(recs[0].label, 3);
  EXPECT_EQ(recs[0].spacing_um, 0.25);
  EXPECT_EQ(recs[1].stain, "stain/s2.png");
  write_file(path, "{\"id\": 1}\n");
  EXPECT_THROW(read_manifest(path), IoError);
}

TEST(MaskIo, PngAndSpacingSidecarRoundTrip) {
  TissueMaskRaster m(13, 9, 0.37);
  for (std::size_t i = 0; i < m.bitmap.size(); i += 3) m.bitmap[i] = 1;
  const std::string path = temp_path("mask.png");
  write_mask(path, m);
  const TissueMaskRaster back = read_mask(path);
  EXPECT_EQ(back.bitmap, m.bitmap);
  EXPECT_EQ(back.spacing_um, 0.37);
}

TEST(MaskIo, MultiClassMaskIsBinarized) {
  GrayRaster g(3, 1);
  g.pixels = {0, 2, 255};
  const TissueMaskRaster m = TissueMaskRaster::from_gray(g, 0.5);
  EXPECT_EQ(m.bitmap, (std::vector<std::uint8_t>{0, 1, 1}));
}

TEST(ImageIo, GrayAndRgbRoundTrip) {
  GrayRaster g(5, 3);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] = static_cast<std::uint8_t>(i * 17);
  write_png_gray8(temp_path("g.png"), g);
  EXPECT_EQ(read_png_gray8(temp_path("g.png")), g);
  RgbRaster c{2, 2, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}};
  write_png_rgb8(temp_path("c.png"), c);
  EXPECT_EQ(read_png_rgb8(temp_path("c.png")), c);
  EXPECT_THROW(read_png_gray8(temp_path("missing.png")), IoError);
}

TEST(ConfigFile, ParsesFlatKeyValue) {
  const auto e = app::parse_flat_config("# comment\nepochs = 7\n\nlr=0.5  # trailing\nname = \"a b\"\n", "t");
  ASSERT_EQ(e.size(), 3u);
  EXPECT_EQ(e[0], (std::pair<std::string, std::string>{"epochs", "7"}));
  EXPECT_EQ(e[1].second, "0.5");
  EXPECT_EQ(e[2].second, "a b");
}

TEST(ConfigFile, RejectsMalformedLines) {
  EXPECT_THROW(app::parse_flat_config("epochs 7\n", "t"), ValidationError);
  EXPECT_THROW(app::parse_flat_config("= 7\n", "t"), ValidationError);
  EXPECT_THROW(app::parse_flat_config("a = 1\na = 2\n", "t"), ValidationError);
}
