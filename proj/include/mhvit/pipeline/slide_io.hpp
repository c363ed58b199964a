#pragma once

// On-disk formats of the preprocessing stage.
//
// Preprocessed slide container, version 1, little-endian:
//
//   magic          8 bytes "MHVSLIDE"
//   version        u32     1
//   slide_id       u32 length + bytes
//   label          i32
//   spacing_um     f64
//   width, height  u64, u64     slide raster size in pixels
//   region_size    u64
//   patch_size     u64
//   feature_dim    u64
//   region_count   u64     M
//   per region:    x u64, y u64, T x f64 tissue fractions (row-major patch grid)
//   features       M x T x feature_dim f64, row-major
//
// Dataset manifest: JSON Lines, one object per slide
//   {"id": str, "label": int, "mask": path, "stain": path, "spacing": float}
// with paths relative to the manifest's directory. Mask PNGs carry a
// sidecar "<mask>.txt" holding one line "spacing_um=<value>".

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhvit/binary_io.hpp"
#include "mhvit/hvit.hpp"
#include "mhvit/image_io.hpp"
#include "mhvit/raster.hpp"

namespace mhvit {

inline constexpr char kSlideMagic[] = "MHVSLIDE";
inline constexpr std::uint32_t kSlideVersion = 1;

struct PreprocessedSlide {
  SlideSample sample;
  double spacing_um = 0.5;
  std::size_t region_size = 0;
  std::size_t patch_size = 0;
};

inline std::string serialize_slide(const PreprocessedSlide& p) {
  const SlideSample& s = p.sample;
  if (s.region_coords.empty()) throw ValidationError("cannot store a slide without regions");
  const std::size_t t = s.patch_features.dim(1);
  BinaryWriter w;
  w.put_bytes(std::string_view(kSlideMagic, 8));
  w.put<std::uint32_t>(kSlideVersion);
  w.put_string(s.slide_id);
  w.put<std::int32_t>(s.label);
  w.put<double>(p.spacing_um);
  w.put<std::uint64_t>(s.width);
  w.put<std::uint64_t>(s.height);
  w.put<std::uint64_t>(p.region_size);
  w.put<std::uint64_t>(p.patch_size);
  w.put<std::uint64_t>(s.patch_features.dim(2));
  w.put<std::uint64_t>(s.region_coords.size());
  for (std::size_t m = 0; m < s.region_coords.size(); ++m) {
    w.put<std::uint64_t>(s.region_coords[m].x);
    w.put<std::uint64_t>(s.region_coords[m].y);
    if (s.tissue[m].pct.size() != t) throw ShapeError("tissue vector length mismatch");
    w.put_doubles(s.tissue[m].pct);
  }
  w.put_doubles(s.patch_features.data());
  return w.bytes();
}

inline PreprocessedSlide deserialize_slide(std::string bytes, const std::string& source) {
  BinaryReader r(std::move(bytes), source);
  if (r.get_bytes(8) != std::string_view(kSlideMagic, 8))
    throw IoError(source + ": not a preprocessed slide (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kSlideVersion)
    throw IoError(source + ": unsupported slide container version " + std::to_string(version));
  PreprocessedSlide p;
  SlideSample& s = p.sample;
  s.slide_id = r.get_string();
  s.label = r.get<std::int32_t>();
  p.spacing_um = r.get<double>();
  s.width = r.get<std::uint64_t>();
  s.height = r.get<std::uint64_t>();
  p.region_size = r.get<std::uint64_t>();
  p.patch_size = r.get<std::uint64_t>();
  const auto f = r.get<std::uint64_t>();
  const auto m = r.get<std::uint64_t>();
  if (p.patch_size == 0 || p.region_size % p.patch_size != 0 || m == 0 || f == 0)
    throw IoError(source + ": inconsistent geometry");
  const std::size_t grid = p.region_size / p.patch_size;
  const std::size_t t = grid * grid;
  for (std::uint64_t i = 0; i < m; ++i) {
    RegionCoord c;
    c.x = r.get<std::uint64_t>();
    c.y = r.get<std::uint64_t>();
    s.region_coords.push_back(c);
    s.tissue.push_back({r.get_doubles(t)});
  }
  s.patch_features = Tensor({m, t, f}, r.get_doubles(m * t * f));
  if (!r.at_end()) throw IoError(source + ": trailing bytes after slide payload");
  return p;
}

inline void save_slide(const PreprocessedSlide& p, const std::string& path) {
  write_file(path, serialize_slide(p));
}

inline PreprocessedSlide load_slide(const std::string& path) {
  return deserialize_slide(read_file(path), path);
}

struct ManifestRecord {
  std::string id;
  int label = 0;
  std::string mask;   // relative to the manifest directory
  std::string stain;
  double spacing_um = 0.5;
};

inline std::string manifest_line(const ManifestRecord& r) {
  return nlohmann::json{{"id", r.id},
                        {"label", r.label},
                        {"mask", r.mask},
                        {"stain", r.stain},
                        {"spacing", r.spacing_um}}
      .dump();
}

inline std::vector<ManifestRecord> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestRecord r;
      j.at("id").get_to(r.id);
      j.at("label").get_to(r.label);
      j.at("mask").get_to(r.mask);
      j.at("stain").get_to(r.stain);
      j.at("spacing").get_to(r.spacing_um);
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    }
  }
  return out;
}

inline std::string spacing_sidecar_path(const std::string& mask_path) { return mask_path + ".txt"; }

inline void write_spacing_sidecar(const std::string& mask_path, double spacing_um) {
  std::ostringstream os;
  os << "spacing_um=" << nlohmann::json(spacing_um).dump() << "\n";
  write_file(spacing_sidecar_path(mask_path), os.str());
}

inline double read_spacing_sidecar(const std::string& mask_path) {
  const std::string text = read_file(spacing_sidecar_path(mask_path));
  const std::string key = "spacing_um=";
  if (text.rfind(key, 0) != 0) throw IoError(spacing_sidecar_path(mask_path) + ": expected spacing_um=<value>");
  try {
    return std::stod(text.substr(key.size()));
  } catch (const std::exception&) {
    throw IoError(spacing_sidecar_path(mask_path) + ": malformed spacing value");
  }
}

// 8-bit mask PNG plus spacing sidecar; multi-class values are binarized.
inline TissueMaskRaster read_mask(const std::string& path) {
  const GrayRaster gray = read_png_gray8(path);
  return TissueMaskRaster::from_gray(gray, read_spacing_sidecar(path));
}

inline void write_mask(const std::string& path, const TissueMaskRaster& mask) {
  write_png_gray8(path, mask.to_gray());
  write_spacing_sidecar(path, mask.spacing_um);
}

}  // namespace mhvit
