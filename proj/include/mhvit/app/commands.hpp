#pragma once

// File-based commands behind the `mhvit` executable.
//
//   synth       manifest.jsonl + masks/<id>.png (+ .png.txt) + stain/<id>.png
//   preprocess  index.jsonl + slides/<id>.slide
//   train       fold<k>_<variant>.ckpt + fold<k>_<variant>.train.json
//   eval        report.json (deterministic) + report.txt (adds wall-clock)
//   heatmap     <id>_<variant>_r<m>.png, <id>_<variant>_stitched.png, sidecars

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhvit/app/experiment.hpp"
#include "mhvit/checkpoint.hpp"
#include "mhvit/eval/evaluate.hpp"
#include "mhvit/eval/heatmap.hpp"
#include "mhvit/pipeline/features.hpp"
#include "mhvit/pipeline/slide_io.hpp"
#include "mhvit/pipeline/synth.hpp"

namespace mhvit::app {

namespace fs = std::filesystem;

inline std::string variant_name(Masking m) { return m == Masking::on ? "masked" : "plain"; }

inline std::vector<Masking> parse_variants(const std::string& s) {
  if (s == "both") return {Masking::off, Masking::on};
  return {parse_masking(s)};
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  std::string out_dir = "data";
  std::size_t n_slides = 120;
  std::uint64_t seed = 0;
  SyntheticSlideSpec spec;
};

inline std::string cmd_synth(const SynthOptions& opt, std::ostream& log) {
  if (opt.n_slides == 0) throw ValidationError("synth: n_slides must be >= 1");
  opt.spec.validate();
  ensure_dir(opt.out_dir + "/masks");
  ensure_dir(opt.out_dir + "/stain");
  std::ostringstream manifest;
  for (std::size_t i = 0; i < opt.n_slides; ++i) {
    const SyntheticSlide slide = generate_synthetic_slide(opt.spec, opt.seed, i);
    ManifestRecord rec{slide.slide_id, slide.label, "masks/" + slide.slide_id + ".png",
                       "stain/" + slide.slide_id + ".png", slide.mask.spacing_um};
    write_mask(opt.out_dir + "/" + rec.mask, slide.mask);
    write_png_gray8(opt.out_dir + "/" + rec.stain, slide.stain);
    manifest << manifest_line(rec) << "\n";
  }
  const std::string path = opt.out_dir + "/manifest.jsonl";
  write_file(path, manifest.str());
  log << "synth: wrote " << opt.n_slides << " slides to " << opt.out_dir << "\n";
  return path;
}

// ---------------------------------------------------------------------------
// preprocess

struct PreprocessOptions {
  std::string manifest = "data/manifest.jsonl";
  std::string out_dir = "pre";
  TilingConfig tiling;
  std::size_t feature_dim = 16;
  std::uint64_t feature_seed = 1234;
};

struct PreprocessSummary {
  std::map<std::string, std::size_t> regions;  // written slides
  std::vector<std::string> skipped;            // every region discarded
};

inline PreprocessSummary cmd_preprocess(const PreprocessOptions& opt, std::ostream& log) {
  const auto records = read_manifest(opt.manifest);
  const fs::path base = fs::path(opt.manifest).parent_path();
  const PatchFeatureExtractor extractor(opt.feature_dim, opt.feature_seed);
  ensure_dir(opt.out_dir + "/slides");
  PreprocessSummary summary;
  std::ostringstream index;
  for (const auto& rec : records) {
    const TissueMaskRaster mask = read_mask((base / rec.mask).string());
    const GrayRaster stain = read_png_gray8((base / rec.stain).string());
    if (stain.width != mask.width || stain.height != mask.height)
      throw IoError(rec.id + ": stain and mask sizes differ");
    PreprocessedSlide p;
    p.sample = preprocess_slide(rec.id, rec.label, mask, stain, opt.tiling, extractor);
    p.spacing_um = mask.spacing_um;
    p.region_size = opt.tiling.region_size;
    p.patch_size = opt.tiling.patch_size;
    if (p.sample.region_coords.empty()) {
      log << "preprocess: warning: slide '" << rec.id
          << "' has no region with enough tissue; skipped\n";
      summary.skipped.push_back(rec.id);
      continue;
    }
    const std::string rel = "slides/" + rec.id + ".slide";
    save_slide(p, opt.out_dir + "/" + rel);
    index << nlohmann::json{{"id", rec.id},
                            {"label", rec.label},
                            {"file", rel},
                            {"regions", p.sample.num_regions()}}
                 .dump()
          << "\n";
    summary.regions[rec.id] = p.sample.num_regions();
  }
  write_file(opt.out_dir + "/index.jsonl", index.str());
  log << "preprocess: " << summary.regions.size() << " slides written, " << summary.skipped.size()
      << " skipped\n";
  return summary;
}

struct LoadedDataset {
  std::vector<SlideSample> slides;
  std::size_t region_size = 0;
  std::size_t patch_size = 0;
  std::size_t feature_dim = 0;
};

inline LoadedDataset load_dataset(const std::string& data_dir) {
  const std::string index_path = data_dir + "/index.jsonl";
  std::ifstream in(index_path);
  if (!in) throw IoError("cannot open " + index_path + " (run preprocess first)");
  LoadedDataset out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    PreprocessedSlide p = load_slide(data_dir + "/" + j.at("file").get<std::string>());
    if (out.slides.empty()) {
      out.region_size = p.region_size;
      out.patch_size = p.patch_size;
      out.feature_dim = p.sample.patch_features.dim(2);
    } else if (p.region_size != out.region_size || p.patch_size != out.patch_size ||
               p.sample.patch_features.dim(2) != out.feature_dim) {
      throw IoError(p.sample.slide_id + ": geometry differs from the rest of the dataset");
    }
    out.slides.push_back(std::move(p.sample));
  }
  if (out.slides.empty()) throw ValidationError(index_path + " lists no slides");
  return out;
}

// ---------------------------------------------------------------------------
// train

struct TrainCommandOptions {
  std::string data_dir = "pre";
  std::string out_dir = "ckpt";
  std::vector<Masking> variants{Masking::off, Masking::on};
  std::size_t folds = 5;
  int fold = -1;  // -1 = all folds
  std::uint64_t seed = 0;
  ModelConfig model;  // geometry fields are taken from the data
  TrainOptions train;
  bool resume = false;
};

inline std::string checkpoint_path(const std::string& dir, std::size_t fold, Masking m) {
  return dir + "/fold" + std::to_string(fold) + "_" + variant_name(m) + ".ckpt";
}

inline nlohmann::json train_options_json(const TrainOptions& t) {
  return {{"epochs", t.epochs}, {"lr", t.lr}, {"grad_clip", t.grad_clip},
          {"cosine_decay", t.cosine_decay}};
}

struct TrainRunSummary {
  std::size_t fold = 0;
  Masking masking = Masking::on;
  std::string checkpoint;
  std::uint64_t step = 0;
  double final_loss = 0.0;
  double tune_kappa = 0.0;
};

inline std::vector<TrainRunSummary> cmd_train(const TrainCommandOptions& opt, std::ostream& log) {
  if (opt.folds < 2) throw ValidationError("train: folds must be >= 2");
  if (opt.fold >= static_cast<int>(opt.folds) || opt.fold < -1)
    throw ValidationError("train: fold must be in [-1, folds)");
  if (!(opt.train.lr > 0.0)) throw ValidationError("train: lr must be > 0");
  const LoadedDataset data = load_dataset(opt.data_dir);
  ModelConfig config = opt.model;
  config.region_size = data.region_size;
  config.patch_size = data.patch_size;
  config.input_dim = data.feature_dim;
  config.seed = opt.seed;
  config.validate();
  ensure_dir(opt.out_dir);

  const auto splits = make_fold_splits(data.slides, opt.folds, opt.seed);
  std::vector<TrainRunSummary> out;
  for (Masking masking : opt.variants) {
    for (std::size_t f = 0; f < opt.folds; ++f) {
      if (opt.fold >= 0 && static_cast<std::size_t>(opt.fold) != f) continue;
      const std::string path = checkpoint_path(opt.out_dir, f, masking);
      std::unique_ptr<TrainingSession> session;
      if (opt.resume && fs::exists(path)) {
        session = load_checkpoint(path);
        log << "train: resumed " << path << " (masking=" << to_string(session->masking())
            << ", step " << session->step() << ")\n";
        if (session->masking() != masking)
          throw ValidationError(path + ": checkpoint masking does not match its file name");
      } else {
        session = std::make_unique<TrainingSession>(fold_model_config(config, f), masking);
      }
      const auto train_set = gather(data.slides, splits[f].train);
      const auto tune_set = gather(data.slides, splits[f].tune);
      std::vector<std::string> tune_ids;
      for (const auto& s : tune_set) tune_ids.push_back(s.slide_id);

      const auto history = session->fit(train_set, opt.train);
      const EvalResult tune = evaluate(session->model(), masking, tune_set);

      auto& meta = session->metadata();
      meta["fold"] = f;
      meta["folds"] = opt.folds;
      meta["split_seed"] = opt.seed;
      meta["tune_ids"] = tune_ids;
      meta["train_options"] = train_options_json(opt.train);
      save_checkpoint(*session, path);

      nlohmann::json fragment = {{"fold", f},
                                 {"variant", variant_name(masking)},
                                 {"masking", to_string(masking)},
                                 {"step", session->step()},
                                 {"tune_kappa", tune.kappa},
                                 {"epochs", nlohmann::json::array()}};
      for (const auto& e : history)
        fragment["epochs"].push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}});
      write_file(opt.out_dir + "/fold" + std::to_string(f) + "_" + variant_name(masking) +
                     ".train.json",
                 fragment.dump(2) + "\n");

      const double final_loss = history.empty() ? 0.0 : history.back().mean_loss;
      log << "train: " << variant_name(masking) << " fold " << f << ": loss " << final_loss
          << ", tune kappa " << tune.kappa << " -> " << path << "\n";
      out.push_back({f, masking, path, session->step(), final_loss, tune.kappa});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string data_dir = "pre";
  std::string ckpt_dir = "ckpt";
  std::string out_dir = "report";
  std::size_t folds = 5;
  std::vector<Masking> variants{Masking::off, Masking::on};
};

struct VariantReport {
  Masking masking = Masking::on;
  std::vector<double> kappas;
  std::vector<ConfusionMatrix> confusions;
  MeanStd summary;
};

struct ExperimentReport {
  nlohmann::json config;
  std::vector<VariantReport> variants;
  double wall_seconds = 0.0;
};

inline nlohmann::json report_json(const ExperimentReport& r) {
  nlohmann::json j = {{"format", "mhvit-report/1"}, {"config", r.config}};
  j["variants"] = nlohmann::json::array();
  for (const auto& v : r.variants) {
    nlohmann::json folds = nlohmann::json::array();
    for (std::size_t f = 0; f < v.kappas.size(); ++f) {
      nlohmann::json cm = nlohmann::json::array();
      for (int t = 0; t < v.confusions[f].num_classes; ++t) {
        nlohmann::json row = nlohmann::json::array();
        for (int p = 0; p < v.confusions[f].num_classes; ++p) row.push_back(v.confusions[f].at(t, p));
        cm.push_back(row);
      }
      folds.push_back({{"fold", f}, {"kappa", v.kappas[f]}, {"confusion", cm},
                       {"slides", v.confusions[f].total()}});
    }
    j["variants"].push_back({{"name", variant_name(v.masking)},
                             {"masking", to_string(v.masking)},
                             {"per_fold", folds},
                             {"mean_kappa", v.summary.mean},
                             {"std_kappa", v.summary.std}});
  }
  return j;
}

inline std::string report_text(const ExperimentReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  const std::size_t k = r.variants.empty() ? 0 : r.variants.front().kappas.size();
  os << "ISUP score regression, quadratic weighted kappa on the tune fold, " << k
     << "-fold cross-validation\n\n";
  os << std::left << std::setw(26) << "Attention mechanism" << "Tune kappa (mean ± std)\n";
  for (const auto& v : r.variants) {
    os << std::setw(26)
       << (v.masking == Masking::on ? "Masked self-attention" : "Plain self-attention")
       << v.summary.mean << " ± " << v.summary.std << "\n";
  }
  os << "\nPer fold:\n";
  for (const auto& v : r.variants) {
    os << "  " << std::setw(8) << variant_name(v.masking);
    for (double x : v.kappas) os << ' ' << x;
    os << "\n";
  }
  os << "\nWall-clock: " << std::setprecision(2) << r.wall_seconds << " s\n";
  os << "Config: " << r.config.dump() << "\n";
  return os.str();
}

inline ExperimentReport cmd_eval(const EvalOptions& opt, std::ostream& log) {
  const auto start = std::chrono::steady_clock::now();
  const LoadedDataset data = load_dataset(opt.data_dir);
  std::map<std::string, const SlideSample*> by_id;
  for (const auto& s : data.slides) by_id[s.slide_id] = &s;

  for (Masking m : opt.variants)
    for (std::size_t f = 0; f < opt.folds; ++f)
      if (!fs::exists(checkpoint_path(opt.ckpt_dir, f, m)))
        throw IoError("eval: missing checkpoint " + checkpoint_path(opt.ckpt_dir, f, m));

  ExperimentReport report;
  for (Masking m : opt.variants) {
    VariantReport v;
    v.masking = m;
    for (std::size_t f = 0; f < opt.folds; ++f) {
      const std::string path = checkpoint_path(opt.ckpt_dir, f, m);
      const auto session = load_checkpoint(path);
      if (session->masking() != m) throw ValidationError(path + ": masking flag mismatch");
      const auto& meta = session->metadata();
      if (report.config.is_null()) {
        report.config = {{"model", session->model().config()},
                         {"folds", opt.folds},
                         {"split_seed", meta.value("split_seed", std::uint64_t{0})},
                         {"train_options", meta.value("train_options", nlohmann::json::object())},
                         {"slides", data.slides.size()}};
        report.config["model"]["seed"] = report.config["split_seed"];
      }
      std::vector<SlideSample> tune;
      for (const auto& id : meta.at("tune_ids")) {
        auto it = by_id.find(id.get<std::string>());
        if (it == by_id.end()) throw IoError(path + ": tune slide '" + id.get<std::string>() + "' not in data");
        tune.push_back(*it->second);
      }
      const EvalResult r = evaluate(session->model(), m, tune);
      if (r.degenerate)
        log << "eval: warning: fold " << f << " has zero expected disagreement; kappa set to 1\n";
      log << "eval: loaded " << path << " (masking=" << to_string(session->masking())
          << ", step " << session->step() << "): kappa " << r.kappa << "\n";
      v.kappas.push_back(r.kappa);
      v.confusions.push_back(r.confusion);
    }
    v.summary = mean_std(v.kappas);
    report.variants.push_back(std::move(v));
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ensure_dir(opt.out_dir);
  write_file(opt.out_dir + "/report.json", report_json(report).dump(2) + "\n");
  write_file(opt.out_dir + "/report.txt", report_text(report));
  log << report_text(report);
  return report;
}

// ---------------------------------------------------------------------------
// heatmap

struct HeatmapOptions {
  std::string data_dir = "pre";
  std::string checkpoint;           // a single checkpoint, or
  std::string ckpt_dir;             // fold<k>_<variant>.ckpt under this directory
  std::size_t fold = 0;
  std::vector<Masking> variants{Masking::off, Masking::on};
  std::string out_dir = "heatmaps";
  std::string slide;  // empty = every slide in the data directory
  std::size_t downsample = 16;
  Colormap colormap = Colormap::hot;
};

struct HeatmapSlideSummary {
  std::string slide_id;
  Masking masking = Masking::on;
  std::vector<std::string> region_files;
  std::string stitched_file;
  HeatmapRaster stitched;
  std::size_t background_patches = 0;
  std::size_t background_zero_blocks = 0;       // background blocks painted exactly 0
  std::size_t background_attended_patches = 0;  // raw class-token weight > 0
};

inline std::vector<HeatmapSlideSummary> render_heatmaps(const TrainingSession& session,
                                                        const LoadedDataset& data,
                                                        const HeatmapOptions& opt,
                                                        std::ostream& log) {
  const Masking masking = session.masking();
  const auto& model = session.model();
  const std::size_t r = model.config().region_size, p = model.config().patch_size;
  if (data.region_size != r || data.patch_size != p)
    throw ValidationError("heatmap: checkpoint geometry does not match the data");

  std::vector<HeatmapSlideSummary> out;
  for (const auto& slide : data.slides) {
    if (!opt.slide.empty() && slide.slide_id != opt.slide) continue;
    std::vector<Tensor> attention;
    {
      NoGradGuard guard;
      model.forward(slide.patch_features, slide.tissue, masking, &attention);
    }
    const std::size_t layer = attention.size() - 1;
    const Tensor& weights = attention[layer];
    const std::string stem = opt.out_dir + "/" + slide.slide_id + "_" + variant_name(masking);
    const std::size_t grid = r / p;

    HeatmapSlideSummary sum;
    sum.slide_id = slide.slide_id;
    sum.masking = masking;
    std::vector<HeatmapRaster> rasters;
    for (std::size_t m = 0; m < slide.num_regions(); ++m) {
      const Tensor w = region_slice(weights, m);
      HeatmapRaster h = region_heatmap(w, slide.tissue[m], r, p, masking == Masking::on);
      h.provenance["layer"] = layer;
      h.provenance["slide"] = slide.slide_id;
      h.provenance["region"] = {{"x", slide.region_coords[m].x}, {"y", slide.region_coords[m].y}};
      const auto attn = class_token_attention(w);
      for (std::size_t j = 0; j < attn.size(); ++j) {
        if (slide.tissue[m].pct[j] != 0.0) continue;
        ++sum.background_patches;
        if (attn[j] > 0.0) ++sum.background_attended_patches;
        if (h.at((j % grid) * p, (j / grid) * p) == 0.0) ++sum.background_zero_blocks;
      }
      char suffix[32];
      std::snprintf(suffix, sizeof(suffix), "_r%02zu.png", m);
      const std::string file = stem + suffix;
      write_image(h, opt.colormap, file);
      sum.region_files.push_back(file);
      rasters.push_back(std::move(h));
    }
    sum.stitched =
        stitch_heatmaps(rasters, slide.region_coords, slide.width, slide.height, opt.downsample);
    sum.stitched.provenance["layer"] = layer;
    sum.stitched.provenance["masked"] = masking == Masking::on;
    sum.stitched.provenance["slide"] = slide.slide_id;
    sum.stitched_file = stem + "_stitched.png";
    write_image(sum.stitched, opt.colormap, sum.stitched_file);
    log << "heatmap: " << slide.slide_id << " (" << variant_name(masking) << "): "
        << rasters.size() << " regions, " << sum.background_patches << " background patches, "
        << sum.background_attended_patches << " attended\n";
    out.push_back(std::move(sum));
  }
  if (!opt.slide.empty() && out.empty())
    throw IoError("heatmap: slide '" + opt.slide + "' not found");
  return out;
}

// Left and right panels separated by a 1-pixel zero column.
inline HeatmapRaster side_by_side(const HeatmapRaster& left, const HeatmapRaster& right) {
  if (left.height != right.height) throw ShapeError("side_by_side: heights differ");
  HeatmapRaster out(left.width + 1 + right.width, left.height);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < left.width; ++x) out.at(x, y) = left.at(x, y);
    for (std::size_t x = 0; x < right.width; ++x) out.at(left.width + 1 + x, y) = right.at(x, y);
  }
  out.provenance = {{"kind", "pair"}, {"left", left.provenance}, {"right", right.provenance}};
  return out;
}

inline std::vector<HeatmapSlideSummary> cmd_heatmap(const HeatmapOptions& opt, std::ostream& log) {
  if (opt.downsample == 0) throw ValidationError("heatmap: downsample must be >= 1");
  std::vector<std::string> paths;
  if (!opt.checkpoint.empty()) {
    paths.push_back(opt.checkpoint);
  } else if (!opt.ckpt_dir.empty()) {
    for (Masking m : opt.variants) paths.push_back(checkpoint_path(opt.ckpt_dir, opt.fold, m));
  } else {
    throw ValidationError("heatmap: give --checkpoint or --ckpt-dir");
  }
  const LoadedDataset data = load_dataset(opt.data_dir);
  ensure_dir(opt.out_dir);

  std::vector<HeatmapSlideSummary> out;
  for (const auto& path : paths) {
    const auto session = load_checkpoint(path);
    log << "heatmap: loaded " << path << " (masking=" << to_string(session->masking()) << ")\n";
    auto part = render_heatmaps(*session, data, opt, log);
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }

  // Plain (left) next to masked (right) when both variants were rendered.
  for (const auto& a : out) {
    if (a.masking != Masking::off) continue;
    for (const auto& b : out) {
      if (b.masking != Masking::on || b.slide_id != a.slide_id) continue;
      write_image(side_by_side(a.stitched, b.stitched), opt.colormap,
                  opt.out_dir + "/" + a.slide_id + "_pair.png");
    }
  }
  return out;
}

}  // namespace mhvit::app
