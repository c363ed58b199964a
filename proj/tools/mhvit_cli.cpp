// mhvit: synthesize data, preprocess, train, evaluate and render heatmaps.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or
// numeric failure.

#include <algorithm>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mhvit/app/commands.hpp"
#include "mhvit/app/config_file.hpp"

namespace {

using namespace mhvit;
using namespace mhvit::app;

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct CliState {
  SynthOptions synth;
  PreprocessOptions pre;
  TrainCommandOptions train;
  EvalOptions eval;
  HeatmapOptions heat;
  std::string masking_train = "both";
  std::string masking_eval = "both";
  std::string masking_heat = "both";
  std::string colormap = "hot";
  std::size_t regions_min = 2, regions_max = 3;
  bool constant_lr = false;
  std::string config;
};

void add_config_option(CLI::App* sub, CliState& s) {
  sub->add_option("--config", s.config,
                  "Flat key = value file; keys are flag names without dashes; flags win");
}

void setup(CLI::App& app, CliState& s) {
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Generate a synthetic slide corpus");
  add_config_option(synth, s);
  synth->add_option("--out-dir", s.synth.out_dir, "Output directory")->capture_default_str();
  synth->add_option("--n-slides", s.synth.n_slides, "Number of slides")->capture_default_str();
  synth->add_option("--seed", s.synth.seed, "Random seed")->capture_default_str();
  synth->add_option("--region-size", s.synth.spec.region_size, "Region side R in pixels")
      ->capture_default_str();
  synth->add_option("--patch-size", s.synth.spec.patch_size, "Patch side P in pixels")
      ->capture_default_str();
  synth->add_option("--regions-min", s.regions_min, "Minimum regions per axis")
      ->capture_default_str();
  synth->add_option("--regions-max", s.regions_max, "Maximum regions per axis")
      ->capture_default_str();
  synth->add_option("--distractor-strength", s.synth.spec.distractor_strength,
                    "Background stain slope over labels")
      ->capture_default_str();
  synth->add_option("--spacing", s.synth.spec.spacing_um, "Pixel spacing in micrometres")
      ->capture_default_str();

  auto* pre = app.add_subcommand("preprocess", "Tile slides and extract patch features");
  add_config_option(pre, s);
  pre->add_option("--manifest", s.pre.manifest, "Slide manifest (JSON Lines)")
      ->capture_default_str();
  pre->add_option("--out-dir", s.pre.out_dir, "Output directory")->capture_default_str();
  pre->add_option("--region-size", s.pre.tiling.region_size, "Region side R in pixels")
      ->capture_default_str();
  pre->add_option("--patch-size", s.pre.tiling.patch_size, "Patch side P in pixels")
      ->capture_default_str();
  pre->add_option("--min-tissue", s.pre.tiling.min_tissue, "Minimum region tissue fraction")
      ->capture_default_str();
  pre->add_option("--feature-dim", s.pre.feature_dim, "Patch feature dimension")
      ->capture_default_str();
  pre->add_option("--feature-seed", s.pre.feature_seed, "Feature encoder seed")
      ->capture_default_str();

  auto* train = app.add_subcommand("train", "Train per-fold models");
  add_config_option(train, s);
  train->add_option("--data-dir", s.train.data_dir, "Preprocessed data directory")
      ->capture_default_str();
  train->add_option("--out-dir", s.train.out_dir, "Checkpoint directory")->capture_default_str();
  train->add_option("--masking", s.masking_train, "Attention variant: on, off or both")
      ->check(CLI::IsMember({"on", "off", "both"}))
      ->capture_default_str();
  train->add_option("--folds", s.train.folds, "Number of folds")->capture_default_str();
  train->add_option("--fold", s.train.fold, "Train only this fold (-1 = all)")
      ->capture_default_str();
  train->add_option("--epochs", s.train.train.epochs, "Epochs per fold")->capture_default_str();
  train->add_option("--lr", s.train.train.lr, "Peak Adam learning rate")->capture_default_str();
  train->add_option("--grad-clip", s.train.train.grad_clip, "Global gradient norm clip (0 = off)")
      ->capture_default_str();
  train->add_flag("--constant-lr", s.constant_lr, "Disable cosine learning-rate decay");
  train->add_option("--seed", s.train.seed, "Split and initialization seed")
      ->capture_default_str();
  train->add_option("--embed-dim", s.train.model.embed_dim, "Embedding width")
      ->capture_default_str();
  train->add_option("--region-depth", s.train.model.region_depth, "Region transformer blocks")
      ->capture_default_str();
  train->add_option("--slide-depth", s.train.model.slide_depth, "Slide transformer blocks")
      ->capture_default_str();
  train->add_option("--heads", s.train.model.num_heads, "Attention heads")->capture_default_str();
  train->add_option("--mlp-ratio", s.train.model.mlp_ratio, "MLP expansion ratio")
      ->capture_default_str();
  train->add_flag("--resume", s.train.resume, "Continue from existing checkpoints");

  auto* eval = app.add_subcommand("eval", "Evaluate fold checkpoints and write the report");
  add_config_option(eval, s);
  eval->add_option("--data-dir", s.eval.data_dir, "Preprocessed data directory")
      ->capture_default_str();
  eval->add_option("--ckpt-dir", s.eval.ckpt_dir, "Checkpoint directory")->capture_default_str();
  eval->add_option("--out-dir", s.eval.out_dir, "Report directory")->capture_default_str();
  eval->add_option("--folds", s.eval.folds, "Number of folds")->capture_default_str();
  eval->add_option("--masking", s.masking_eval, "Attention variant: on, off or both")
      ->check(CLI::IsMember({"on", "off", "both"}))
      ->capture_default_str();

  auto* heat = app.add_subcommand("heatmap", "Render region and stitched attention heatmaps");
  add_config_option(heat, s);
  heat->add_option("--data-dir", s.heat.data_dir, "Preprocessed data directory")
      ->capture_default_str();
  heat->add_option("--checkpoint", s.heat.checkpoint, "Single checkpoint to render");
  heat->add_option("--ckpt-dir", s.heat.ckpt_dir, "Checkpoint directory (with --fold)");
  heat->add_option("--fold", s.heat.fold, "Fold whose checkpoints are rendered")
      ->capture_default_str();
  heat->add_option("--masking", s.masking_heat, "Variant from --ckpt-dir: on, off or both")
      ->check(CLI::IsMember({"on", "off", "both"}))
      ->capture_default_str();
  heat->add_option("--slide", s.heat.slide, "Render only this slide id");
  heat->add_option("--out-dir", s.heat.out_dir, "Image directory")->capture_default_str();
  heat->add_option("--downsample", s.heat.downsample, "Stitching downsample factor")
      ->capture_default_str();
  heat->add_option("--colormap", s.colormap, "hot or gray16")
      ->check(CLI::IsMember({"hot", "gray16"}))
      ->capture_default_str();
}

// Config entries become `--key=value` arguments placed before the user's own
// arguments; with TakeLast a flag given on the command line wins.
std::vector<std::string> expand_config(const CLI::App& app, std::vector<std::string> args) {
  auto sub_it = std::find_if(args.begin() + 1, args.end(), [&](const std::string& a) {
    return app.get_subcommand_no_throw(a) != nullptr;
  });
  if (sub_it == args.end()) return args;
  std::string path;
  for (auto it = sub_it + 1; it != args.end(); ++it) {
    if (*it == "--config" && it + 1 != args.end()) path = *(it + 1);
    if (it->rfind("--config=", 0) == 0) path = it->substr(9);
  }
  if (path.empty()) return args;

  const CLI::App* sub = app.get_subcommand_no_throw(*sub_it);
  std::vector<std::string> injected;
  for (const auto& [key, value] : read_flat_config(path)) {
    if (key == "config" || sub->get_option_no_throw("--" + key) == nullptr)
      throw ValidationError(path + ": unknown key '" + key + "' for " + sub->get_name());
    injected.push_back("--" + key + "=" + value);
  }
  args.insert(sub_it + 1, injected.begin(), injected.end());
  return args;
}

int run(CliState& s, const CLI::App& app) {
  auto& log = std::cerr;
  if (app.got_subcommand("synth")) {
    s.synth.spec.min_regions_x = s.synth.spec.min_regions_y = s.regions_min;
    s.synth.spec.max_regions_x = s.synth.spec.max_regions_y = s.regions_max;
    cmd_synth(s.synth, log);
  } else if (app.got_subcommand("preprocess")) {
    cmd_preprocess(s.pre, log);
  } else if (app.got_subcommand("train")) {
    s.train.variants = parse_variants(s.masking_train);
    s.train.train.cosine_decay = !s.constant_lr;
    const auto runs = cmd_train(s.train, log);
    std::cout << "variant fold step final_loss tune_kappa\n";
    for (const auto& r : runs)
      std::cout << variant_name(r.masking) << ' ' << r.fold << ' ' << r.step << ' '
                << r.final_loss << ' ' << r.tune_kappa << '\n';
  } else if (app.got_subcommand("eval")) {
    s.eval.variants = parse_variants(s.masking_eval);
    cmd_eval(s.eval, log);
  } else if (app.got_subcommand("heatmap")) {
    s.heat.variants = parse_variants(s.masking_heat);
    s.heat.colormap = parse_colormap(s.colormap);
    cmd_heatmap(s.heat, log);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked-attention hierarchical ViT: data, training, evaluation, heatmaps", "mhvit"};
  CliState state;
  setup(app, state);
  try {
    std::vector<std::string> args = expand_config(app, std::vector<std::string>(argv, argv + argc));
    std::vector<char*> cargs;
    for (auto& a : args) cargs.push_back(a.data());
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  } catch (const mhvit::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  try {
    return run(state, app);
  } catch (const mhvit::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
