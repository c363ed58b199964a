#pragma once

// Three-scale hierarchical Vision Transformer.
//
//   patch features (M, T, F_in)
//     -> embed_patches  -> (M, T, D)
//     -> region_forward -> (M, D)   class token + positional embeddings,
//                                   key-masked blocks when masking is on
//     -> slide_forward  -> (D)      class token, unmasked blocks, no
//                                   positional embeddings
//     -> head           -> scalar ISUP regression logit

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhvit/attention.hpp"
#include "mhvit/params.hpp"
#include "mhvit/tensor.hpp"

namespace mhvit {

inline constexpr int kNumIsupClasses = 6;

enum class Masking { off, on };

inline std::string to_string(Masking m) { return m == Masking::on ? "on" : "off"; }

inline Masking parse_masking(const std::string& s) {
  if (s == "on") return Masking::on;
  if (s == "off") return Masking::off;
  throw ValidationError("masking must be 'on' or 'off', got '" + s + "'");
}

struct ModelConfig {
  std::size_t region_size = 1024;
  std::size_t patch_size = 256;
  std::size_t input_dim = 16;
  std::size_t embed_dim = 64;
  std::size_t region_depth = 2;
  std::size_t slide_depth = 2;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  std::uint64_t seed = 0;

  std::size_t grid() const { return region_size / patch_size; }
  std::size_t tokens_per_region() const { return grid() * grid(); }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ValidationError("model config: " + msg); };
    if (region_size == 0 || patch_size == 0) fail("region_size and patch_size must be positive");
    if (region_size % patch_size != 0) fail("region_size must be a multiple of patch_size");
    if (input_dim == 0 || embed_dim == 0) fail("input_dim and embed_dim must be positive");
    if (num_heads == 0 || embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
    if (region_depth == 0 || slide_depth == 0) fail("depths must be at least 1");
    if (mlp_ratio == 0) fail("mlp_ratio must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"region_size", c.region_size}, {"patch_size", c.patch_size},
                     {"input_dim", c.input_dim},     {"embed_dim", c.embed_dim},
                     {"region_depth", c.region_depth}, {"slide_depth", c.slide_depth},
                     {"num_heads", c.num_heads},     {"mlp_ratio", c.mlp_ratio},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("region_size").get_to(c.region_size);
  j.at("patch_size").get_to(c.patch_size);
  j.at("input_dim").get_to(c.input_dim);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("region_depth").get_to(c.region_depth);
  j.at("slide_depth").get_to(c.slide_depth);
  j.at("num_heads").get_to(c.num_heads);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  j.at("seed").get_to(c.seed);
}

struct RegionCoord {
  std::size_t x = 0;
  std::size_t y = 0;
  bool operator==(const RegionCoord&) const = default;
};

// One slide after preprocessing.
struct SlideSample {
  std::string slide_id;
  std::vector<RegionCoord> region_coords;
  Tensor patch_features;  // (M, T, F_in)
  std::vector<AttentionMaskVector> tissue;  // M vectors of length T
  int label = 0;          // ISUP score 0..5
  std::size_t width = 0;  // slide raster size in pixels
  std::size_t height = 0;

  std::size_t num_regions() const { return region_coords.size(); }

  void validate(const ModelConfig& config) const {
    const std::string where = "slide '" + slide_id + "': ";
    if (region_coords.empty()) throw ValidationError(where + "no regions");
    if (label < 0 || label >= kNumIsupClasses)
      throw ValidationError(where + "label " + std::to_string(label) + " out of range");
    if (tissue.size() != region_coords.size())
      throw ShapeError(where + "tissue vector count does not match region count");
    if (!patch_features.defined() || patch_features.ndim() != 3 ||
        patch_features.dim(0) != region_coords.size() ||
        patch_features.dim(1) != config.tokens_per_region() ||
        patch_features.dim(2) != config.input_dim) {
      throw ShapeError(where + "patch features " +
                       (patch_features.defined() ? shape_str(patch_features.shape())
                                                 : std::string("undefined")) +
                       " do not match (M, " + std::to_string(config.tokens_per_region()) +
                       ", " + std::to_string(config.input_dim) + ")");
    }
  }
};

struct IsupPrediction {
  double logit = 0.0;
  int score = 0;
};

// Round half away from zero, then clamp to 0..5.
inline IsupPrediction predict_isup(double logit) {
  if (std::isnan(logit)) throw NumericError("predict_isup: logit is NaN");
  const double r = std::clamp(std::round(logit), 0.0,
                              static_cast<double>(kNumIsupClasses - 1));
  return {logit, static_cast<int>(r)};
}

inline Tensor mse_loss(const Tensor& logit, int label) {
  if (label < 0 || label >= kNumIsupClasses) {
    throw ValidationError("mse_loss: label " + std::to_string(label) +
                          " outside 0.." + std::to_string(kNumIsupClasses - 1));
  }
  return sum(square(sub(logit, Tensor::scalar(static_cast<double>(label)))));
}

class HierarchicalViT {
 public:
  explicit HierarchicalViT(const ModelConfig& config) : config_(config) {
    config_.validate();
    Rng rng(RngSeed{config_.seed});
    const std::size_t d = config_.embed_dim;
    const std::size_t t = config_.tokens_per_region();

    embed_weight_ = params_.add("embed.weight", xavier_tensor(config_.input_dim, d, rng));
    embed_bias_ = params_.add("embed.bias", Tensor::zeros({d}));

    region_cls_ = params_.add("region.cls_token", normal_tensor({d}, 0.02, rng));
    region_pos_ = params_.add("region.pos_embed", normal_tensor({t + 1, d}, 0.02, rng));
    for (std::size_t i = 0; i < config_.region_depth; ++i) {
      region_blocks_.push_back(TransformerBlockParams::create(
          params_, "region.block" + std::to_string(i), d, config_.num_heads,
          config_.mlp_ratio, rng));
    }
    region_norm_gamma_ = params_.add("region.norm.weight", Tensor::full({d}, 1.0));
    region_norm_beta_ = params_.add("region.norm.bias", Tensor::zeros({d}));

    slide_cls_ = params_.add("slide.cls_token", normal_tensor({d}, 0.02, rng));
    for (std::size_t i = 0; i < config_.slide_depth; ++i) {
      slide_blocks_.push_back(TransformerBlockParams::create(
          params_, "slide.block" + std::to_string(i), d, config_.num_heads,
          config_.mlp_ratio, rng));
    }
    slide_norm_gamma_ = params_.add("slide.norm.weight", Tensor::full({d}, 1.0));
    slide_norm_beta_ = params_.add("slide.norm.bias", Tensor::zeros({d}));

    head_weight_ = params_.add("head.weight", xavier_tensor(d, 1, rng));
    // Start at the middle of the 0..5 score range.
    head_bias_ = params_.add("head.bias", Tensor::full({1}, 2.5));
  }

  // Tensors are shared handles; a copied model would alias its parameters.
  HierarchicalViT(const HierarchicalViT&) = delete;
  HierarchicalViT& operator=(const HierarchicalViT&) = delete;
  HierarchicalViT(HierarchicalViT&&) = default;
  HierarchicalViT& operator=(HierarchicalViT&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }
  std::span<const TransformerBlockParams> region_blocks() const { return region_blocks_; }
  std::span<const TransformerBlockParams> slide_blocks() const { return slide_blocks_; }

  // (M, T, F_in) -> (M, T, D)
  Tensor embed_patches(const Tensor& raw) const {
    if (raw.ndim() != 3 || raw.dim(1) != config_.tokens_per_region() ||
        raw.dim(2) != config_.input_dim) {
      throw ShapeError("embed_patches: input " + shape_str(raw.shape()) +
                       " does not match (M, " + std::to_string(config_.tokens_per_region()) +
                       ", " + std::to_string(config_.input_dim) + ")");
    }
    return linear(raw, embed_weight_, embed_bias_);
  }

  // (M, T, D) -> (M, D). `attention_out`, when given, receives the
  // post-softmax attention (M, heads, T+1, T+1) of every region block.
  Tensor region_forward(const Tensor& features,
                        std::span<const AttentionMaskVector> tissue, Masking masking,
                        std::vector<Tensor>* attention_out = nullptr) const {
    const std::size_t t = config_.tokens_per_region();
    if (features.ndim() != 3 || features.dim(1) != t ||
        features.dim(2) != config_.embed_dim) {
      throw ShapeError("region_forward: features " + shape_str(features.shape()) +
                       " do not match (M, " + std::to_string(t) + ", " +
                       std::to_string(config_.embed_dim) + ")");
    }
    if (tissue.size() != features.dim(0)) {
      throw ShapeError("region_forward: " + std::to_string(tissue.size()) +
                       " tissue vectors for " + std::to_string(features.dim(0)) +
                       " regions");
    }
    std::optional<KeyMask> key_mask;
    if (masking == Masking::on) key_mask = KeyMask::from_tissue(tissue, t);

    Tensor x = add(prepend_token(features, region_cls_), region_pos_);
    if (attention_out) attention_out->clear();
    for (const auto& block : region_blocks_) {
      Tensor weights;
      x = transformer_block(x, key_mask ? &*key_mask : nullptr, block,
                            attention_out ? &weights : nullptr);
      if (attention_out) attention_out->push_back(weights);
    }
    x = layer_norm(x, region_norm_gamma_, region_norm_beta_, kLayerNormEps);
    return select_token(x, 0);
  }

  // (M, D) -> (D)
  Tensor slide_forward(const Tensor& region_tokens) const {
    if (region_tokens.ndim() != 2 || region_tokens.dim(1) != config_.embed_dim) {
      throw ShapeError("slide_forward: region tokens " + shape_str(region_tokens.shape()));
    }
    const std::size_t m = region_tokens.dim(0);
    Tensor x = prepend_token(reshape(region_tokens, {1, m, config_.embed_dim}), slide_cls_);
    for (const auto& block : slide_blocks_) x = transformer_block(x, nullptr, block);
    x = layer_norm(x, slide_norm_gamma_, slide_norm_beta_, kLayerNormEps);
    return reshape(select_token(x, 0), {config_.embed_dim});
  }

  // (D) -> (1)
  Tensor head(const Tensor& slide_embedding) const {
    return reshape(linear(reshape(slide_embedding, {1, config_.embed_dim}),
                          head_weight_, head_bias_),
                   {1});
  }

  Tensor forward(const Tensor& raw_features, std::span<const AttentionMaskVector> tissue,
                 Masking masking, std::vector<Tensor>* attention_out = nullptr) const {
    return head(slide_forward(
        region_forward(embed_patches(raw_features), tissue, masking, attention_out)));
  }

  Tensor forward(const SlideSample& slide, Masking masking) const {
    if (slide.region_coords.empty())
      throw ValidationError("slide '" + slide.slide_id + "' has no regions");
    return forward(slide.patch_features, slide.tissue, masking);
  }

  IsupPrediction predict(const SlideSample& slide, Masking masking) const {
    NoGradGuard guard;
    return predict_isup(forward(slide, masking).item());
  }

 private:
  ModelConfig config_;
  ParameterStore params_;
  Tensor embed_weight_, embed_bias_;
  Tensor region_cls_, region_pos_;
  std::vector<TransformerBlockParams> region_blocks_;
  Tensor region_norm_gamma_, region_norm_beta_;
  Tensor slide_cls_;
  std::vector<TransformerBlockParams> slide_blocks_;
  Tensor slide_norm_gamma_, slide_norm_beta_;
  Tensor head_weight_, head_bias_;
};

}  // namespace mhvit
