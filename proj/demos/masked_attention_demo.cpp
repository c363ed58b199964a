// Class-token attention of an untrained model on one synthetic slide, with
// and without background masking, and the slide score under both variants.

#include <cstdio>

#include "mhvit.hpp"

int main() {
  using namespace mhvit;
  SyntheticSlideSpec spec;
  spec.region_size = 256;
  spec.patch_size = 64;
  const SyntheticSlide raw = generate_synthetic_slide(spec, 7, 3);
  const SlideSample slide = preprocess_synthetic(raw, spec);

  ModelConfig config;
  config.region_size = spec.region_size;
  config.patch_size = spec.patch_size;
  config.input_dim = spec.feature_dim;
  config.embed_dim = 32;
  config.seed = 11;
  const HierarchicalViT model(config);

  std::printf("%s: %zu regions, label %d\n", slide.slide_id.c_str(), slide.num_regions(),
              slide.label);
  for (Masking m : {Masking::off, Masking::on}) {
    NoGradGuard guard;
    std::vector<Tensor> attention;
    const double logit = model.forward(slide.patch_features, slide.tissue, m, &attention).item();
    const auto attn = class_token_attention(region_slice(attention.back(), 0));
    std::printf("\n%s attention, region 0 (tissue fraction / class-token weight):\n",
                m == Masking::on ? "masked" : "plain");
    const std::size_t grid = config.grid();
    for (std::size_t r = 0; r < grid; ++r) {
      for (std::size_t c = 0; c < grid; ++c) {
        const std::size_t j = r * grid + c;
        std::printf("  %.2f/%.4f", slide.tissue[0].pct[j], attn[j]);
      }
      std::printf("\n");
    }
    std::printf("slide logit %.6f -> ISUP %d\n", logit, predict_isup(logit).score);
  }
  return 0;
}
