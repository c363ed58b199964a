#pragma once

// Multi-head self-attention with tissue-percentage key masking.
//
// Sequences are laid out as (M, T+1, D): a class token at index 0 followed by
// T patch tokens. A patch whose tissue percentage is exactly 0 is masked as a
// key: its logit is set to -inf for every query and head before the softmax,
// so it receives exactly zero attention weight. The class-token column is
// never masked, which guarantees every softmax row has a finite entry.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mhvit/params.hpp"
#include "mhvit/tensor.hpp"

namespace mhvit {

inline constexpr double kLayerNormEps = 1e-6;

// Per-patch tissue fractions of one sequence (class token excluded).
struct AttentionMaskVector {
  std::vector<double> pct;

  bool has_tissue() const {
    for (double v : pct)
      if (v > 0.0) return true;
    return false;
  }
};

// Key mask of shape (M, 1, 1, T+1) built from per-sequence tissue vectors.
class KeyMask {
 public:
  static KeyMask from_tissue(std::span<const AttentionMaskVector> tissue,
                             std::size_t patch_tokens) {
    KeyMask km;
    const std::size_t cols = patch_tokens + 1;
    km.mask_.shape = {tissue.size(), 1, 1, cols};
    km.mask_.bits.assign(tissue.size() * cols, 0);
    for (std::size_t m = 0; m < tissue.size(); ++m) {
      const auto& pct = tissue[m].pct;
      if (pct.size() != patch_tokens) {
        throw ShapeError("tissue vector " + std::to_string(m) + " has length " +
                         std::to_string(pct.size()) + ", expected " +
                         std::to_string(patch_tokens));
      }
      bool any = false;
      for (std::size_t j = 0; j < patch_tokens; ++j) {
        if (!(pct[j] >= 0.0 && pct[j] <= 1.0)) {
          throw ValidationError("tissue fraction out of [0,1] in sequence " +
                                std::to_string(m));
        }
        if (pct[j] == 0.0) km.mask_.bits[m * cols + j + 1] = 1;
        any = any || pct[j] > 0.0;
      }
      if (!any) {
        throw ValidationError("sequence " + std::to_string(m) +
                              " is entirely background (all tissue fractions are 0)");
      }
    }
    return km;
  }

  const Mask& mask() const { return mask_; }
  std::size_t sequences() const { return mask_.shape[0]; }
  std::size_t columns() const { return mask_.shape[3]; }
  bool is_masked(std::size_t seq, std::size_t col) const {
    return mask_.bits[seq * columns() + col] != 0;
  }

 private:
  Mask mask_;
};

struct MhsaParams {
  Tensor qkv_weight;   // (D, 3D), columns ordered [q | k | v], heads contiguous
  Tensor qkv_bias;     // (3D)
  Tensor proj_weight;  // (D, D)
  Tensor proj_bias;    // (D)
  std::size_t num_heads = 1;

  std::size_t dim() const { return qkv_weight.dim(0); }
  std::size_t head_dim() const { return dim() / num_heads; }
  double scale() const { return 1.0 / std::sqrt(static_cast<double>(head_dim())); }

  static MhsaParams create(ParameterStore& store, const std::string& prefix,
                           std::size_t dim, std::size_t num_heads, Rng& rng) {
    if (num_heads == 0 || dim % num_heads != 0) {
      throw ValidationError("embed dim " + std::to_string(dim) +
                            " is not divisible by num_heads " +
                            std::to_string(num_heads));
    }
    MhsaParams p;
    p.num_heads = num_heads;
    p.qkv_weight = store.add(prefix + ".qkv.weight", xavier_tensor(dim, 3 * dim, rng));
    p.qkv_bias = store.add(prefix + ".qkv.bias", Tensor::zeros({3 * dim}));
    p.proj_weight = store.add(prefix + ".proj.weight", xavier_tensor(dim, dim, rng));
    p.proj_bias = store.add(prefix + ".proj.bias", Tensor::zeros({dim}));
    return p;
  }
};

struct TransformerBlockParams {
  Tensor norm1_gamma, norm1_beta;
  MhsaParams attn;
  Tensor norm2_gamma, norm2_beta;
  Tensor fc1_weight, fc1_bias;  // (D, hidden), (hidden)
  Tensor fc2_weight, fc2_bias;  // (hidden, D), (D)

  static TransformerBlockParams create(ParameterStore& store,
                                       const std::string& prefix,
                                       std::size_t dim, std::size_t num_heads,
                                       std::size_t mlp_ratio, Rng& rng) {
    TransformerBlockParams b;
    const std::size_t hidden = dim * mlp_ratio;
    b.norm1_gamma = store.add(prefix + ".norm1.weight", Tensor::full({dim}, 1.0));
    b.norm1_beta = store.add(prefix + ".norm1.bias", Tensor::zeros({dim}));
    b.attn = MhsaParams::create(store, prefix + ".attn", dim, num_heads, rng);
    b.norm2_gamma = store.add(prefix + ".norm2.weight", Tensor::full({dim}, 1.0));
    b.norm2_beta = store.add(prefix + ".norm2.bias", Tensor::zeros({dim}));
    b.fc1_weight = store.add(prefix + ".mlp.fc1.weight", xavier_tensor(dim, hidden, rng));
    b.fc1_bias = store.add(prefix + ".mlp.fc1.bias", Tensor::zeros({hidden}));
    b.fc2_weight = store.add(prefix + ".mlp.fc2.weight", xavier_tensor(hidden, dim, rng));
    b.fc2_bias = store.add(prefix + ".mlp.fc2.bias", Tensor::zeros({dim}));
    return b;
  }
};

namespace detail {

// Shared path of masked and plain attention. `weights_out`, when given,
// receives the post-softmax attention of shape (M, heads, T', T').
inline Tensor attention_impl(const Tensor& x, const KeyMask* key_mask,
                             const MhsaParams& p, Tensor* weights_out) {
  if (x.ndim() != 3 || x.dim(2) != p.dim()) {
    throw ShapeError("attention input " + shape_str(x.shape()) +
                     " does not match embed dim " + std::to_string(p.dim()));
  }
  const std::size_t m = x.dim(0), t = x.dim(1), d = x.dim(2);
  const std::size_t h = p.num_heads, hd = p.head_dim();
  if (key_mask && (key_mask->sequences() != m || key_mask->columns() != t)) {
    throw ShapeError("key mask covers " + std::to_string(key_mask->sequences()) +
                     " sequences of " + std::to_string(key_mask->columns()) +
                     " tokens, input is " + shape_str(x.shape()));
  }

  const Tensor qkv = linear(x, p.qkv_weight, p.qkv_bias);  // (M, T', 3D)
  auto heads = [&](std::size_t offset) {
    return permute(reshape(slice_lastdim(qkv, offset, d), {m, t, h, hd}),
                   {0, 2, 1, 3});  // (M, H, T', hd)
  };
  const Tensor q = heads(0);
  const Tensor k = heads(d);
  const Tensor v = heads(2 * d);

  Tensor logits = scale(matmul(q, transpose_last2(k)), p.scale());
  if (key_mask) {
    logits = masked_fill(logits, key_mask->mask(),
                         -std::numeric_limits<double>::infinity());
  }
  const Tensor attn = softmax_lastdim(logits);
  if (weights_out) *weights_out = attn;

  const Tensor mixed = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {m, t, d});
  return linear(mixed, p.proj_weight, p.proj_bias);
}

}  // namespace detail

inline Tensor masked_mhsa(const Tensor& x, const KeyMask& key_mask,
                          const MhsaParams& params, Tensor* weights_out = nullptr) {
  return detail::attention_impl(x, &key_mask, params, weights_out);
}

inline Tensor plain_mhsa(const Tensor& x, const MhsaParams& params,
                         Tensor* weights_out = nullptr) {
  return detail::attention_impl(x, nullptr, params, weights_out);
}

// Pre-norm residual block: x + MHSA(LN(x)), then x + MLP(LN(x)).
// A null key_mask selects plain attention.
inline Tensor transformer_block(const Tensor& x, const KeyMask* key_mask,
                                const TransformerBlockParams& p,
                                Tensor* weights_out = nullptr) {
  const Tensor a = detail::attention_impl(
      layer_norm(x, p.norm1_gamma, p.norm1_beta, kLayerNormEps), key_mask,
      p.attn, weights_out);
  const Tensor h = add(x, a);
  const Tensor f = linear(
      gelu(linear(layer_norm(h, p.norm2_gamma, p.norm2_beta, kLayerNormEps),
                  p.fc1_weight, p.fc1_bias)),
      p.fc2_weight, p.fc2_bias);
  return add(h, f);
}

// Post-softmax attention (M, heads, T', T') of block `layer` after running
// blocks [0, layer] on x.
inline Tensor attention_weights(const Tensor& x, const KeyMask* key_mask,
                                std::span<const TransformerBlockParams> blocks,
                                std::size_t layer) {
  if (layer >= blocks.size()) {
    throw ValidationError("layer index " + std::to_string(layer) +
                          " out of range for " + std::to_string(blocks.size()) +
                          " blocks");
  }
  Tensor h = x;
  Tensor weights;
  for (std::size_t i = 0; i <= layer; ++i)
    h = transformer_block(h, key_mask, blocks[i], i == layer ? &weights : nullptr);
  return weights;
}

}  // namespace mhvit
