#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "mhvit/attention.hpp"
#include "mhvit/optim.hpp"

using namespace mhvit;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  Rng rng(RngSeed{seed});
  return normal_tensor(std::move(shape), stddev, rng);
}

// Randomizes biases too, so that no test passes because a bias happens to be 0.
MhsaParams random_mhsa(ParameterStore& store, std::size_t d, std::size_t heads, std::uint64_t seed) {
  Rng rng(RngSeed{seed});
  MhsaParams p = MhsaParams::create(store, "attn", d, heads, rng);
  for (double& v : p.qkv_bias.mutable_data()) v = rng.normal(0.0, 0.3);
  for (double& v : p.proj_bias.mutable_data()) v = rng.normal(0.0, 0.3);
  return p;
}

// Straight loops over sequences, heads, queries and keys. Masked keys are
// skipped outright rather than filled with -inf.
struct NaiveAttention {
  std::vector<double> out;      // (M, T', D)
  std::vector<double> weights;  // (M, H, T', T')
};

NaiveAttention naive_attention(const Tensor& x, const MhsaParams& p,
                               const std::vector<std::vector<bool>>* masked) {
  const std::size_t m = x.dim(0), t = x.dim(1), d = x.dim(2);
  const std::size_t h = p.num_heads, hd = d / h;
  const auto w = p.qkv_weight.data();
  const auto b = p.qkv_bias.data();
  std::vector<double> qkv(m * t * 3 * d);
  for (std::size_t s = 0; s < m * t; ++s)
    for (std::size_t o = 0; o < 3 * d; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < d; ++i) acc += x[s * d + i] * w[i * 3 * d + o];
      qkv[s * 3 * d + o] = acc;
    }
  NaiveAttention r;
  r.weights.assign(m * h * t * t, 0.0);
  std::vector<double> mixed(m * t * d, 0.0);
  for (std::size_t s = 0; s < m; ++s)
    for (std::size_t hh = 0; hh < h; ++hh)
      for (std::size_t i = 0; i < t; ++i) {
        std::vector<double> logit(t, 0.0);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < t; ++j) {
          if (masked && (*masked)[s][j]) continue;
          double dot = 0.0;
          for (std::size_t c = 0; c < hd; ++c)
            dot += qkv[(s * t + i) * 3 * d + hh * hd + c] * qkv[(s * t + j) * 3 * d + d + hh * hd + c];
          logit[j] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, logit[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < t; ++j)
          if (!(masked && (*masked)[s][j])) z += std::exp(logit[j] - mx);
        for (std::size_t j = 0; j < t; ++j) {
          if (masked && (*masked)[s][j]) continue;
          const double a = std::exp(logit[j] - mx) / z;
          r.weights[((s * h + hh) * t + i) * t + j] = a;
          for (std::size_t c = 0; c < hd; ++c)
            mixed[(s * t + i) * d + hh * hd + c] += a * qkv[(s * t + j) * 3 * d + 2 * d + hh * hd + c];
        }
      }
  const auto pw = p.proj_weight.data();
  const auto pb = p.proj_bias.data();
  r.out.assign(m * t * d, 0.0);
  for (std::size_t s = 0; s < m * t; ++s)
    for (std::size_t o = 0; o < d; ++o) {
      double acc = pb[o];
      for (std::size_t i = 0; i < d; ++i) acc += mixed[s * d + i] * pw[i * d + o];
      r.out[s * d + o] = acc;
    }
  return r;
}

}  // namespace

TEST(KeyMask, MarksExactlyZeroTissueColumns) {
  std::vector<AttentionMaskVector> tissue{{{1.0, 0.0, 0.5, 1e-300}}};
  const KeyMask km = KeyMask::from_tissue(tissue, 4);
  EXPECT_EQ(km.columns(), 5u);
  EXPECT_FALSE(km.is_masked(0, 0));  // class token
  EXPECT_FALSE(km.is_masked(0, 1));
  EXPECT_TRUE(km.is_masked(0, 2));
  EXPECT_FALSE(km.is_masked(0, 3));
  EXPECT_FALSE(km.is_masked(0, 4));  // any positive fraction counts as tissue
}

TEST(KeyMask, RejectsBadVectors) {
  std::vector<AttentionMaskVector> short_vec{{{1.0}}};
  EXPECT_THROW(KeyMask::from_tissue(short_vec, 2), ShapeError);
  std::vector<AttentionMaskVector> out_of_range{{{1.5, 0.0}}};
  EXPECT_THROW(KeyMask::from_tissue(out_of_range, 2), ValidationError);
  std::vector<AttentionMaskVector> all_background{{{0.0, 0.0}}};
  EXPECT_THROW(KeyMask::from_tissue(all_background, 2), ValidationError);
}

TEST(MaskedMhsa, AllTissueEqualsPlain) {
  ParameterStore store;
  const MhsaParams p = random_mhsa(store, 8, 2, 1);
  const Tensor x = random_tensor({2, 5, 8}, 2);
  std::vector<AttentionMaskVector> tissue(2, AttentionMaskVector{{1, 1, 1, 1}});
  const KeyMask km = KeyMask::from_tissue(tissue, 4);
  EXPECT_EQ(values(masked_mhsa(x, km, p)), values(plain_mhsa(x, p)));
}

TEST(MaskedMhsa, MaskedColumnGetsZeroWeight) {
  ParameterStore store;
  const MhsaParams p = random_mhsa(store, 8, 2, 3);
  const Tensor x = random_tensor({1, 5, 8}, 4);
  std::vector<AttentionMaskVector> tissue{{{1, 0, 1, 1}}};
  const KeyMask km = KeyMask::from_tissue(tissue, 4);
  Tensor w;
  masked_mhsa(x, km, p, &w);
  ASSERT_EQ(w.shape(), (Shape{1, 2, 5, 5}));
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_EQ(w[(h * 5 + i) * 5 + 2], 0.0);
      double s = 0.0;
      for (std::size_t j = 0; j < 5; ++j) s += w[(h * 5 + i) * 5 + j];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(MaskedMhsa, HandEvaluatedSingleHead) {
  // D = 1, one head, identity projections, tokens [cls, p1, p2] = [0, 1, 2]
  // with p2 masked. Logits are x_i * x_j over the two unmasked keys.
  MhsaParams p;
  p.num_heads = 1;
  p.qkv_weight = Tensor({1, 3}, {1, 1, 1});
  p.qkv_bias = Tensor::zeros({3});
  p.proj_weight = Tensor({1, 1}, {1});
  p.proj_bias = Tensor::zeros({1});
  std::vector<AttentionMaskVector> tissue{{{0.5, 0.0}}};
  const KeyMask km = KeyMask::from_tissue(tissue, 2);
  Tensor w;
  const Tensor y = masked_mhsa(Tensor({1, 3, 1}, {0, 1, 2}), km, p, &w);
  const double e = std::exp(1.0), e2 = std::exp(2.0);
  EXPECT_NEAR(y[0], 0.5, 1e-15);
  EXPECT_NEAR(y[1], e / (1 + e), 1e-15);
  EXPECT_NEAR(y[2], e2 / (1 + e2), 1e-15);
  EXPECT_EQ(w[2], 0.0);
  EXPECT_EQ(w[5], 0.0);
  EXPECT_EQ(w[8], 0.0);
}

TEST(MaskedMhsa, MatchesNaiveOracle) {
  ParameterStore store;
  const MhsaParams p = random_mhsa(store, 6, 3, 5);
  const Tensor x = random_tensor({3, 5, 6}, 6);
  std::vector<AttentionMaskVector> tissue{{{1, 0, 0.2, 0}}, {{0, 0, 0, 0.7}}, {{1, 1, 1, 1}}};
  const KeyMask km = KeyMask::from_tissue(tissue, 4);
  std::vector<std::vector<bool>> masked(3, std::vector<bool>(5, false));
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t j = 0; j < 4; ++j) masked[s][j + 1] = tissue[s].pct[j] == 0.0;
  Tensor w;
  const Tensor y = masked_mhsa(x, km, p, &w);
  const NaiveAttention ref = naive_attention(x, p, &masked);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref.out[i], 1e-12);
  for (std::size_t i = 0; i < w.numel(); ++i) EXPECT_NEAR(w[i], ref.weights[i], 1e-12);
}

TEST(PlainMhsa, SingleTokenIsProjectionOfValue) {
  ParameterStore store;
  const MhsaParams p = random_mhsa(store, 4, 2, 7);
  const Tensor x = random_tensor({1, 1, 4}, 8);
  const Tensor y = plain_mhsa(x, p);
  const Tensor v = add(matmul(x, slice_lastdim(p.qkv_weight, 8, 4)), slice_lastdim(reshape(p.qkv_bias, {1, 12}), 8, 4));
  const Tensor ref = linear(v, p.proj_weight, p.proj_bias);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], ref[i], 1e-14);
}

TEST(PlainMhsa, TwoHeadsMatchBruteForce) {
  ParameterStore store;
  const MhsaParams p = random_mhsa(store, 4, 2, 9);
  const Tensor x = random_tensor({1, 3, 4}, 10);
  const Tensor y = plain_mhsa(x, p);
  const NaiveAttention ref = naive_attention(x, p, nullptr);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref.out[i], 1e-12);
}

TEST(PlainMhsa, RejectsWrongEmbedDim) {
  ParameterStore store;
  const MhsaParams p = random_mhsa(store, 4, 2, 9);
  EXPECT_THROW(plain_mhsa(Tensor::zeros({1, 3, 5}), p), ShapeError);
  ParameterStore store2;
  Rng rng(RngSeed{1});
  EXPECT_THROW(MhsaParams::create(store2, "a", 6, 4, rng), ValidationError);
}

TEST(TransformerBlock, ZeroProjectionsGiveIdentity) {
  ParameterStore store;
  Rng rng(RngSeed{11});
  auto b = TransformerBlockParams::create(store, "blk", 8, 2, 4, rng);
  for (double& v : b.attn.proj_weight.mutable_data()) v = 0.0;
  for (double& v : b.fc2_weight.mutable_data()) v = 0.0;
  const Tensor x = random_tensor({2, 4, 8}, 12);
  EXPECT_EQ(values(transformer_block(x, nullptr, b)), values(x));
}

class BlockGradient : public ::testing::TestWithParam<bool> {};

TEST_P(BlockGradient, MatchesFiniteDifferences) {
  ParameterStore store;
  Rng rng(RngSeed{13});
  auto b = TransformerBlockParams::create(store, "blk", 4, 2, 2, rng);
  for (auto& prm : store.items())
    for (double& v : prm.tensor.mutable_data()) v += rng.normal(0.0, 0.1);
  Tensor x = random_tensor({2, 4, 4}, 14);
  x.set_requires_grad(true);
  std::vector<AttentionMaskVector> tissue{{{1, 0, 0.5}}, {{0, 0.3, 0}}};
  const KeyMask km = KeyMask::from_tissue(tissue, 3);
  const KeyMask* mask = GetParam() ? &km : nullptr;
  const Tensor probe = random_tensor({2, 4, 4}, 15);
  std::vector<Tensor> ps{x};
  for (auto& prm : store.items()) ps.push_back(prm.tensor);
  const double err =
      grad_check([&] { return sum(mul(transformer_block(x, mask, b), probe)); }, ps, 1e-5);
  EXPECT_LT(err, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Masking, BlockGradient, ::testing::Values(false, true));

TEST(AttentionWeights, MaskedColumnsExactlyZeroAndRowsNormalized) {
  ParameterStore store;
  Rng rng(RngSeed{16});
  std::vector<TransformerBlockParams> blocks;
  for (int i = 0; i < 2; ++i)
    blocks.push_back(TransformerBlockParams::create(store, "b" + std::to_string(i), 8, 4, 2, rng));
  const Tensor x = random_tensor({2, 5, 8}, 17);
  std::vector<AttentionMaskVector> tissue{{{0, 1, 0, 1}}, {{0.1, 0, 0, 0}}};
  const KeyMask km = KeyMask::from_tissue(tissue, 4);
  const Tensor w = attention_weights(x, &km, blocks, 1);
  ASSERT_EQ(w.shape(), (Shape{2, 4, 5, 5}));
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t h = 0; h < 4; ++h)
      for (std::size_t i = 0; i < 5; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
          const double a = w[((s * 4 + h) * 5 + i) * 5 + j];
          if (km.is_masked(s, j)) {
            EXPECT_EQ(a, 0.0);
          }
          total += a;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
      }
  EXPECT_THROW(attention_weights(x, &km, blocks, 2), ValidationError);
}
