#include <gtest/gtest.h>

#include "mhvit/app/experiment.hpp"
#include "mhvit/eval/evaluate.hpp"
#include "mhvit/eval/kappa.hpp"
#include "mhvit/pipeline/synth.hpp"

using namespace mhvit;

namespace {

// Pairwise form: 1 - N * sum_i (t_i - p_i)^2 / sum_a sum_b (t_a - p_b)^2.
double brute_force_kappa(const std::vector<int>& t, const std::vector<int>& p) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) num += double(t[i] - p[i]) * (t[i] - p[i]);
  for (int a : t)
    for (int b : p) den += double(a - b) * (a - b);
  return 1.0 - static_cast<double>(t.size()) * num / den;
}

}  // namespace

TEST(Kappa, PerfectAgreementIsOne) {
  const std::vector<int> y{0, 1, 2, 3, 4, 5, 3};
  EXPECT_EQ(quadratic_weighted_kappa(y, y), 1.0);
}

TEST(Kappa, ReversedLabelsMatchOracle) {
  const std::vector<int> t{0, 1, 2, 3, 4, 5}, p{5, 4, 3, 2, 1, 0};
  EXPECT_NEAR(quadratic_weighted_kappa(t, p), brute_force_kappa(t, p), 1e-12);
  EXPECT_NEAR(quadratic_weighted_kappa(t, p), -1.0, 1e-12);
}

TEST(Kappa, RandomPairsMatchOracle) {
  Rng rng(RngSeed{1});
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> t(200), p(200);
    for (auto& v : t) v = static_cast<int>(rng.integer(0, 5));
    for (auto& v : p) v = static_cast<int>(rng.integer(0, 5));
    EXPECT_NEAR(quadratic_weighted_kappa(t, p), brute_force_kappa(t, p), 1e-12);
  }
}

TEST(Kappa, ConstantPredictorIsNotPositive) {
  const std::vector<int> t{0, 1, 2, 3, 4, 5, 2}, p(7, 2);
  const double k = quadratic_weighted_kappa(t, p);
  EXPECT_LE(k, 0.0);
  EXPECT_NEAR(k, brute_force_kappa(t, p), 1e-12);
}

TEST(Kappa, DegenerateCaseIsFlagged) {
  const std::vector<int> t(4, 3), p(4, 3);
  const auto r = quadratic_weighted_kappa(ConfusionMatrix::from_labels(t, p, 6));
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.kappa, 1.0);
}

TEST(Kappa, RejectsBadInput) {
  const std::vector<int> a{0, 1}, b{0};
  EXPECT_THROW(quadratic_weighted_kappa(a, b), ValidationError);
  const std::vector<int> c{0, 6};
  EXPECT_THROW(quadratic_weighted_kappa(a, c), ValidationError);
  const std::vector<int> e;
  EXPECT_THROW(quadratic_weighted_kappa(e, e), ValidationError);
}

TEST(Confusion, TotalEqualsSampleCount) {
  const std::vector<int> t{0, 1, 1, 5, 2}, p{0, 2, 1, 4, 2};
  const auto cm = ConfusionMatrix::from_labels(t, p, 6);
  EXPECT_EQ(cm.total(), 5u);
  EXPECT_EQ(cm.at(1, 2), 1u);
  EXPECT_EQ(cm.at(5, 4), 1u);
}

namespace {

ModelConfig eval_config(const SyntheticSlideSpec& s) {
  ModelConfig c;
  c.region_size = s.region_size;
  c.patch_size = s.patch_size;
  c.input_dim = s.feature_dim;
  c.embed_dim = 8;
  c.region_depth = 1;
  c.slide_depth = 1;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  return c;
}

SyntheticSlideSpec eval_spec() {
  SyntheticSlideSpec s;
  s.region_size = 64;
  s.patch_size = 16;
  s.feature_dim = 6;
  s.max_regions_x = s.max_regions_y = 2;
  return s;
}

}  // namespace

TEST(Evaluate, ConstantModelMatchesOracle) {
  const auto spec = eval_spec();
  const auto data = synthesize_dataset(spec, 12, 3);
  HierarchicalViT model(eval_config(spec));
  // Zero head weight: every slide gets the bias, 2.5, i.e. score 3.
  auto w = model.parameters().get("head.weight").mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  const EvalResult r = evaluate(model, Masking::on, data);
  std::vector<int> t, p;
  for (const auto& s : r.predictions) {
    EXPECT_EQ(s.score, 3);
    t.push_back(s.label);
    p.push_back(s.score);
  }
  EXPECT_EQ(r.confusion.total(), 12u);
  EXPECT_LE(r.kappa, 0.0);
  EXPECT_NEAR(r.kappa, brute_force_kappa(t, p), 1e-12);
}

TEST(Evaluate, PerfectModelScoresOne) {
  const auto spec = eval_spec();
  auto data = synthesize_dataset(spec, 12, 4);
  HierarchicalViT model(eval_config(spec));
  // Large head weights spread the scores; the labels are then set to them.
  for (double& v : model.parameters().get("head.weight").mutable_data()) v *= 200.0;
  for (auto& s : data) s.label = model.predict(s, Masking::on).score;
  const EvalResult r = evaluate(model, Masking::on, data);
  EXPECT_FALSE(r.degenerate);
  EXPECT_EQ(r.kappa, 1.0);
  EXPECT_EQ(r.confusion.total(), 12u);
}

TEST(Experiment, MeanStdUsesSampleDeviation) {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  const MeanStd r = mean_std(v);
  EXPECT_DOUBLE_EQ(r.mean, 2.5);
  EXPECT_NEAR(r.std, std::sqrt(5.0 / 3.0), 1e-15);
}

TEST(Experiment, FoldSplitsPartitionDataset) {
  const auto spec = eval_spec();
  const auto data = synthesize_dataset(spec, 15, 5);
  const auto splits = make_fold_splits(data, 5, 9);
  std::vector<int> tune_count(15, 0);
  for (const auto& s : splits) {
    EXPECT_EQ(s.train.size() + s.tune.size(), 15u);
    for (auto i : s.tune) ++tune_count[i];
    for (auto i : s.train) EXPECT_EQ(std::count(s.tune.begin(), s.tune.end(), i), 0);
  }
  for (int c : tune_count) EXPECT_EQ(c, 1);
}
