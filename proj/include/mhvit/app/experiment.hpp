#pragma once

// Stratified k-fold cross-validation of one attention variant.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhvit/eval/evaluate.hpp"
#include "mhvit/pipeline/folds.hpp"
#include "mhvit/train.hpp"

namespace mhvit {

struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> tune;
};

inline std::vector<FoldSplit> make_fold_splits(std::span<const SlideSample> dataset, std::size_t k,
                                               std::uint64_t seed) {
  std::vector<int> labels;
  for (const auto& s : dataset) labels.push_back(s.label);
  const auto folds = stratified_folds(labels, k, seed);
  std::vector<FoldSplit> out(k);
  for (std::size_t f = 0; f < k; ++f) {
    out[f].tune = folds[f];
    for (std::size_t g = 0; g < k; ++g)
      if (g != f) out[f].train.insert(out[f].train.end(), folds[g].begin(), folds[g].end());
    std::sort(out[f].train.begin(), out[f].train.end());
  }
  return out;
}

inline std::vector<SlideSample> gather(std::span<const SlideSample> dataset,
                                       std::span<const std::size_t> indices) {
  std::vector<SlideSample> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(dataset[i]);
  return out;
}

// Model seed of fold f. Shared by both variants so that masked and plain
// runs start from identical parameters.
inline ModelConfig fold_model_config(ModelConfig config, std::size_t fold) {
  config.seed = mix_seed(config.seed, 0xf01d + fold);
  return config;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for n = 1
};

inline MeanStd mean_std(std::span<const double> v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

struct FoldOutcome {
  std::size_t fold = 0;
  std::vector<EpochMetrics> history;
  EvalResult tune;
};

struct CrossValidationResult {
  Masking masking = Masking::on;
  std::vector<FoldOutcome> folds;

  std::vector<double> kappas() const {
    std::vector<double> k;
    for (const auto& f : folds) k.push_back(f.tune.kappa);
    return k;
  }
  MeanStd summary() const {
    const auto k = kappas();
    return mean_std(k);
  }
};

using FoldCallback = std::function<void(const FoldOutcome&, const TrainingSession&)>;

inline CrossValidationResult cross_validate(std::span<const SlideSample> dataset,
                                            const ModelConfig& config, const TrainOptions& options,
                                            Masking masking, std::size_t k, std::uint64_t split_seed,
                                            const FoldCallback& on_fold = {}) {
  CrossValidationResult out;
  out.masking = masking;
  const auto splits = make_fold_splits(dataset, k, split_seed);
  for (std::size_t f = 0; f < k; ++f) {
    const auto train_set = gather(dataset, splits[f].train);
    const auto tune_set = gather(dataset, splits[f].tune);
    TrainingSession session(fold_model_config(config, f), masking);
    FoldOutcome outcome;
    outcome.fold = f;
    outcome.history = session.fit(train_set, options);
    outcome.tune = evaluate(session.model(), masking, tune_set);
    if (on_fold) on_fold(outcome, session);
    out.folds.push_back(std::move(outcome));
  }
  return out;
}

}  // namespace mhvit
