#pragma once

#include <span>
#include <string>
#include <vector>

#include "mhvit/eval/kappa.hpp"
#include "mhvit/hvit.hpp"

namespace mhvit {

struct SlidePrediction {
  std::string slide_id;
  int label = 0;
  double logit = 0.0;
  int score = 0;
};

struct EvalResult {
  double kappa = 0.0;
  bool degenerate = false;
  ConfusionMatrix confusion{kNumIsupClasses};
  std::vector<SlidePrediction> predictions;
};

inline EvalResult evaluate(const HierarchicalViT& model, Masking masking,
                           std::span<const SlideSample> dataset) {
  if (dataset.empty()) throw ValidationError("evaluate: dataset is empty");
  EvalResult out;
  std::vector<int> truth, pred;
  for (const auto& s : dataset) {
    const IsupPrediction p = model.predict(s, masking);
    out.predictions.push_back({s.slide_id, s.label, p.logit, p.score});
    truth.push_back(s.label);
    pred.push_back(p.score);
  }
  out.confusion = ConfusionMatrix::from_labels(truth, pred, kNumIsupClasses);
  const KappaResult k = quadratic_weighted_kappa(out.confusion);
  out.kappa = k.kappa;
  out.degenerate = k.degenerate;
  return out;
}

}  // namespace mhvit
