#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhvit/hvit.hpp"
#include "mhvit/optim.hpp"

namespace mhvit {

struct TrainOptions {
  std::size_t epochs = 20;
  double lr = 1e-3;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  bool cosine_decay = true;  // lr * (1 + cos(pi * e / epochs)) / 2 for epoch e of a fit
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based, counted across resumes
  double mean_loss = 0.0;
};

// Model, optimizer state and counters of one training run. One slide per
// optimizer step.
class TrainingSession {
 public:
  TrainingSession(const ModelConfig& config, Masking masking)
      : model_(config),
        optimizer_(AdamState::zeros_like(model_.parameters().items())),
        masking_(masking) {}

  HierarchicalViT& model() { return model_; }
  const HierarchicalViT& model() const { return model_; }
  AdamState& optimizer() { return optimizer_; }
  const AdamState& optimizer() const { return optimizer_; }
  Masking masking() const { return masking_; }
  std::uint64_t step() const { return step_; }
  std::uint64_t epochs_completed() const { return epochs_completed_; }
  void set_counters(std::uint64_t step, std::uint64_t epochs) {
    step_ = step;
    epochs_completed_ = epochs;
  }
  nlohmann::json& metadata() { return metadata_; }
  const nlohmann::json& metadata() const { return metadata_; }

  double train_step(const SlideSample& slide, const AdamOptions& adam, double grad_clip) {
    auto& params = model_.parameters();
    params.zero_grad();
    const Tensor loss = mse_loss(model_.forward(slide, masking_), slide.label);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericError("training diverged at step " + std::to_string(step_ + 1) +
                         " on slide '" + slide.slide_id + "': loss = " +
                         std::to_string(value));
    }
    backward(loss);
    const double norm = clip_grad_norm(params.items(), grad_clip);
    if (!std::isfinite(norm)) {
      throw NumericError("non-finite gradient norm at step " + std::to_string(step_ + 1) +
                         " on slide '" + slide.slide_id + "'");
    }
    adam_step(params.items(), adam, optimizer_);
    ++step_;
    return value;
  }

  EpochMetrics run_epoch(std::span<const SlideSample> dataset, const TrainOptions& opt,
                         double lr_scale = 1.0) {
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(RngSeed{mix_seed(model_.config().seed, 0x5eed0000ULL + epochs_completed_)});
    std::shuffle(order.begin(), order.end(), rng.engine());

    AdamOptions adam;
    adam.lr = opt.lr * lr_scale;
    double total = 0.0;
    for (std::size_t i : order) total += train_step(dataset[i], adam, opt.grad_clip);
    ++epochs_completed_;
    return {epochs_completed_, total / static_cast<double>(dataset.size())};
  }

  std::vector<EpochMetrics> fit(std::span<const SlideSample> dataset, const TrainOptions& opt) {
    if (dataset.empty()) throw ValidationError("train: dataset is empty");
    if (!(opt.lr > 0.0)) throw ValidationError("train: lr must be > 0");
    for (const auto& s : dataset) s.validate(model_.config());
    std::vector<EpochMetrics> history;
    constexpr double pi = 3.14159265358979323846;
    for (std::size_t e = 0; e < opt.epochs; ++e) {
      const double scale =
          opt.cosine_decay
              ? 0.5 * (1.0 + std::cos(pi * static_cast<double>(e) / static_cast<double>(opt.epochs)))
              : 1.0;
      history.push_back(run_epoch(dataset, opt, scale));
    }
    return history;
  }

 private:
  HierarchicalViT model_;
  AdamState optimizer_;
  Masking masking_;
  std::uint64_t step_ = 0;
  std::uint64_t epochs_completed_ = 0;
  nlohmann::json metadata_ = nlohmann::json::object();
};

struct TrainResult {
  TrainingSession session;
  std::vector<EpochMetrics> history;
};

inline TrainResult train(std::span<const SlideSample> dataset, const ModelConfig& config,
                         Masking masking, const TrainOptions& options) {
  TrainResult result{TrainingSession(config, masking), {}};
  result.history = result.session.fit(dataset, options);
  return result;
}

}  // namespace mhvit
