#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mhvit/params.hpp"
#include "mhvit/tensor.hpp"

namespace mhvit {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState zeros_like(std::span<const Parameter> params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.tensor.numel(), 0.0);
      s.v.emplace_back(p.tensor.numel(), 0.0);
    }
    return s;
  }
};

// One bias-corrected Adam update using the gradients stored on `params`.
// Parameters without a gradient are treated as having a zero gradient.
inline void adam_step(std::span<Parameter> params, const AdamOptions& opt,
                      AdamState& state) {
  if (!(opt.lr > 0.0)) throw ValidationError("adam: lr must be > 0");
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam: state holds " + std::to_string(state.m.size()) +
                     " slots for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].tensor.numel() ||
        state.v[i].size() != params[i].tensor.numel()) {
      throw ShapeError("adam: state size mismatch for " + params[i].name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].tensor;
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
      v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
  }
}

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_grad_norm(std::span<Parameter> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params)
      if (p.tensor.has_grad())
        for (double& g : p.tensor.mutable_grad()) g *= s;
  }
  return norm;
}

// Compares reverse-mode gradients of `f` against central finite differences
// and returns max |analytic - numeric| / max(1, |numeric|) over all entries.
inline double grad_check(const std::function<Tensor()>& f,
                         std::span<Tensor> params, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ValidationError("grad_check: eps must lie in [1e-7, 1e-3], got " +
                          std::to_string(eps));
  }
  for (auto& p : params) p.zero_grad();
  const Tensor loss = f();
  const double base = loss.item();
  backward(loss);

  double repeat = 0.0;
  {
    NoGradGuard guard;
    repeat = f().item();
  }
  if (repeat != base) {
    throw NumericError("grad_check: f is not deterministic (" +
                       std::to_string(base) + " vs " + std::to_string(repeat) + ")");
  }

  double worst = 0.0;
  NoGradGuard guard;
  for (auto& p : params) {
    const std::vector<double> analytic =
        p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                     : std::vector<double>(p.numel(), 0.0);
    auto w = p.mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double orig = w[j];
      w[j] = orig + eps;
      const double up = f().item();
      w[j] = orig - eps;
      const double down = f().item();
      w[j] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double err =
          std::abs(analytic[j] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace mhvit
