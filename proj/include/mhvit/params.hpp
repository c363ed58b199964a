#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "mhvit/tensor.hpp"

namespace mhvit {

struct RngSeed {
  std::uint64_t value = 0;
};

// Seeded generator. Same seed, same sequence, on a given standard library.
class Rng {
 public:
  explicit Rng(RngSeed seed) : engine_(seed.value) {}

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  // Uniform integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }
  std::uint64_t bits() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// SplitMix64 finalizer; derives independent sub-seeds from (seed, stream).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct Parameter {
  std::string name;  // dotted path, e.g. "region.block0.qkv.weight"
  Tensor tensor;
};

// Ordered, name-unique collection of trainable tensors.
class ParameterStore {
 public:
  Tensor& add(std::string name, Tensor tensor) {
    if (index_.count(name)) throw ValidationError("duplicate parameter name: " + name);
    tensor.set_requires_grad(true);
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), std::move(tensor)});
    return params_.back().tensor;
  }

  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
    return params_[it->second].tensor;
  }
  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
    return params_[it->second].tensor;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Parameter>& items() { return params_; }
  const std::vector<Parameter>& items() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v));
}

// Glorot/Xavier uniform for an (in, out) weight matrix.
inline Tensor xavier_tensor(std::size_t in, std::size_t out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> v(in * out);
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return Tensor({in, out}, std::move(v));
}

}  // namespace mhvit
