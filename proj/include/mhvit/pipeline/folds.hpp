#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mhvit/error.hpp"
#include "mhvit/params.hpp"

namespace mhvit {

// Splits indices 0..n-1 into k disjoint folds. Within each class the indices
// are shuffled and dealt round-robin, continuing from the fold where the
// previous class stopped, so per-class counts across folds differ by at
// most one and fold sizes stay balanced. Each fold is returned sorted.
inline std::vector<std::vector<std::size_t>> stratified_folds(const std::vector<int>& labels,
                                                              std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("stratified_folds: k must be >= 2");
  if (k > labels.size()) {
    throw ValidationError("stratified_folds: k = " + std::to_string(k) + " exceeds " +
                          std::to_string(labels.size()) + " samples");
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t next = 0;
  for (auto& [label, members] : by_class) {
    Rng rng(RngSeed{mix_seed(seed, static_cast<std::uint64_t>(label) + 0x51a7)});
    std::shuffle(members.begin(), members.end(), rng.engine());
    for (std::size_t idx : members) {
      folds[next].push_back(idx);
      next = (next + 1) % k;
    }
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

}  // namespace mhvit
