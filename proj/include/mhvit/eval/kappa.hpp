#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mhvit/error.hpp"

namespace mhvit {

// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(int k = 6) : num_classes(k), counts(static_cast<std::size_t>(k * k), 0) {
    if (k < 2) throw ValidationError("confusion matrix needs at least 2 classes");
  }

  static ConfusionMatrix from_labels(std::span<const int> y_true, std::span<const int> y_pred,
                                     int num_classes) {
    if (y_true.size() != y_pred.size()) {
      throw ValidationError("label lists differ in length: " + std::to_string(y_true.size()) +
                            " vs " + std::to_string(y_pred.size()));
    }
    if (y_true.empty()) throw ValidationError("label lists are empty");
    ConfusionMatrix cm(num_classes);
    for (std::size_t i = 0; i < y_true.size(); ++i) {
      if (y_true[i] < 0 || y_true[i] >= num_classes || y_pred[i] < 0 || y_pred[i] >= num_classes) {
        throw ValidationError("label out of range 0.." + std::to_string(num_classes - 1) +
                              " at index " + std::to_string(i));
      }
      ++cm.at(y_true[i], y_pred[i]);
    }
    return cm;
  }

  std::uint64_t& at(int t, int p) { return counts[static_cast<std::size_t>(t * num_classes + p)]; }
  std::uint64_t at(int t, int p) const { return counts[static_cast<std::size_t>(t * num_classes + p)]; }

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
};

struct KappaResult {
  double kappa = 0.0;
  bool degenerate = false;  // zero expected disagreement; kappa reported as 1
};

// kappa = 1 - sum(w O) / sum(w E), w_ij = (i-j)^2 / (K-1)^2 and E the outer
// product of the marginals scaled to O's total.
inline KappaResult quadratic_weighted_kappa(const ConfusionMatrix& cm) {
  const int k = cm.num_classes;
  const double n = static_cast<double>(cm.total());
  if (n == 0.0) throw ValidationError("kappa of an empty confusion matrix");
  std::vector<double> row(static_cast<std::size_t>(k), 0.0), col(static_cast<std::size_t>(k), 0.0);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      row[static_cast<std::size_t>(i)] += static_cast<double>(cm.at(i, j));
      col[static_cast<std::size_t>(j)] += static_cast<double>(cm.at(i, j));
    }
  const double norm = static_cast<double>(k - 1) * static_cast<double>(k - 1);
  double observed = 0.0, expected = 0.0;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      const double w = static_cast<double>((i - j) * (i - j)) / norm;
      observed += w * static_cast<double>(cm.at(i, j));
      expected += w * row[static_cast<std::size_t>(i)] * col[static_cast<std::size_t>(j)] / n;
    }
  }
  if (expected == 0.0) return {1.0, true};
  return {1.0 - observed / expected, false};
}

inline double quadratic_weighted_kappa(std::span<const int> y_true, std::span<const int> y_pred,
                                       int num_classes = 6) {
  return quadratic_weighted_kappa(ConfusionMatrix::from_labels(y_true, y_pred, num_classes)).kappa;
}

}  // namespace mhvit
