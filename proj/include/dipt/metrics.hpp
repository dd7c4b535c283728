#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <set>
#include <vector>

#include "graph.hpp"

namespace dipt {

using EdgeSet = std::set<DirectedEdge>;

inline EdgeSet edge_set(const PropagationForest& forest) {
  const auto e = forest.edges();
  return EdgeSet(e.begin(), e.end());
}

namespace detail {
inline std::size_t intersection_size(const EdgeSet& a, const EdgeSet& b) {
  std::size_t n = 0;
  for (const auto& e : a) n += b.count(e);
  return n;
}
}  // namespace detail

/// |predicted ∩ truth| / |predicted|; 0 for an empty prediction. Not symmetric.
inline double path_precision(const EdgeSet& predicted, const EdgeSet& truth) {
  if (predicted.empty()) return 0.0;
  return static_cast<double>(detail::intersection_size(predicted, truth)) / static_cast<double>(predicted.size());
}

/// |∩| / |∪|; 1 when both are empty.
inline double jaccard_index(const EdgeSet& predicted, const EdgeSet& truth) {
  const std::size_t inter = detail::intersection_size(predicted, truth);
  const std::size_t uni = predicted.size() + truth.size() - inter;
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

struct ClassificationMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline ClassificationMetrics classification_metrics(const SeedVector& predicted, const SeedVector& truth) {
  if (predicted.size() != truth.size()) throw ShapeError("classification_metrics: length mismatch");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i] && truth[i]) ++tp;
    else if (predicted[i]) ++fp;
    else if (truth[i]) ++fn;
  }
  ClassificationMetrics m;
  if (tp + fp > 0) m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (m.precision + m.recall > 0.0) m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

/// Mann-Whitney statistic: P(score_pos > score_neg) + 0.5 P(equal), via average ranks.
inline double roc_auc(std::span<const double> scores, const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("roc_auc: length mismatch");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (auto l : labels) n_pos += l ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ContractError("roc_auc: undefined without both positive and negative labels");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) pos_rank_sum += avg_rank;
    }
    i = j;
  }
  const double np = static_cast<double>(n_pos);
  const double u = pos_rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

/// MSE between min-max normalised activation steps over mutually infected nodes.
/// A vector with no spread normalises to 0.5 everywhere (the midpoint of the range).
inline double sequence_error(const std::vector<std::optional<std::size_t>>& predicted,
                             const std::vector<std::optional<std::size_t>>& truth) {
  if (predicted.size() != truth.size()) throw ShapeError("sequence_error: length mismatch");
  std::vector<double> a, b;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i] && truth[i]) {
      a.push_back(static_cast<double>(*predicted[i]));
      b.push_back(static_cast<double>(*truth[i]));
    }
  }
  if (a.empty()) throw ContractError("sequence_error: no mutually infected nodes");
  auto normalise = [](std::vector<double>& v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double l = *lo, h = *hi;
    for (double& x : v) x = h > l ? (x - l) / (h - l) : 0.5;
  };
  normalise(a);
  normalise(b);
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
  return mse / static_cast<double>(a.size());
}

}  // namespace dipt
