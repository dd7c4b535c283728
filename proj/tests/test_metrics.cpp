#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "oracles.hpp"

using namespace dipt;
using namespace dipt::testing;

namespace {

EdgeSet edges(std::initializer_list<DirectedEdge> e) { return EdgeSet(e); }

std::vector<DirectedEdge> random_edges(Rng& rng) {
  std::vector<DirectedEdge> out;
  const std::size_t k = rng.index(8);
  for (std::size_t i = 0; i < k; ++i) out.push_back({rng.index(5), rng.index(5)});
  return out;
}

}  // namespace

TEST(PathPrecision, Examples) {
  const auto t = edges({{0, 1}, {1, 2}});
  EXPECT_EQ(path_precision(t, t), 1.0);
  EXPECT_EQ(path_precision(edges({{0, 1}, {1, 2}}), edges({{0, 1}, {0, 2}})), 0.5);
  EXPECT_EQ(path_precision({}, t), 0.0);
}

TEST(PathPrecision, NotSymmetric) {
  const auto a = edges({{0, 1}}), b = edges({{0, 1}, {1, 2}});
  EXPECT_EQ(path_precision(a, b), 1.0);
  EXPECT_EQ(path_precision(b, a), 0.5);
}

TEST(Jaccard, Examples) {
  EXPECT_DOUBLE_EQ(jaccard_index(edges({{0, 1}, {1, 2}}), edges({{0, 1}, {0, 2}})), 1.0 / 3.0);
  EXPECT_EQ(jaccard_index(edges({{0, 1}}), edges({{1, 0}})), 0.0);
  EXPECT_EQ(jaccard_index(edges({{3, 4}}), edges({{3, 4}})), 1.0);
  EXPECT_EQ(jaccard_index({}, {}), 1.0);
}

TEST(ClassificationMetrics, Examples) {
  const auto truth = SeedVector::from_nodes(4, {0, 2});
  const auto perfect = classification_metrics(truth, truth);
  EXPECT_EQ(perfect.precision, 1.0);
  EXPECT_EQ(perfect.recall, 1.0);
  EXPECT_EQ(perfect.f1, 1.0);
  const auto none = classification_metrics(SeedVector(4), truth);
  EXPECT_EQ(none.precision, 0.0);
  EXPECT_EQ(none.recall, 0.0);
  EXPECT_EQ(none.f1, 0.0);
  const auto mixed = classification_metrics(SeedVector::from_nodes(4, {0, 1}), truth);
  EXPECT_EQ(mixed.precision, 0.5);
  EXPECT_EQ(mixed.recall, 0.5);
  EXPECT_EQ(mixed.f1, 0.5);
  EXPECT_THROW(classification_metrics(SeedVector(3), truth), ShapeError);
}

TEST(RocAuc, Examples) {
  EXPECT_EQ(roc_auc(Vector{0.9, 0.8, 0.1}, {1, 0, 0}), 1.0);
  EXPECT_EQ(roc_auc(Vector{0.4, 0.4, 0.4, 0.4}, {1, 0, 1, 0}), 0.5);
  EXPECT_EQ(roc_auc(Vector{0.2, 0.9}, {1, 0}), 0.0);
  EXPECT_THROW(roc_auc(Vector{0.2, 0.9}, {1, 1}), ContractError);
  EXPECT_THROW(roc_auc(Vector{0.2}, {1, 0}), ShapeError);
}

TEST(SequenceError, Examples) {
  using Steps = std::vector<std::optional<std::size_t>>;
  EXPECT_EQ(sequence_error(Steps{0, 1, 2}, Steps{0, 1, 2}), 0.0);
  EXPECT_NEAR(sequence_error(Steps{3, 3, 3}, Steps{0, 1, 2}), 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(sequence_error(Steps{3, 3, 3}, Steps{0, 1, 2}), 0.1667, 1e-4);
  EXPECT_EQ(sequence_error(Steps{5, std::nullopt}, Steps{1, 2}), 0.0);
  EXPECT_THROW(sequence_error(Steps{std::nullopt, 1}, Steps{1, std::nullopt}), ContractError);
}

TEST(Metrics, AgreeWithBruteForceOracles) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto p = random_edges(rng), t = random_edges(rng);
    const EdgeSet ps(p.begin(), p.end()), ts(t.begin(), t.end());
    EXPECT_EQ(path_precision(ps, ts), oracle::path_precision(p, t));
    EXPECT_EQ(jaccard_index(ps, ts), oracle::jaccard(p, t));
    EXPECT_EQ(jaccard_index(ps, ts), jaccard_index(ts, ps));

    const std::size_t n = 1 + rng.index(10);
    std::vector<int> pv(n), tv(n);
    SeedVector pred(n), truth(n);
    for (std::size_t i = 0; i < n; ++i) {
      pv[i] = rng.bernoulli(0.4);
      tv[i] = rng.bernoulli(0.4);
      pred.set(i, pv[i]);
      truth.set(i, tv[i]);
    }
    const auto got = classification_metrics(pred, truth);
    const auto want = oracle::prf(pv, tv);
    EXPECT_EQ(got.precision, want.precision);
    EXPECT_EQ(got.recall, want.recall);
    EXPECT_EQ(got.f1, want.f1);

    const std::size_t m = 2 + rng.index(12);
    std::vector<double> scores(m);
    std::vector<std::uint8_t> labels(m);
    for (std::size_t i = 0; i < m; ++i) {
      scores[i] = static_cast<double>(rng.index(5)) / 4.0;  // coarse grid to force ties
      labels[i] = rng.bernoulli(0.5);
    }
    labels[0] = 1;
    labels[1] = 0;
    EXPECT_EQ(roc_auc(scores, labels), oracle::auc(scores, labels));
  }
}

TEST(RocAuc, InvariantUnderMonotoneTransforms) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 2 + rng.index(20);
    std::vector<double> scores(m), transformed(m);
    std::vector<std::uint8_t> labels(m);
    for (std::size_t i = 0; i < m; ++i) {
      scores[i] = rng.normal();
      labels[i] = rng.bernoulli(0.5);
      transformed[i] = std::exp(3.0 * scores[i]) + 7.0;
    }
    labels[0] = 1;
    labels[m - 1] = 0;
    EXPECT_EQ(roc_auc(scores, labels), roc_auc(transformed, labels));
  }
}

TEST(Metrics, OutputsInUnitInterval) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_edges(rng), t = random_edges(rng);
    const EdgeSet ps(p.begin(), p.end()), ts(t.begin(), t.end());
    for (double v : {path_precision(ps, ts), jaccard_index(ps, ts)}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}
