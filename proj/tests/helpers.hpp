#pragma once

#include <vector>

#include "dipt/dipt.hpp"

namespace dipt::testing {

inline DenseMatrix random_features(std::size_t n, std::size_t f, Rng& rng) {
  DenseMatrix m(n, f);
  for (double& x : m.data()) x = rng.normal();
  return m;
}

inline Graph make_graph(std::size_t n, std::vector<DirectedEdge> edges, std::size_t f = 1) {
  return Graph(n, std::move(edges), DenseMatrix(n, f, 1.0));
}

/// Both directions of every listed pair.
inline std::vector<DirectedEdge> undirected(const std::vector<DirectedEdge>& pairs) {
  std::vector<DirectedEdge> out;
  for (auto [u, v] : pairs) {
    out.push_back({u, v});
    out.push_back({v, u});
  }
  return out;
}

/// Random symmetric graph with Gaussian features; every node has at least one neighbour when n > 1.
inline Graph random_graph(std::size_t n, double p, std::size_t f, Rng& rng) {
  std::vector<DirectedEdge> pairs;
  for (NodeId u = 0; u < n; ++u) {
    bool any = false;
    for (NodeId v = u + 1; v < n; ++v) {
      if (rng.bernoulli(p)) {
        pairs.push_back({u, v});
        any = true;
      }
    }
    if (!any && u + 1 < n) pairs.push_back({u, u + 1});
  }
  return Graph(n, undirected(pairs), random_features(n, f, rng));
}

inline InfluenceNet random_net(std::size_t f, std::uint64_t seed) {
  Rng rng(seed);
  return InfluenceNet::create(f, rng);
}

inline InfluenceMatrix random_influence(const Graph& g, Rng& rng) {
  Vector p(g.n_edges());
  for (double& x : p) x = rng.uniform(0.05, 0.95);
  return InfluenceMatrix::on_graph(g, p);
}

/// SI instance on a random graph (used for cross-module properties).
struct Instance {
  Graph graph;
  SiResult sim;
};

inline Instance random_si_instance(std::size_t n, double p, std::uint64_t seed, double beta = 0.4,
                                   std::size_t iterations = 4) {
  Rng rng(seed);
  Graph g = random_graph(n, p, 3, rng);
  SiConfig cfg;
  cfg.beta = beta;
  cfg.iterations = iterations;
  cfg.seed_fraction = 0.2;
  cfg.rng_seed = seed;
  SiResult sim = simulate_si(g, cfg);
  return {std::move(g), std::move(sim)};
}

}  // namespace dipt::testing
