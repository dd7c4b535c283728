#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "graph.hpp"
#include "influence.hpp"

namespace dipt {

/// Strict-increase tolerance of the propagation mask.
inline constexpr double kMaskTolerance = 1e-12;

struct PropagationTrace {
  std::vector<Vector> prob;                              // P(k), k = 0..iterations
  std::vector<std::vector<std::uint8_t>> mask_history;   // M_k, k = 0..iterations
  std::vector<std::optional<std::size_t>> activation_step;
  // Entry of I that produced each node's current value; empty when the node
  // holds its own seed probability (or was never reached).
  std::vector<std::optional<std::size_t>> source_entry;
  std::size_t iterations = 0;
  bool converged = false;
  bool truncated = false;

  const Vector& final_prob() const { return prob.back(); }
};

/// Masked infection-probability iteration.
///
/// The product P * I is taken in the (max, x) semiring: candidate_i is the best
/// single-parent route max_j P_j I(j, i). Iteration 0 holds seeds at their own
/// probability and gives every other node its one-hop push. Step k updates only
/// nodes whose candidate exceeds the previous value by more than 1e-12 and
/// retains the rest, so per-node probabilities are nondecreasing and the
/// process reaches a fixpoint within |V| steps.
inline PropagationTrace propagate_masked(const InfluenceMatrix& influence, std::span<const double> seed_prob,
                                         std::size_t max_iters) {
  const std::size_t n = influence.n_nodes();
  if (seed_prob.size() != n) throw ShapeError("propagate_masked: seed_prob length does not match node count");
  if (max_iters < 1) throw UsageError("propagate_masked: max_iters must be at least 1");
  for (double p : seed_prob) {
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("propagate_masked: seed probabilities must lie in [0, 1]");
  }

  PropagationTrace trace;
  trace.activation_step.assign(n, std::nullopt);
  trace.source_entry.assign(n, std::nullopt);

  auto best_push = [&](const Vector& current, NodeId i, std::optional<std::size_t>& arg) {
    double best = 0.0;
    arg.reset();
    for (std::size_t e : influence.incoming(i)) {
      const double c = current[influence.edges()[e].src] * influence.value(e);
      if (c > best) {
        best = c;
        arg = e;
      }
    }
    return best;
  };

  Vector p0(seed_prob.begin(), seed_prob.end());
  const Vector seeds(seed_prob.begin(), seed_prob.end());
  std::vector<std::uint8_t> m0(n, 0);
  for (NodeId i = 0; i < n; ++i) {
    std::optional<std::size_t> arg;
    const double push = best_push(seeds, i, arg);
    if (push > seeds[i]) {
      p0[i] = push;
      trace.source_entry[i] = arg;
      m0[i] = 1;
    }
    if (p0[i] > 0.0) trace.activation_step[i] = 0;
  }
  trace.prob.push_back(std::move(p0));
  trace.mask_history.push_back(std::move(m0));

  for (std::size_t k = 1;; ++k) {
    const Vector& prev = trace.prob.back();
    Vector next = prev;
    std::vector<std::uint8_t> mask(n, 0);
    bool any = false;
    for (NodeId i = 0; i < n; ++i) {
      std::optional<std::size_t> arg;
      const double cand = best_push(prev, i, arg);
      if (cand > prev[i] + kMaskTolerance) {
        next[i] = cand;
        trace.source_entry[i] = arg;
        mask[i] = 1;
        any = true;
        if (!trace.activation_step[i]) trace.activation_step[i] = k;
      }
    }
    trace.prob.push_back(std::move(next));
    trace.mask_history.push_back(std::move(mask));
    trace.iterations = k;
    if (!any) {
      trace.converged = true;
      break;
    }
    if (k == max_iters) {
      trace.truncated = true;
      break;
    }
  }
  return trace;
}

/// Per-node provenance of the converged probabilities: final P_i equals
/// seed_prob[root_i] * multiplier_i. Nodes never reached have no root.
struct PropagationStructure {
  std::vector<std::optional<NodeId>> root;
  Vector multiplier;
};

inline PropagationStructure propagation_structure(const PropagationTrace& trace, const InfluenceMatrix& influence) {
  const std::size_t n = trace.source_entry.size();
  PropagationStructure st;
  st.root.assign(n, std::nullopt);
  st.multiplier.assign(n, 0.0);
  std::vector<std::uint8_t> done(n, 0);
  for (NodeId start = 0; start < n; ++start) {
    // Walk source pointers to a node that holds its own probability.
    std::vector<NodeId> chain;
    NodeId cur = start;
    while (!done[cur] && trace.source_entry[cur]) {
      chain.push_back(cur);
      cur = influence.edges()[*trace.source_entry[cur]].src;
      if (chain.size() > n) throw ContractError("propagation_structure: cyclic provenance");
    }
    if (!done[cur]) {
      done[cur] = 1;
      if (trace.final_prob()[cur] > 0.0) {
        st.root[cur] = cur;
        st.multiplier[cur] = 1.0;
      }
    }
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
      const NodeId v = *it;
      const std::size_t e = *trace.source_entry[v];
      const NodeId u = influence.edges()[e].src;
      st.root[v] = st.root[u];
      st.multiplier[v] = st.multiplier[u] * influence.value(e);
      done[v] = 1;
    }
  }
  return st;
}

// -----------------------------------------------------------------------------
// Forest extraction
// -----------------------------------------------------------------------------

namespace detail {

inline std::vector<std::optional<std::size_t>> eligibility_rank(const PropagationTrace& trace,
                                                                const DiffusionObservation& y, const SeedVector& s) {
  // Seeds come first; other nodes follow in the order their probability first became positive.
  const std::size_t n = y.size();
  std::vector<std::optional<std::size_t>> rank(n);
  for (NodeId i = 0; i < n; ++i) {
    if (!y[i]) continue;
    if (s[i]) {
      rank[i] = 0;
    } else if (trace.activation_step[i]) {
      rank[i] = *trace.activation_step[i] + 1;
    }
  }
  return rank;
}

inline std::optional<NodeId> best_eligible_parent(const InfluenceMatrix& influence, const Graph& graph,
                                                  const DiffusionObservation& y,
                                                  const std::vector<std::optional<std::size_t>>& rank, NodeId i) {
  std::optional<NodeId> best;
  double best_score = -1.0;
  for (NodeId j : infected_neighbors(graph, y, i)) {
    if (!rank[j] || !rank[i] || !(*rank[j] < *rank[i])) continue;
    const double score = influence.at(j, i);
    if (score > best_score) {  // ascending j, so ties keep the smaller id
      best_score = score;
      best = j;
    }
  }
  return best;
}

// Depth-based activation steps; returns false if parent links contain a cycle.
inline bool assign_depth_steps(PropagationForest& forest, const DiffusionObservation& y, const SeedVector& s) {
  const std::size_t n = forest.size();
  std::vector<std::vector<NodeId>> children(n);
  std::deque<NodeId> queue;
  for (NodeId i = 0; i < n; ++i) {
    forest.activation_step[i].reset();
    if (forest.parent[i]) children[*forest.parent[i]].push_back(i);
  }
  for (NodeId i = 0; i < n; ++i) {
    if (y[i] && s[i]) {
      forest.activation_step[i] = 0;
      queue.push_back(i);
    }
  }
  std::size_t reached = 0;
  while (!queue.empty()) {
    const NodeId u = queue.front();
    queue.pop_front();
    ++reached;
    for (NodeId c : children[u]) {
      forest.activation_step[c] = *forest.activation_step[u] + 1;
      queue.push_back(c);
    }
  }
  return reached == y.count();
}

}  // namespace detail

/// Parent of each infected non-seed = argmax of I(j, i) over infected neighbours
/// j activated strictly earlier (seeds first, then by trace activation step);
/// ties go to the smaller id. Observed edges, when given, pin parents as long as
/// they keep the forest acyclic.
inline PropagationForest extract_forest(const PropagationTrace& trace, const InfluenceMatrix& influence,
                                        const Graph& graph, const DiffusionObservation& y, const SeedVector& s,
                                        const ObservedEdgeSet* pinned = nullptr) {
  const std::size_t n = graph.n_nodes();
  if (y.size() != n || s.size() != n || trace.activation_step.size() != n || influence.n_nodes() != n) {
    throw ShapeError("extract_forest: shape mismatch");
  }
  for (NodeId i = 0; i < n; ++i) {
    if (s[i] && !y[i]) throw ContractError("extract_forest: seed " + std::to_string(i) + " is not infected");
  }
  const auto rank = detail::eligibility_rank(trace, y, s);
  PropagationForest forest(n);
  std::vector<std::optional<NodeId>> argmax_parent(n);
  for (NodeId i = 0; i < n; ++i) {
    if (!y[i]) continue;
    if (s[i]) {
      forest.activation_step[i] = 0;
      continue;
    }
    argmax_parent[i] = detail::best_eligible_parent(influence, graph, y, rank, i);
    if (!argmax_parent[i]) {
      throw OrphanError(i, "extract_forest: infected node " + std::to_string(i) +
                               " has no eligible parent (unreachable from the seeds)");
    }
    forest.parent[i] = argmax_parent[i];
    forest.activation_step[i] = rank[i];
  }
  if (pinned == nullptr || pinned->empty()) return forest;

  std::vector<NodeId> pinned_children;
  for (const auto& [u, v] : *pinned) {
    if (v >= n || u >= n || !y[u] || !y[v] || s[v] || !graph.has_edge(u, v)) continue;
    forest.parent[v] = u;
    pinned_children.push_back(v);
  }
  // Revert pins that close a cycle, one at a time, until the forest is a forest.
  while (!detail::assign_depth_steps(forest, y, s)) {
    bool reverted = false;
    for (NodeId v : pinned_children) {
      if (forest.parent[v] == argmax_parent[v]) continue;
      // A node left unreached by the depth walk sits on a cycle.
      if (!forest.activation_step[v]) {
        forest.parent[v] = argmax_parent[v];
        reverted = true;
        break;
      }
    }
    if (!reverted) throw ContractError("extract_forest: could not repair pinned edges into a forest");
  }
  return forest;
}

/// Baseline forest: each infected non-seed takes a uniformly random parent among
/// the same eligible candidates extract_forest ranks by influence.
inline PropagationForest random_eligible_forest(const PropagationTrace& trace, const Graph& graph,
                                                const DiffusionObservation& y, const SeedVector& s, Rng& rng) {
  const std::size_t n = graph.n_nodes();
  if (y.size() != n || s.size() != n || trace.activation_step.size() != n) {
    throw ShapeError("random_eligible_forest: shape mismatch");
  }
  const auto rank = detail::eligibility_rank(trace, y, s);
  PropagationForest forest(n);
  for (NodeId i = 0; i < n; ++i) {
    if (!y[i]) continue;
    if (s[i]) {
      forest.activation_step[i] = 0;
      continue;
    }
    std::vector<NodeId> eligible;
    for (NodeId j : infected_neighbors(graph, y, i)) {
      if (rank[j] && rank[i] && *rank[j] < *rank[i]) eligible.push_back(j);
    }
    if (eligible.empty()) throw OrphanError(i, "random_eligible_forest: node " + std::to_string(i) + " has no eligible parent");
    forest.parent[i] = eligible[rng.index(eligible.size())];
    forest.activation_step[i] = rank[i];
  }
  return forest;
}

struct TreeInference {
  PropagationForest forest;
  PropagationTrace trace;
};

/// Most probable forest for (y, s) under I: propagation from the seeds over
/// infected-to-infected entries, then parent argmax. max_iters defaults to |V|.
inline TreeInference infer_tree(const InfluenceMatrix& influence, const Graph& graph, const DiffusionObservation& y,
                                const SeedVector& s, const ObservedEdgeSet* pinned = nullptr,
                                std::size_t max_iters = 0) {
  if (y.size() != graph.n_nodes() || s.size() != graph.n_nodes()) throw ShapeError("infer_tree: shape mismatch");
  const InfluenceMatrix restricted = influence.restrict_to(y);
  TreeInference out;
  out.trace = propagate_masked(restricted, s.as_reals(), max_iters ? max_iters : std::max<std::size_t>(graph.n_nodes(), 1));
  out.forest = extract_forest(out.trace, influence, graph, y, s, pinned);
  return out;
}

inline TreeInference infer_tree(const InfluenceNet& net, const Graph& graph, const DiffusionObservation& y,
                                const SeedVector& s, const ObservedEdgeSet* pinned = nullptr) {
  return infer_tree(build_influence_matrix(net, graph), graph, y, s, pinned);
}

}  // namespace dipt
