#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "graph.hpp"
#include "numeric.hpp"

namespace dipt {

// Influence network f_psi: a shared three-layer encoder embeds both endpoint
// feature vectors, scaled dot-product attention (query = child embedding,
// keys/values = {parent, child} embeddings) fuses them, and a two-layer
// scorer maps [attended, child] to a transmission probability.
struct InfluenceNet {
  static constexpr std::size_t kEmbeddingDim = 16;

  Mlp encoder;  // F -> 64 -> 32 -> 16
  Mlp scorer;   // 32 -> 16 -> 1

  static InfluenceNet create(std::size_t feature_dim, Rng& rng) {
    InfluenceNet net;
    net.encoder = make_mlp({feature_dim, 64, 32, kEmbeddingDim},
                           {Activation::tanh, Activation::tanh, Activation::tanh}, rng);
    net.scorer = make_mlp({2 * kEmbeddingDim, 16, 1}, {Activation::tanh, Activation::sigmoid}, rng);
    return net;
  }

  std::size_t feature_dim() const { return encoder.in_dim(); }

  std::vector<Param*> params() {
    auto out = encoder.params();
    auto more = scorer.params();
    out.insert(out.end(), more.begin(), more.end());
    return out;
  }
};

enum class InfluenceKind { learned, cosine };

inline std::string to_string(InfluenceKind k) { return k == InfluenceKind::learned ? "learned" : "cosine"; }

namespace detail {

inline double score_from_embeddings(const InfluenceNet& net, const Vector& parent_emb, const Vector& child_emb) {
  const Vector attended = attention_fuse(child_emb, {parent_emb, child_emb}, {parent_emb, child_emb},
                                         InfluenceNet::kEmbeddingDim);
  Vector fused = attended;
  fused.insert(fused.end(), child_emb.begin(), child_emb.end());
  return clamp_probability(mlp_forward(net.scorer, fused)[0]);
}

inline void check_feature_dim(const InfluenceNet& net, std::size_t dim) {
  if (dim != net.feature_dim()) {
    throw ShapeError("influence: feature dimension " + std::to_string(dim) + " does not match network input " +
                     std::to_string(net.feature_dim()));
  }
}

}  // namespace detail

/// f_psi(F_child, F_parent): probability that the parent infects the child.
inline double influence_score(const InfluenceNet& net, std::span<const double> parent_features,
                              std::span<const double> child_features) {
  detail::check_feature_dim(net, parent_features.size());
  detail::check_feature_dim(net, child_features.size());
  return detail::score_from_embeddings(net, mlp_forward(net.encoder, parent_features),
                                       mlp_forward(net.encoder, child_features));
}

/// Ablated influence: cosine similarity mapped from [-1, 1] to [0, 1], then clamped.
inline double cosine_influence(std::span<const double> parent_features, std::span<const double> child_features) {
  if (parent_features.size() != child_features.size()) throw ShapeError("cosine_influence: dimension mismatch");
  const double na = std::sqrt(dot(parent_features, parent_features));
  const double nb = std::sqrt(dot(child_features, child_features));
  if (na == 0.0 || nb == 0.0) return 0.5;
  const double c = std::clamp(dot(parent_features, child_features) / (na * nb), -1.0, 1.0);
  return clamp_probability((c + 1.0) / 2.0);
}

// -----------------------------------------------------------------------------
// InfluenceMatrix
// -----------------------------------------------------------------------------

/// Sparse influence I: entry (j, i) is the probability that j infects i.
/// Rows are sources, columns targets. Entries absent from the map are zero.
class InfluenceMatrix {
 public:
  InfluenceMatrix() = default;

  InfluenceMatrix(std::size_t n_nodes, std::vector<DirectedEdge> edges, Vector prob)
      : n_(n_nodes), edges_(std::move(edges)), prob_(std::move(prob)) {
    if (edges_.size() != prob_.size()) throw ShapeError("InfluenceMatrix: one probability per edge required");
    for (std::size_t e = 0; e < edges_.size(); ++e) {
      if (edges_[e].src >= n_ || edges_[e].dst >= n_) throw ContractError("InfluenceMatrix: edge out of range");
      if (e > 0 && !(edges_[e - 1] < edges_[e])) throw ContractError("InfluenceMatrix: edges must be sorted and unique");
      if (!(prob_[e] >= kProbFloor && prob_[e] <= 1.0 - kProbFloor)) {
        throw ContractError("InfluenceMatrix: value outside [1e-7, 1-1e-7] on edge (" + std::to_string(edges_[e].src) +
                            "," + std::to_string(edges_[e].dst) + ")");
      }
    }
    incoming_.assign(n_, {});
    for (std::size_t e = 0; e < edges_.size(); ++e) incoming_[edges_[e].dst].push_back(e);
  }

  /// Entries aligned with graph.edges().
  static InfluenceMatrix on_graph(const Graph& graph, Vector prob) {
    return InfluenceMatrix(graph.n_nodes(), graph.edges(), std::move(prob));
  }

  std::size_t n_nodes() const { return n_; }
  std::size_t n_entries() const { return edges_.size(); }
  const std::vector<DirectedEdge>& edges() const { return edges_; }
  const Vector& values() const { return prob_; }
  double value(std::size_t e) const { return prob_[e]; }

  /// Entry indices whose target is i, ordered by source id.
  const std::vector<std::size_t>& incoming(NodeId i) const { return incoming_[i]; }

  double at(NodeId j, NodeId i) const {
    auto it = std::lower_bound(edges_.begin(), edges_.end(), DirectedEdge{j, i});
    if (it == edges_.end() || *it != DirectedEdge{j, i}) return 0.0;
    return prob_[static_cast<std::size_t>(it - edges_.begin())];
  }

  /// Keeps only entries whose source and target are both infected.
  InfluenceMatrix restrict_to(const DiffusionObservation& y) const {
    std::vector<DirectedEdge> edges;
    Vector prob;
    for (std::size_t e = 0; e < edges_.size(); ++e) {
      if (y[edges_[e].src] && y[edges_[e].dst]) {
        edges.push_back(edges_[e]);
        prob.push_back(prob_[e]);
      }
    }
    return InfluenceMatrix(n_, std::move(edges), std::move(prob));
  }

 private:
  std::size_t n_ = 0;
  std::vector<DirectedEdge> edges_;
  Vector prob_;
  std::vector<std::vector<std::size_t>> incoming_;
};

/// One entry per directed graph edge (j, i) = influence_score(net, F_j, F_i).
inline InfluenceMatrix build_influence_matrix(const InfluenceNet& net, const Graph& graph) {
  detail::check_feature_dim(net, graph.feature_dim());
  std::vector<Vector> emb(graph.n_nodes());
  for (NodeId v = 0; v < graph.n_nodes(); ++v) emb[v] = mlp_forward(net.encoder, graph.features_of(v));
  Vector prob(graph.n_edges());
  for (std::size_t e = 0; e < graph.n_edges(); ++e) {
    const auto& [j, i] = graph.edge(e);
    prob[e] = detail::score_from_embeddings(net, emb[j], emb[i]);
  }
  return InfluenceMatrix::on_graph(graph, std::move(prob));
}

inline InfluenceMatrix build_cosine_matrix(const Graph& graph) {
  Vector prob(graph.n_edges());
  for (std::size_t e = 0; e < graph.n_edges(); ++e) {
    const auto& [j, i] = graph.edge(e);
    prob[e] = cosine_influence(graph.features_of(j), graph.features_of(i));
  }
  return InfluenceMatrix::on_graph(graph, std::move(prob));
}

/// Influence matrix together with the tape that produced it; backward through
/// `scores` with one gradient entry per graph edge accumulates into net's Params.
struct TrackedInfluence {
  Tape tape;
  Tape::Var scores = 0;
  InfluenceMatrix matrix;
};

inline TrackedInfluence build_influence_matrix_tracked(InfluenceNet& net, const Graph& graph) {
  detail::check_feature_dim(net, graph.feature_dim());
  TrackedInfluence out;
  Tape& tape = out.tape;
  std::vector<Tape::Var> emb(graph.n_nodes());
  for (NodeId v = 0; v < graph.n_nodes(); ++v) {
    const auto f = graph.features_of(v);
    emb[v] = mlp_forward(tape, net.encoder, tape.leaf(Vector(f.begin(), f.end())));
  }
  std::vector<Tape::Var> scores(graph.n_edges());
  for (std::size_t e = 0; e < graph.n_edges(); ++e) {
    const auto& [j, i] = graph.edge(e);
    const Tape::Var attended = attention_fuse(tape, emb[i], {emb[j], emb[i]}, {emb[j], emb[i]},
                                              InfluenceNet::kEmbeddingDim);
    const Tape::Var fused = concat(tape, attended, emb[i]);
    scores[e] = clamp_probability(tape, mlp_forward(tape, net.scorer, fused));
  }
  if (scores.empty()) {
    out.scores = tape.leaf({});
  } else {
    out.scores = stack(tape, scores);
  }
  out.matrix = InfluenceMatrix::on_graph(graph, tape.value(out.scores));
  return out;
}

// -----------------------------------------------------------------------------
// Diffusion likelihood
// -----------------------------------------------------------------------------

/// A scalar loss and its gradient with respect to each graph edge's influence value.
struct EdgeLoss {
  double value = 0.0;
  Vector edge_grad;
};

/// Binary cross-entropy of the observation given a forest, as a function of I.
/// Infected non-seeds contribute -log I(parent, n). Uninfected nodes with at
/// least one infected in-neighbour contribute -log(1 - max_j I(j, n)); other
/// uninfected nodes carry no signal and contribute nothing.
inline EdgeLoss diffusion_loss_terms(const InfluenceMatrix& influence, const Graph& graph, const DiffusionObservation& y,
                                     const SeedVector& s, const PropagationForest& forest) {
  if (influence.n_entries() != graph.n_edges()) throw ShapeError("diffusion loss: influence not aligned with graph");
  EdgeLoss out;
  out.edge_grad.assign(graph.n_edges(), 0.0);
  for (NodeId n = 0; n < graph.n_nodes(); ++n) {
    if (y[n]) {
      if (s[n]) continue;
      const auto e = graph.find_edge(*forest.parent[n], n);
      const double p = influence.value(*e);
      out.value -= std::log(p);
      out.edge_grad[*e] -= 1.0 / p;
      continue;
    }
    std::optional<std::size_t> best;
    for (std::size_t e : graph.in_edges(n)) {
      if (!y[graph.edge(e).src]) continue;
      if (!best || influence.value(e) > influence.value(*best)) best = e;
    }
    if (!best) continue;
    const double p = influence.value(*best);
    out.value -= std::log(1.0 - p);
    out.edge_grad[*best] += 1.0 / (1.0 - p);
  }
  return out;
}

inline void require_valid_forest(const PropagationForest& forest, const Graph& graph, const DiffusionObservation& y,
                                 const SeedVector& s) {
  const auto violations = validate_forest(forest, graph, y, s);
  if (!violations.empty()) throw ContractError("invalid propagation forest: " + violations.front());
}

/// sum over scored nodes of log P(y_n | parent); the negation of the diffusion loss value.
inline double diffusion_log_likelihood(const InfluenceMatrix& influence, const Graph& graph,
                                       const DiffusionObservation& y, const SeedVector& s,
                                       const PropagationForest& forest) {
  require_valid_forest(forest, graph, y, s);
  return -diffusion_loss_terms(influence, graph, y, s, forest).value;
}

inline double diffusion_log_likelihood(const InfluenceNet& net, const Graph& graph, const DiffusionObservation& y,
                                       const SeedVector& s, const PropagationForest& forest) {
  return diffusion_log_likelihood(build_influence_matrix(net, graph), graph, y, s, forest);
}

struct LossAndGrad {
  double value = 0.0;
  Vector grad;
};

/// Diffusion loss and its gradient with respect to net.params() (flattened in order).
inline LossAndGrad diffusion_loss(InfluenceNet& net, const Graph& graph, const DiffusionObservation& y,
                                  const SeedVector& s, const PropagationForest& forest) {
  require_valid_forest(forest, graph, y, s);
  auto tracked = build_influence_matrix_tracked(net, graph);
  const EdgeLoss terms = diffusion_loss_terms(tracked.matrix, graph, y, s, forest);
  const auto params = net.params();
  zero_grads(params);
  if (!terms.edge_grad.empty()) tracked.tape.backward(tracked.scores, terms.edge_grad);
  return {terms.value, flatten_grads(params)};
}

}  // namespace dipt
