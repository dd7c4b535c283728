#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "graph.hpp"
#include "influence.hpp"
#include "numeric.hpp"
#include "rng.hpp"
#include "seed_prior.hpp"
#include "tree.hpp"

namespace dipt {

enum class Ablation { full, cosine_influence, no_alternating };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::cosine_influence: return "cosine_influence";
    case Ablation::no_alternating: return "no_alternating";
  }
  return "full";
}

inline Ablation ablation_from_string(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "cosine_influence") return Ablation::cosine_influence;
  if (s == "no_alternating") return Ablation::no_alternating;
  throw UsageError("unknown ablation '" + s + "' (expected full, cosine_influence or no_alternating)");
}

struct TrainConfig {
  double lr = 0.005;
  std::size_t epochs = 500;
  double lambda = 1.0;  // diffusion-loss weight
  double mu = 1.0;      // observed-edge weight
  std::size_t tree_refresh_every = 1;
  Ablation ablation = Ablation::full;
  std::uint64_t rng_seed = 0;
  std::size_t latent_dim = 8;

  void validate() const {
    if (!(lr > 0.0)) throw UsageError("lr: must be positive");
    if (!(lambda >= 0.0)) throw UsageError("lambda: must be nonnegative");
    if (!(mu >= 0.0)) throw UsageError("mu: must be nonnegative");
    if (tree_refresh_every < 1) throw UsageError("tree_refresh_every: must be at least 1");
    if (latent_dim < 1) throw UsageError("latent_dim: must be at least 1");
  }
};

struct TrainingSample {
  SeedVector s;
  DiffusionObservation y;
  ObservedEdgeSet observed_edges;
  PropagationForest current_tree;
};

/// Learned parameters (psi, phi1, phi2) plus optimiser state and the statistics inference needs.
struct ModelState {
  InfluenceNet net;
  VaePrior prior;
  InfluenceKind influence = InfluenceKind::learned;
  AdamState adam;
  double mean_seed_count = 0.0;

  static ModelState create(const Graph& graph, const TrainConfig& config) {
    Rng rng = make_stream(config.rng_seed, "init");
    ModelState m;
    m.net = InfluenceNet::create(graph.feature_dim(), rng);
    m.prior = VaePrior::create(graph.n_nodes(), config.latent_dim, rng);
    m.influence = config.ablation == Ablation::cosine_influence ? InfluenceKind::cosine : InfluenceKind::learned;
    m.adam = make_adam(parameter_count(m.params()), config.lr);
    return m;
  }

  /// Prior parameters first (encoder, decoder), then the influence network.
  std::vector<Param*> params() {
    auto out = prior.params();
    auto more = net.params();
    out.insert(out.end(), more.begin(), more.end());
    return out;
  }

  InfluenceMatrix influence_matrix(const Graph& graph) const {
    return influence == InfluenceKind::learned ? build_influence_matrix(net, graph) : build_cosine_matrix(graph);
  }
};

/// -sum over observed (u -> v) of log I(u, v), as a function of I.
inline EdgeLoss supervised_edge_terms(const InfluenceMatrix& influence, const Graph& graph,
                                      const ObservedEdgeSet& observed) {
  EdgeLoss out;
  out.edge_grad.assign(graph.n_edges(), 0.0);
  for (const auto& [u, v] : observed) {
    const auto e = graph.find_edge(u, v);
    if (!e) throw ContractError("observed edge (" + std::to_string(u) + "," + std::to_string(v) + ") is not a graph edge");
    const double p = influence.value(*e);
    out.value -= std::log(p);
    out.edge_grad[*e] -= 1.0 / p;
  }
  return out;
}

inline LossAndGrad supervised_edge_loss(InfluenceNet& net, const Graph& graph, const ObservedEdgeSet& observed) {
  auto tracked = build_influence_matrix_tracked(net, graph);
  const EdgeLoss terms = supervised_edge_terms(tracked.matrix, graph, observed);
  const auto params = net.params();
  zero_grads(params);
  if (!terms.edge_grad.empty()) tracked.tape.backward(tracked.scores, terms.edge_grad);
  return {terms.value, flatten_grads(params)};
}

struct TotalLoss {
  double value = 0.0;
  double neg_elbo = 0.0;
  double diffusion = 0.0;
  double supervised = 0.0;
  Vector grad;  // over ModelState::params()
};

/// Mean over samples of -ELBO + lambda * diffusion + mu * supervised, with each
/// sample's tree (current_tree) and ELBO noise held fixed.
inline TotalLoss dataset_loss(ModelState& models, const Graph& graph, const std::vector<TrainingSample>& samples,
                              const TrainConfig& config, const std::vector<Vector>& noise) {
  if (samples.empty()) throw UsageError("dataset_loss: empty dataset");
  if (noise.size() != samples.size()) throw ShapeError("dataset_loss: one noise vector per sample required");
  const double inv = 1.0 / static_cast<double>(samples.size());
  const auto prior_params = models.prior.params();
  const std::size_t n_prior = parameter_count(prior_params);
  TotalLoss out;
  out.grad.assign(parameter_count(models.params()), 0.0);

  for (std::size_t k = 0; k < samples.size(); ++k) {
    const ElboResult e = elbo(models.prior, samples[k].s, noise[k]);
    out.neg_elbo -= e.value * inv;
    for (std::size_t i = 0; i < n_prior; ++i) out.grad[i] -= e.grad[i] * inv;
  }

  const bool learned = models.influence == InfluenceKind::learned;
  std::optional<TrackedInfluence> tracked;
  InfluenceMatrix matrix;
  if (learned) {
    tracked = build_influence_matrix_tracked(models.net, graph);
    matrix = tracked->matrix;
  } else {
    matrix = build_cosine_matrix(graph);
  }
  Vector edge_grad(graph.n_edges(), 0.0);
  for (const auto& sample : samples) {
    const EdgeLoss d = diffusion_loss_terms(matrix, graph, sample.y, sample.s, sample.current_tree);
    const EdgeLoss o = supervised_edge_terms(matrix, graph, sample.observed_edges);
    out.diffusion += d.value * inv;
    out.supervised += o.value * inv;
    for (std::size_t e = 0; e < edge_grad.size(); ++e) {
      edge_grad[e] += (config.lambda * d.edge_grad[e] + config.mu * o.edge_grad[e]) * inv;
    }
  }
  if (learned && !edge_grad.empty()) {
    const auto net_params = models.net.params();
    zero_grads(net_params);
    tracked->tape.backward(tracked->scores, edge_grad);
    const Vector g = flatten_grads(net_params);
    std::copy(g.begin(), g.end(), out.grad.begin() + static_cast<std::ptrdiff_t>(n_prior));
  }
  out.value = out.neg_elbo + config.lambda * out.diffusion + config.mu * out.supervised;
  return out;
}

inline TotalLoss total_loss(ModelState& models, const Graph& graph, const TrainingSample& sample,
                            const TrainConfig& config, std::span<const double> noise) {
  return dataset_loss(models, graph, {sample}, config, {Vector(noise.begin(), noise.end())});
}

struct EpochRecord {
  std::size_t epoch = 0;
  double total = 0.0;
  double neg_elbo = 0.0;
  double diffusion = 0.0;
  double supervised = 0.0;
};

struct TrainResult {
  ModelState models;
  std::vector<EpochRecord> history;
  bool z_bar_defined = false;
};

/// Re-infers each sample's tree with the current parameters and its true seeds.
inline void refresh_trees(const ModelState& models, const Graph& graph, std::vector<TrainingSample>& dataset) {
  const InfluenceMatrix matrix = models.influence_matrix(graph);
  for (auto& sample : dataset) {
    sample.current_tree = infer_tree(matrix, graph, sample.y, sample.s, &sample.observed_edges).forest;
  }
}

inline Vector mean_posterior_mean(const VaePrior& prior, const std::vector<TrainingSample>& dataset) {
  Vector z(prior.latent_dim, 0.0);
  for (const auto& sample : dataset) {
    const Posterior post = encode(prior, sample.s);
    for (std::size_t k = 0; k < z.size(); ++k) z[k] += post.mu[k];
  }
  for (double& x : z) x /= static_cast<double>(dataset.size());
  return z;
}

/// Alternating optimisation: every tree_refresh_every epochs the trees are
/// re-inferred with parameters frozen, then one full-batch Adam step is taken
/// on the total loss with trees frozen.
inline TrainResult train_alternating(const Graph& graph, std::vector<TrainingSample> dataset,
                                     const TrainConfig& config) {
  config.validate();
  if (dataset.empty()) throw UsageError("train_alternating: empty dataset");
  for (std::size_t k = 0; k < dataset.size(); ++k) {
    if (dataset[k].s.size() != graph.n_nodes() || dataset[k].y.size() != graph.n_nodes()) {
      throw ShapeError("train_alternating: sample " + std::to_string(k) + " does not match the graph size");
    }
    for (NodeId v = 0; v < graph.n_nodes(); ++v) {
      if (dataset[k].s[v] && !dataset[k].y[v]) {
        throw ContractError("train_alternating: sample " + std::to_string(k) + " has an uninfected seed");
      }
    }
  }

  TrainResult result{ModelState::create(graph, config), {}, false};
  ModelState& models = result.models;
  double seeds = 0.0;
  for (const auto& sample : dataset) seeds += static_cast<double>(sample.s.count());
  models.mean_seed_count = seeds / static_cast<double>(dataset.size());

  refresh_trees(models, graph, dataset);
  Rng noise_rng = make_stream(config.rng_seed, "training");
  const auto params = models.params();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const bool refresh = config.ablation != Ablation::no_alternating && epoch > 0 &&
                         epoch % config.tree_refresh_every == 0;
    if (refresh) refresh_trees(models, graph, dataset);

    std::vector<Vector> noise(dataset.size(), Vector(models.prior.latent_dim));
    for (auto& v : noise) {
      for (double& x : v) x = noise_rng.normal();
    }
    const TotalLoss loss = dataset_loss(models, graph, dataset, config, noise);
    if (!std::isfinite(loss.value)) {
      throw NumericError("train_alternating: non-finite loss at epoch " + std::to_string(epoch));
    }
    result.history.push_back({epoch, loss.value, loss.neg_elbo, loss.diffusion, loss.supervised});

    Vector theta = flatten_values(params);
    adam_step(models.adam, theta, loss.grad);
    assign_values(params, theta);
  }

  if (config.epochs > 0) {
    models.prior.z_bar = mean_posterior_mean(models.prior, dataset);
    result.z_bar_defined = true;
  }
  return result;
}

}  // namespace dipt
