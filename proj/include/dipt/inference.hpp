#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "graph.hpp"
#include "influence.hpp"
#include "numeric.hpp"
#include "seed_prior.hpp"
#include "training.hpp"
#include "tree.hpp"

namespace dipt {

struct InferenceConfig {
  std::size_t iterations = 100;
  double step_size = 0.05;
  double gamma = 0.1;  // weight of the proximity term ||z - z_bar||^2
  double seed_threshold = 0.5;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (iterations < 1) throw UsageError("iterations: must be at least 1");
    if (!(step_size >= 0.0)) throw UsageError("step_size: must be nonnegative");
    if (!(gamma >= 0.0)) throw UsageError("gamma: must be nonnegative");
    if (!(seed_threshold > 0.0 && seed_threshold < 1.0)) throw UsageError("seed_threshold: must lie in (0, 1)");
  }
};

/// Hard sources from seed probabilities: threshold on y-masked probabilities,
/// top-k fallback when nothing passes, then the most probable unreached
/// infected node is promoted until every infected node is reachable from a
/// source through infected nodes.
inline SeedVector select_seeds(std::span<const double> seed_prob, const DiffusionObservation& y, const Graph& graph,
                               double threshold, double mean_seed_count) {
  const std::size_t n = y.size();
  if (seed_prob.size() != n || graph.n_nodes() != n) throw ShapeError("select_seeds: shape mismatch");
  SeedVector s(n);
  if (y.count() == 0) return s;
  Vector masked(n, 0.0);
  for (NodeId i = 0; i < n; ++i) masked[i] = y[i] ? seed_prob[i] : 0.0;

  std::vector<NodeId> order;
  for (NodeId i = 0; i < n; ++i) {
    if (y[i]) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](NodeId a, NodeId b) { return masked[a] > masked[b]; });

  for (NodeId i : order) {
    if (masked[i] >= threshold) s.set(i, true);
  }
  if (s.count() == 0) {
    const auto k = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(mean_seed_count)), 1, order.size());
    for (std::size_t r = 0; r < k; ++r) s.set(order[r], true);
  }

  std::vector<std::uint8_t> reached(n, 0);
  std::deque<NodeId> queue;
  auto spread = [&](NodeId start) {
    reached[start] = 1;
    queue.push_back(start);
    while (!queue.empty()) {
      const NodeId u = queue.front();
      queue.pop_front();
      for (std::size_t e : graph.out_edges(u)) {
        const NodeId v = graph.edge(e).dst;
        if (y[v] && !reached[v]) {
          reached[v] = 1;
          queue.push_back(v);
        }
      }
    }
  };
  for (NodeId i : s.nodes()) {
    if (!reached[i]) spread(i);
  }
  for (NodeId i : order) {
    if (!reached[i]) {
      s.set(i, true);
      spread(i);
    }
  }
  return s;
}

/// Structure held fixed while differentiating the inference objective: the hard
/// seed estimate and the provenance of every propagated probability.
struct FrozenStructure {
  SeedVector s_hat;
  PropagationStructure propagation;
};

struct InferenceObjective {
  double value = 0.0;
  double seed_nll = 0.0;
  double fit = 0.0;        // 0.5 * ||y_hat - y||^2
  double proximity = 0.0;  // gamma * ||z - z_bar||^2
  Vector grad;             // d(value)/dz
  Vector seed_prob;
  Vector y_hat;
  FrozenStructure structure;
};

namespace detail {

inline void require_z_bar(const ModelState& models) {
  if (!models.prior.z_bar) {
    throw UsageError("latent inference needs z_bar; the checkpoint has none (retrain with at least one epoch)");
  }
}

inline FrozenStructure derive_structure(const ModelState& models, const InfluenceMatrix& influence,
                                        std::span<const double> seed_prob, const DiffusionObservation& y,
                                        const Graph& graph, const InferenceConfig& config) {
  FrozenStructure st;
  st.s_hat = select_seeds(seed_prob, y, graph, config.seed_threshold, models.mean_seed_count);
  const auto trace = propagate_masked(influence, seed_prob, std::max<std::size_t>(graph.n_nodes(), 1));
  st.propagation = propagation_structure(trace, influence);
  return st;
}

}  // namespace detail

/// Seed negative log-likelihood of the hard estimate under decode(z), plus
/// 0.5 * ||y_hat - y||^2 where y_hat is the converged masked propagation seeded by
/// decode(z), plus gamma * ||z - z_bar||^2. The gradient treats the hard seeds and
/// the propagation provenance as constants; pass `frozen` to pin them explicitly.
inline InferenceObjective inference_objective(ModelState& models, const InfluenceMatrix& influence,
                                              std::span<const double> z, const DiffusionObservation& y,
                                              const Graph& graph, const InferenceConfig& config,
                                              const FrozenStructure* frozen = nullptr) {
  detail::require_z_bar(models);
  const std::size_t n = graph.n_nodes();
  if (y.size() != n || models.prior.n_nodes() != n) throw ShapeError("inference_objective: node count mismatch");
  if (z.size() != models.prior.latent_dim) throw ShapeError("inference_objective: latent size mismatch");
  const Vector& z_bar = *models.prior.z_bar;

  Tape tape;
  const Tape::Var z_var = tape.leaf(Vector(z.begin(), z.end()));
  const Tape::Var p_var = clamp_probability(tape, mlp_forward(tape, models.prior.decoder, z_var));
  const Vector p = tape.value(p_var);

  InferenceObjective out;
  out.seed_prob = p;
  out.structure = frozen ? *frozen : detail::derive_structure(models, influence, p, y, graph, config);
  const SeedVector& s_hat = out.structure.s_hat;
  const PropagationStructure& prop = out.structure.propagation;

  Vector dp(n, 0.0);
  for (NodeId i = 0; i < n; ++i) {
    const double t = s_hat[i] ? 1.0 : 0.0;
    out.seed_nll -= t * std::log(p[i]) + (1.0 - t) * std::log(1.0 - p[i]);
    dp[i] -= t / p[i] - (1.0 - t) / (1.0 - p[i]);
  }
  out.y_hat.assign(n, 0.0);
  for (NodeId i = 0; i < n; ++i) {
    if (prop.root[i]) out.y_hat[i] = p[*prop.root[i]] * prop.multiplier[i];
    const double r = out.y_hat[i] - (y[i] ? 1.0 : 0.0);
    out.fit += 0.5 * r * r;
    if (prop.root[i]) dp[*prop.root[i]] += r * prop.multiplier[i];
  }
  tape.backward(p_var, dp);
  out.grad = tape.grad(z_var);
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double dz = z[k] - z_bar[k];
    out.proximity += config.gamma * dz * dz;
    out.grad[k] += 2.0 * config.gamma * dz;
  }
  out.value = out.seed_nll + out.fit + out.proximity;
  // The decoder's Params received gradients too; they are frozen here.
  zero_grads(models.prior.decoder.params());
  return out;
}

struct InferenceResult {
  Vector z_hat;
  Vector seed_prob;
  SeedVector s_hat;
  PropagationForest forest;
  Vector objective_trace;  // objective value at each iteration
  Vector best_trace;       // best-so-far value at each iteration
  Vector y_hat;
};

/// Test-time recovery: z starts at z_bar and takes `iterations` Adam steps on
/// the inference objective with all model parameters frozen; the best iterate
/// is kept. Sources and forest are then derived from the best z.
inline InferenceResult optimize_latent(ModelState& models, const Graph& graph, const DiffusionObservation& y,
                                       const InferenceConfig& config) {
  config.validate();
  detail::require_z_bar(models);
  const InfluenceMatrix influence = models.influence_matrix(graph);

  Vector z = *models.prior.z_bar;
  Vector best_z = z;
  double best = std::numeric_limits<double>::infinity();
  AdamState adam = make_adam(z.size(), config.step_size);
  InferenceResult result;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const InferenceObjective obj = inference_objective(models, influence, z, y, graph, config);
    if (!std::isfinite(obj.value)) throw NumericError("optimize_latent: non-finite objective at iteration " + std::to_string(it));
    result.objective_trace.push_back(obj.value);
    if (obj.value < best) {
      best = obj.value;
      best_z = z;
    }
    result.best_trace.push_back(best);
    if (it + 1 < config.iterations && config.step_size > 0.0) adam_step(adam, z, obj.grad);
  }

  result.z_hat = best_z;
  result.seed_prob = decode(models.prior, best_z);
  result.s_hat = select_seeds(result.seed_prob, y, graph, config.seed_threshold, models.mean_seed_count);
  const auto trace = propagate_masked(influence, result.seed_prob, std::max<std::size_t>(graph.n_nodes(), 1));
  result.y_hat = trace.final_prob();
  result.forest = infer_tree(influence, graph, y, result.s_hat).forest;
  return result;
}

}  // namespace dipt
