#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "graph.hpp"
#include "numeric.hpp"
#include "rng.hpp"

namespace dipt {

// =============================================================================
// SI diffusion on attribute graphs
// =============================================================================

struct SiConfig {
  double seed_fraction = 0.10;
  std::size_t iterations = 200;
  double beta = 0.1;  // per-edge, per-iteration transmission probability
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (!(seed_fraction > 0.0 && seed_fraction <= 1.0)) throw UsageError("seed_fraction: must lie in (0, 1]");
    if (!(beta >= 0.0 && beta <= 1.0)) throw UsageError("beta: must lie in [0, 1]");
  }
};

/// Per-edge transmission probability (infector, target). Overrides SiConfig::beta when set.
using TransmissionFn = std::function<double(NodeId src, NodeId dst)>;

struct SiResult {
  SeedVector s;
  DiffusionObservation y;
  PropagationForest forest;               // activation_step = infection round
  std::vector<std::size_t> infected_count;  // after each round, index 0 = seeds only
};

/// Seeds ceil(seed_fraction * |V|) nodes uniformly, then runs `iterations`
/// synchronous rounds: every node infected before the round tries each
/// susceptible out-neighbour independently. The first successful infector in
/// id order becomes the parent.
inline SiResult simulate_si(const Graph& graph, const SiConfig& config, const TransmissionFn& transmission = {}) {
  config.validate();
  Rng rng = make_stream(config.rng_seed, "simulation");
  const std::size_t n = graph.n_nodes();
  SiResult out{SeedVector(n), DiffusionObservation(n), PropagationForest(n), {}};
  if (n == 0) return out;

  const auto k = std::min<std::size_t>(n, static_cast<std::size_t>(std::ceil(config.seed_fraction * static_cast<double>(n) - 1e-9)));
  std::vector<NodeId> nodes(n);
  std::iota(nodes.begin(), nodes.end(), 0);
  for (std::size_t i = 0; i < k; ++i) std::swap(nodes[i], nodes[i + rng.index(n - i)]);
  for (std::size_t i = 0; i < k; ++i) {
    out.s.set(nodes[i], true);
    out.y.set(nodes[i], true);
    out.forest.activation_step[nodes[i]] = 0;
  }
  out.infected_count.push_back(k);

  std::size_t infected = k;
  for (std::size_t round = 1; round <= config.iterations; ++round) {
    for (NodeId u = 0; u < n; ++u) {
      if (!out.y[u] || *out.forest.activation_step[u] >= round) continue;
      for (std::size_t e : graph.out_edges(u)) {
        const NodeId v = graph.edge(e).dst;
        if (out.y[v]) continue;
        const double p = transmission ? transmission(u, v) : config.beta;
        if (rng.bernoulli(p)) {
          out.y.set(v, true);
          out.forest.parent[v] = u;
          out.forest.activation_step[v] = round;
          ++infected;
        }
      }
    }
    out.infected_count.push_back(infected);
  }
  return out;
}

// =============================================================================
// Planted-influence worlds: random feature graphs whose transmission
// probability is a fixed logistic function of endpoint features.
// =============================================================================

struct PlantedWorldConfig {
  std::size_t n_nodes = 50;
  std::size_t feature_dim = 8;
  double mean_degree = 6.0;
  double strength = 2.5;
  double bias = -1.5;
  std::uint64_t rng_seed = 0;
};

struct PlantedWorld {
  Graph graph;
  Vector source_weights;
  Vector target_weights;
  double strength = 0.0;
  double bias = 0.0;

  /// sigmoid(strength * (a . F_src + b . F_dst) + bias)
  double transmission(NodeId src, NodeId dst) const {
    const double z = strength * (dot(source_weights, graph.features_of(src)) + dot(target_weights, graph.features_of(dst))) + bias;
    return sigmoid(z);
  }

  TransmissionFn transmission_fn() const {
    return [this](NodeId s, NodeId d) { return transmission(s, d); };
  }
};

/// Undirected Erdos-Renyi topology (symmetrised), standard-normal features,
/// random unit weight vectors.
inline PlantedWorld make_planted_world(const PlantedWorldConfig& config) {
  Rng rng = make_stream(config.rng_seed, "world");
  const std::size_t n = config.n_nodes;
  const std::size_t f = config.feature_dim;
  DenseMatrix features(n, f);
  for (double& x : features.data()) x = rng.normal();
  const double p = n > 1 ? std::min(1.0, config.mean_degree / static_cast<double>(n - 1)) : 0.0;
  std::vector<DirectedEdge> edges;
  for (NodeId u = 0; u < n; ++u) {
    for (NodeId v = u + 1; v < n; ++v) {
      if (rng.bernoulli(p)) {
        edges.push_back({u, v});
        edges.push_back({v, u});
      }
    }
  }
  auto unit = [&] {
    Vector w(f);
    for (double& x : w) x = rng.normal();
    const double norm = std::sqrt(dot(w, w));
    for (double& x : w) x /= norm;
    return w;
  };
  PlantedWorld world;
  world.graph = Graph(n, std::move(edges), std::move(features));
  world.source_weights = unit();
  world.target_weights = unit();
  world.strength = config.strength;
  world.bias = config.bias;
  return world;
}

// =============================================================================
// Mobility and the spatial SIR simulator
// =============================================================================

struct MobilityMatrix {
  DenseMatrix flows;  // flows(A, B): individuals moving from A to B
  std::vector<std::array<double, 2>> coords;
  std::vector<std::uint64_t> populations;

  std::size_t n_counties() const { return flows.rows(); }
};

/// Gravity model: off-diagonal flow(A, B) = gravity * pop_A * pop_B / d(A, B)^2
/// on random planar coordinates in the unit square (d^2 floored at 1e-4);
/// the diagonal self-flow equals the county population.
inline MobilityMatrix synth_mobility(std::size_t n_counties, const std::vector<std::uint64_t>& populations,
                                     std::uint64_t rng_seed, double gravity = 1e-7) {
  if (n_counties < 2) throw UsageError("synth_mobility: need at least two counties");
  if (populations.size() != n_counties) throw UsageError("synth_mobility: one population per county required");
  Rng rng = make_stream(rng_seed, "mobility");
  MobilityMatrix m;
  m.populations = populations;
  m.coords.resize(n_counties);
  for (auto& c : m.coords) c = {rng.uniform(), rng.uniform()};
  m.flows = DenseMatrix(n_counties, n_counties);
  for (std::size_t a = 0; a < n_counties; ++a) {
    for (std::size_t b = 0; b < n_counties; ++b) {
      const double pa = static_cast<double>(populations[a]);
      if (a == b) {
        m.flows(a, b) = pa;
        continue;
      }
      const double dx = m.coords[a][0] - m.coords[b][0];
      const double dy = m.coords[a][1] - m.coords[b][1];
      const double d2 = std::max(dx * dx + dy * dy, 1e-4);
      m.flows(a, b) = gravity * pa * static_cast<double>(populations[b]) / d2;
    }
  }
  return m;
}

namespace detail {

inline std::size_t sample_cumulative(const Vector& cumulative, Rng& rng) {
  const double u = rng.uniform() * cumulative.back();
  auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  if (it == cumulative.end()) --it;
  // Skip zero-weight slots that share the same cumulative value.
  return static_cast<std::size_t>(it - cumulative.begin());
}

}  // namespace detail

/// Precomputed cumulative out-flow rows and in-flow columns.
class MobilitySampler {
 public:
  explicit MobilitySampler(const DenseMatrix& flows) : n_(flows.rows()) {
    if (flows.rows() != flows.cols()) throw ShapeError("MobilitySampler: flow matrix must be square");
    out_.assign(n_, Vector(n_));
    in_.assign(n_, Vector(n_));
    for (std::size_t a = 0; a < n_; ++a) {
      double acc = 0.0;
      for (std::size_t b = 0; b < n_; ++b) {
        const double f = flows(a, b);
        if (!(f >= 0.0) || !std::isfinite(f)) throw ContractError("MobilitySampler: flows must be finite and nonnegative");
        acc += f;
        out_[a][b] = acc;
      }
    }
    for (std::size_t x = 0; x < n_; ++x) {
      double acc = 0.0;
      for (std::size_t b = 0; b < n_; ++b) {
        acc += flows(b, x);
        in_[x][b] = acc;
      }
    }
  }

  std::size_t n_counties() const { return n_; }

  /// County drawn in proportion to the out-flows of `source`.
  std::size_t sample_out(std::size_t source, Rng& rng) const {
    if (!(out_.at(source).back() > 0.0)) {
      throw ContractError("sampling: county " + std::to_string(source) + " has no out-flow mass");
    }
    return detail::sample_cumulative(out_[source], rng);
  }

  /// County drawn in proportion to the in-flows of `hub`.
  std::size_t sample_in(std::size_t hub, Rng& rng) const {
    if (!(in_.at(hub).back() > 0.0)) {
      throw ContractError("sampling: county " + std::to_string(hub) + " has no in-flow mass");
    }
    return detail::sample_cumulative(in_[hub], rng);
  }

  /// Two-stage draw: X by out-flows of source, then B by in-flows of X.
  std::size_t sample_secondary(std::size_t source, Rng& rng) const { return sample_in(sample_out(source, rng), rng); }

 private:
  std::size_t n_;
  std::vector<Vector> out_;
  std::vector<Vector> in_;
};

inline std::size_t sample_secondary_county(std::size_t source_county, const DenseMatrix& flows, Rng& rng) {
  return MobilitySampler(flows).sample_secondary(source_county, rng);
}

struct IdssConfig {
  std::size_t n_counties = 0;
  std::vector<std::uint64_t> populations;
  std::size_t infectious_period_days = 6;
  Vector daily_infection_prob{0.2, 0.3, 0.3, 0.2, 0.1, 0.1};
  std::size_t n_airport_counties = 72;
  std::size_t n_initial_sources = 2;
  std::size_t n_initial_infected = 10;
  std::size_t horizon_days = 90;
  std::uint64_t rng_seed = 0;

  double r0() const { return std::accumulate(daily_infection_prob.begin(), daily_infection_prob.end(), 0.0); }

  void validate() const {
    if (n_counties == 0) throw UsageError("n_counties: must be positive");
    if (populations.size() != n_counties) throw UsageError("populations: one entry per county required");
    for (auto p : populations) {
      if (p == 0) throw UsageError("populations: every county needs a positive population");
    }
    if (infectious_period_days == 0) throw UsageError("infectious_period_days: must be positive");
    if (daily_infection_prob.size() != infectious_period_days) {
      throw UsageError("daily_infection_prob: needs one entry per infectious day");
    }
    for (double p : daily_infection_prob) {
      if (!(p >= 0.0 && p <= 1.0)) throw UsageError("daily_infection_prob: entries must lie in [0, 1]");
    }
    if (n_airport_counties == 0) throw UsageError("n_airport_counties: must be positive");
  }
};

struct Individual {
  std::size_t id = 0;
  std::size_t county = 0;
  std::size_t infected_day = 0;
  std::optional<std::size_t> recovered_day;
  std::optional<std::size_t> parent;  // individual id
};

struct InfectionForest {
  std::vector<Individual> individuals;  // id == index
};

/// County compartments per day: series[day][county], day 0 after seeding.
struct CompartmentSeries {
  std::vector<std::vector<std::uint64_t>> susceptible;
  std::vector<std::vector<std::uint64_t>> infectious;
  std::vector<std::vector<std::uint64_t>> recovered;
};

struct IdssResult {
  InfectionForest forest;
  CompartmentSeries series;
  std::vector<std::size_t> source_counties;
};

/// Spatial compartmental SIR with individual-level who-infected-whom records.
/// Each day every infectious individual of infection age a (1..n) makes one
/// attempt that succeeds with probability P[a-1]; the target county comes from
/// the two-stage mobility draw and the attempt fails if it has no susceptibles.
/// Individuals recover on day infected_day + n.
inline IdssResult simulate_idss(const IdssConfig& config, const MobilityMatrix& mobility) {
  config.validate();
  const std::size_t n = config.n_counties;
  if (mobility.n_counties() != n) throw UsageError("simulate_idss: mobility matrix does not match n_counties");
  Rng rng = make_stream(config.rng_seed, "simulation");
  const MobilitySampler sampler(mobility.flows);

  std::vector<std::uint64_t> S = config.populations;
  std::vector<std::uint64_t> I(n, 0), R(n, 0);
  IdssResult out;
  auto snapshot = [&] {
    out.series.susceptible.push_back(S);
    out.series.infectious.push_back(I);
    out.series.recovered.push_back(R);
  };
  auto infect = [&](std::size_t county, std::size_t day, std::optional<std::size_t> parent) -> bool {
    if (S[county] == 0) return false;
    --S[county];
    ++I[county];
    const std::size_t id = out.forest.individuals.size();
    out.forest.individuals.push_back({id, county, day, std::nullopt, parent});
    return true;
  };

  // Airport pool: the largest-population counties.
  std::vector<std::size_t> by_pop(n);
  std::iota(by_pop.begin(), by_pop.end(), 0);
  std::stable_sort(by_pop.begin(), by_pop.end(),
                   [&](std::size_t a, std::size_t b) { return config.populations[a] > config.populations[b]; });
  const std::size_t pool = std::min(config.n_airport_counties, n);
  std::vector<std::size_t> airports(by_pop.begin(), by_pop.begin() + static_cast<std::ptrdiff_t>(pool));
  const std::size_t n_sources = std::min(config.n_initial_sources, pool);
  for (std::size_t i = 0; i < n_sources; ++i) std::swap(airports[i], airports[i + rng.index(pool - i)]);
  out.source_counties.assign(airports.begin(), airports.begin() + static_cast<std::ptrdiff_t>(n_sources));

  if (n_sources > 0) {
    for (std::size_t k = 0; k < config.n_initial_infected; ++k) {
      const std::size_t source = out.source_counties[rng.index(n_sources)];
      infect(sampler.sample_out(source, rng), 0, std::nullopt);
    }
  }
  snapshot();

  std::vector<std::size_t> active;
  for (const auto& ind : out.forest.individuals) active.push_back(ind.id);
  const std::size_t period = config.infectious_period_days;
  for (std::size_t day = 1; day <= config.horizon_days; ++day) {
    std::vector<std::size_t> still_active;
    const std::size_t n_active = active.size();
    for (std::size_t k = 0; k < n_active; ++k) {
      const std::size_t id = active[k];
      const std::size_t age = day - out.forest.individuals[id].infected_day;
      if (rng.bernoulli(config.daily_infection_prob[age - 1])) {
        const std::size_t target = sampler.sample_secondary(out.forest.individuals[id].county, rng);
        if (infect(target, day, id)) still_active.push_back(out.forest.individuals.size() - 1);
      }
      if (age >= period) {
        Individual& ind = out.forest.individuals[id];
        --I[ind.county];
        ++R[ind.county];
        ind.recovered_day = day;
      } else {
        still_active.push_back(id);
      }
    }
    std::sort(still_active.begin(), still_active.end());
    active = std::move(still_active);
    snapshot();
  }
  return out;
}

// =============================================================================
// County-level learning instance from an individual-level forest
// =============================================================================

struct CountyInstance {
  Graph graph;
  SeedVector s;
  DiffusionObservation y;
  PropagationForest forest;
};

/// Node features: [population / max population, self-flow share of out-flow,
/// log1p(cross-county out-flow) / max of the same, x, y].
inline DenseMatrix county_features(const MobilityMatrix& mobility) {
  const std::size_t n = mobility.n_counties();
  DenseMatrix f(n, 5);
  double max_pop = 0.0;
  for (auto p : mobility.populations) max_pop = std::max(max_pop, static_cast<double>(p));
  Vector cross(n, 0.0);
  double max_cross = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    double total = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      total += mobility.flows(a, b);
      if (a != b) cross[a] += mobility.flows(a, b);
    }
    cross[a] = std::log1p(cross[a]);
    max_cross = std::max(max_cross, cross[a]);
    f(a, 0) = max_pop > 0.0 ? static_cast<double>(mobility.populations[a]) / max_pop : 0.0;
    f(a, 1) = total > 0.0 ? mobility.flows(a, a) / total : 0.0;
    f(a, 3) = mobility.coords.size() == n ? mobility.coords[a][0] : 0.0;
    f(a, 4) = mobility.coords.size() == n ? mobility.coords[a][1] : 0.0;
  }
  for (std::size_t a = 0; a < n; ++a) f(a, 2) = max_cross > 0.0 ? cross[a] / max_cross : 0.0;
  return f;
}

/// Counties become nodes. Two counties are linked (both directions) when some
/// county receives positive flow from both, i.e. a transmission between them
/// is possible under the two-stage mobility draw. The county forest keeps, for
/// each non-source county, the county of the individual who infected its first case.
inline CountyInstance forest_to_county_instance(const InfectionForest& forest, const MobilityMatrix& mobility) {
  const std::size_t n = mobility.n_counties();
  if (forest.individuals.empty()) throw UsageError("forest_to_county_instance: empty forest");
  std::vector<DirectedEdge> edges;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      if (a == b) continue;
      bool linked = false;
      for (std::size_t x = 0; x < n && !linked; ++x) linked = mobility.flows(a, x) > 0.0 && mobility.flows(b, x) > 0.0;
      if (linked) edges.push_back({a, b});
    }
  }
  CountyInstance inst{Graph(n, std::move(edges), county_features(mobility)), SeedVector(n), DiffusionObservation(n),
                      PropagationForest(n)};

  std::vector<std::optional<std::size_t>> first_case(n);
  for (const auto& ind : forest.individuals) {
    if (ind.county >= n) throw ContractError("forest_to_county_instance: county id out of range");
    inst.y.set(ind.county, true);
    if (!ind.parent) inst.s.set(ind.county, true);
    auto& fc = first_case[ind.county];
    if (!fc || ind.infected_day < forest.individuals[*fc].infected_day) fc = ind.id;
  }
  for (std::size_t c = 0; c < n; ++c) {
    if (!inst.y[c]) continue;
    const Individual& first = forest.individuals[*first_case[c]];
    inst.forest.activation_step[c] = inst.s[c] ? 0 : first.infected_day;
    if (inst.s[c]) continue;
    const std::size_t parent_county = forest.individuals[*first.parent].county;
    if (parent_county != c) inst.forest.parent[c] = parent_county;
  }
  return inst;
}

}  // namespace dipt
