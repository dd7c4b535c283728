#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dipt/dipt.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dipt;

namespace {

constexpr const char* kVersion = "0.1.0";

// -----------------------------------------------------------------------------
// Run bookkeeping
// -----------------------------------------------------------------------------

std::string hash_hex(const std::string& bytes) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(detail::fnv1a(bytes)));
  return buf;
}

std::string hash_file(const fs::path& p) { return hash_hex(text::read_file(p)); }

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Every output file under dir except the manifest, relative and sorted.
std::vector<std::string> list_outputs(const fs::path& dir) {
  std::vector<std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "manifest.json") continue;
    out.push_back(rel);
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct Run {
  std::string command;
  std::vector<std::string> argv;
  fs::path out_dir;
  std::vector<fs::path> inputs;
  std::vector<fs::path> config_files;
  std::map<std::string, std::uint64_t> seeds;
  json resolved = json::object();
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  std::string started = utc_now();
};

json file_entries(const std::vector<fs::path>& paths) {
  json arr = json::array();
  for (const auto& p : paths) {
    if (fs::is_directory(p)) {
      for (const auto& rel : list_outputs(p)) arr.push_back({{"path", (p / rel).generic_string()}, {"fnv1a", hash_file(p / rel)}});
    } else if (fs::exists(p)) {
      arr.push_back({{"path", p.generic_string()}, {"fnv1a", hash_file(p)}});
    }
  }
  return arr;
}

void write_manifest(const Run& run) {
  json m;
  m["tool"] = "dipt";
  m["version"] = kVersion;
  m["command"] = run.command;
  m["argv"] = run.argv;
  m["cwd"] = fs::current_path().generic_string();
  m["out"] = run.out_dir.generic_string();
  m["config_files"] = file_entries(run.config_files);
  m["rng_seeds"] = run.seeds;
  m["options"] = run.resolved;
  m["inputs"] = file_entries(run.inputs);
  json outputs = json::array();
  for (const auto& rel : list_outputs(run.out_dir)) outputs.push_back({{"path", rel}, {"fnv1a", hash_file(run.out_dir / rel)}});
  m["outputs"] = outputs;
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - run.start).count();
  m["timings"] = {{"started_utc", run.started}, {"wall_seconds", wall}};
  text::write_atomic(run.out_dir / "manifest.json", m.dump(2) + "\n");
}

// -----------------------------------------------------------------------------
// Config files: a JSON object whose keys are long option names ("nodes",
// "mean_degree" or "mean-degree"). Flags given on the command line win.
// -----------------------------------------------------------------------------

void apply_config(CLI::App& sub, const std::string& path, Run& run) {
  if (path.empty()) return;
  json cfg;
  try {
    cfg = json::parse(text::read_file(path));
  } catch (const json::exception& e) {
    throw UsageError("config '" + path + "': " + e.what());
  }
  if (!cfg.is_object()) throw UsageError("config '" + path + "': top level must be an object");
  run.config_files.push_back(path);
  for (const auto& [key, value] : cfg.items()) {
    std::string name = key;
    std::replace(name.begin(), name.end(), '_', '-');
    CLI::Option* opt = sub.get_option_no_throw("--" + name);
    if (opt == nullptr || name == "config") throw UsageError("config '" + path + "': unknown field '" + key + "'");
    if (opt->count() > 0) continue;
    std::vector<std::string> results;
    if (value.is_array()) {
      for (const auto& v : value) results.push_back(v.is_string() ? v.get<std::string>() : v.dump());
    } else {
      results.push_back(value.is_string() ? value.get<std::string>() : value.dump());
    }
    opt->clear();
    for (const auto& r : results) opt->add_result(r);
    try {
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError("config '" + path + "': field '" + key + "': " + e.what());
    }
  }
}

void require_fields(CLI::App& sub, std::initializer_list<const char*> names) {
  for (const char* n : names) {
    const CLI::Option* opt = sub.get_option("--" + std::string(n));
    if (opt->count() == 0) {
      std::string field = n;
      std::replace(field.begin(), field.end(), '-', '_');
      throw UsageError("missing config field '" + field + "' (set it in the config file or pass --" + n + ")");
    }
  }
}

json resolved_options(const CLI::App& sub) {
  json out = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_name() == "--help" || opt->get_lnames().empty()) continue;
    const auto& name = opt->get_lnames().front();
    if (opt->count() > 0) {
      out[name] = opt->results();
    } else if (!opt->get_default_str().empty()) {
      out[name] = opt->get_default_str();
    }
  }
  return out;
}

// -----------------------------------------------------------------------------
// Dataset layout: <dir>/graph.txt and <dir>/instances/NNNN/{seeds,observation,forest}.txt
// -----------------------------------------------------------------------------

std::string instance_name(std::size_t k) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04zu", k);
  return buf;
}

fs::path instance_dir(const fs::path& root, std::size_t k) { return root / "instances" / instance_name(k); }

std::size_t count_instances(const fs::path& root) {
  std::size_t k = 0;
  while (fs::exists(instance_dir(root, k))) ++k;
  return k;
}

struct Range {
  std::size_t first = 0;
  std::size_t count = 0;  // 0 = through the last instance
};

std::vector<std::size_t> select_instances(const fs::path& root, const Range& r) {
  const std::size_t total = count_instances(root);
  if (total == 0) throw ParseError("no instances under '" + (root / "instances").string() + "'");
  if (r.first >= total) throw UsageError("first: " + std::to_string(r.first) + " is past the last instance");
  const std::size_t last = r.count == 0 ? total : std::min(total, r.first + r.count);
  std::vector<std::size_t> out;
  for (std::size_t k = r.first; k < last; ++k) out.push_back(k);
  return out;
}

void write_instance(const fs::path& dir, const SeedVector& s, const DiffusionObservation& y,
                    const PropagationForest& forest) {
  text::write_atomic(dir / "seeds.txt", format_binary(s));
  text::write_atomic(dir / "observation.txt", format_binary(y));
  text::write_atomic(dir / "forest.txt", format_forest(forest));
}

std::uint64_t instance_seed(std::uint64_t run_seed, std::size_t k) {
  return detail::splitmix64(run_seed ^ detail::splitmix64(k + 1));
}

// Runs fn(i) for i in [0, n) on a pool of worker threads; callers write results by index.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::size_t default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// -----------------------------------------------------------------------------
// simulate
// -----------------------------------------------------------------------------

struct SimulateSiArgs {
  std::size_t nodes = 0;
  std::size_t features = 8;
  double mean_degree = 6.0;
  std::string transmission = "constant";
  double strength = 2.5;
  double bias = -1.5;
  double beta = 0.1;
  std::size_t iterations = 200;
  double seed_fraction = 0.1;
  std::size_t instances = 1;
  std::uint64_t seed = 0;
};

void run_simulate_si(const SimulateSiArgs& a, Run& run) {
  if (a.transmission != "constant" && a.transmission != "planted") {
    throw UsageError("transmission: expected 'constant' or 'planted', got '" + a.transmission + "'");
  }
  if (a.instances == 0) throw UsageError("instances: must be at least 1");
  PlantedWorldConfig wc;
  wc.n_nodes = a.nodes;
  wc.feature_dim = a.features;
  wc.mean_degree = a.mean_degree;
  wc.strength = a.strength;
  wc.bias = a.bias;
  wc.rng_seed = a.seed;
  const PlantedWorld world = make_planted_world(wc);
  save_graph(world.graph, run.out_dir / "graph.txt");

  std::ostringstream summary;
  summary << "instance\tseeds\tinfected\n";
  for (std::size_t k = 0; k < a.instances; ++k) {
    SiConfig sc;
    sc.beta = a.beta;
    sc.iterations = a.iterations;
    sc.seed_fraction = a.seed_fraction;
    sc.rng_seed = instance_seed(a.seed, k);
    const SiResult sim = a.transmission == "planted" ? simulate_si(world.graph, sc, world.transmission_fn())
                                                     : simulate_si(world.graph, sc);
    write_instance(instance_dir(run.out_dir, k), sim.s, sim.y, sim.forest);
    summary << instance_name(k) << '\t' << sim.s.count() << '\t' << sim.y.count() << '\n';
  }
  text::write_atomic(run.out_dir / "summary.tsv", summary.str());
  run.seeds["world"] = a.seed;
  std::cout << "simulated " << a.instances << " SI instance(s) on " << a.nodes << " nodes into " << run.out_dir.string()
            << "\n";
}

struct SimulateIdssArgs {
  std::size_t counties = 0;
  std::uint64_t population = 10000;
  std::size_t horizon = 90;
  std::size_t initial_infected = 10;
  std::size_t initial_sources = 2;
  std::size_t airports = 72;
  std::vector<double> daily_prob{0.2, 0.3, 0.3, 0.2, 0.1, 0.1};
  double gravity = 1e-7;
  std::uint64_t seed = 0;
};

void run_simulate_idss(const SimulateIdssArgs& a, Run& run) {
  IdssConfig cfg;
  cfg.n_counties = a.counties;
  cfg.populations.assign(a.counties, a.population);
  cfg.infectious_period_days = a.daily_prob.size();
  cfg.daily_infection_prob = a.daily_prob;
  cfg.n_airport_counties = a.airports;
  cfg.n_initial_sources = a.initial_sources;
  cfg.n_initial_infected = a.initial_infected;
  cfg.horizon_days = a.horizon;
  cfg.rng_seed = a.seed;
  cfg.validate();
  const MobilityMatrix mobility = synth_mobility(a.counties, cfg.populations, a.seed, a.gravity);
  const IdssResult result = simulate_idss(cfg, mobility);

  std::ostringstream flows;
  for (std::size_t i = 0; i < a.counties; ++i) {
    for (std::size_t j = 0; j < a.counties; ++j) flows << (j ? " " : "") << text::format_double(mobility.flows(i, j));
    flows << '\n';
  }
  text::write_atomic(run.out_dir / "mobility.txt", flows.str());

  std::ostringstream sir;
  sir << "day\tcounty\tS\tI\tR\n";
  for (std::size_t d = 0; d < result.series.susceptible.size(); ++d) {
    for (std::size_t c = 0; c < a.counties; ++c) {
      sir << d << '\t' << c << '\t' << result.series.susceptible[d][c] << '\t' << result.series.infectious[d][c] << '\t'
          << result.series.recovered[d][c] << '\n';
    }
  }
  text::write_atomic(run.out_dir / "sir.tsv", sir.str());

  std::ostringstream people;
  people << "id\tcounty\tinfected_day\trecovered_day\tparent\n";
  for (const auto& ind : result.forest.individuals) {
    people << ind.id << '\t' << ind.county << '\t' << ind.infected_day << '\t'
           << (ind.recovered_day ? std::to_string(*ind.recovered_day) : "-") << '\t'
           << (ind.parent ? std::to_string(*ind.parent) : "-") << '\n';
  }
  text::write_atomic(run.out_dir / "individuals.tsv", people.str());

  if (!result.forest.individuals.empty()) {
    const CountyInstance inst = forest_to_county_instance(result.forest, mobility);
    save_graph(inst.graph, run.out_dir / "graph.txt");
    write_instance(instance_dir(run.out_dir, 0), inst.s, inst.y, inst.forest);
  }
  run.seeds["simulation"] = a.seed;
  std::cout << "simulated IDSS over " << a.counties << " counties: " << result.forest.individuals.size()
            << " infections into " << run.out_dir.string() << "\n";
}

// -----------------------------------------------------------------------------
// train
// -----------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  Range range;
  double observed_fraction = 0.0;
  std::string ablation = "full";
  TrainConfig cfg;
};

ObservedEdgeSet sample_observed(const PropagationForest& forest, double fraction, Rng& rng) {
  auto edges = forest.edges();
  const auto m = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(edges.size())));
  ObservedEdgeSet out;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + rng.index(edges.size() - i);
    std::swap(edges[i], edges[j]);
    out.insert(edges[i]);
  }
  return out;
}

void run_train(TrainArgs a, Run& run) {
  if (!(a.observed_fraction >= 0.0 && a.observed_fraction <= 1.0)) {
    throw UsageError("observed_fraction: must lie in [0, 1]");
  }
  a.cfg.ablation = ablation_from_string(a.ablation);
  a.cfg.validate();
  const fs::path root = a.data;
  const Graph graph = load_graph(root / "graph.txt");
  Rng observed_rng = make_stream(a.cfg.rng_seed, "observed");
  std::vector<TrainingSample> dataset;
  for (std::size_t k : select_instances(root, a.range)) {
    const fs::path dir = instance_dir(root, k);
    TrainingSample sample{load_seeds(dir / "seeds.txt"), load_observation(dir / "observation.txt"), {}, {}};
    if (sample.s.size() != graph.n_nodes() || sample.y.size() != graph.n_nodes()) {
      throw ShapeError("instance " + instance_name(k) + " has " + std::to_string(sample.y.size()) +
                       " nodes but graph.txt has " + std::to_string(graph.n_nodes()));
    }
    if (a.observed_fraction > 0.0) {
      const PropagationForest truth = load_forest(dir / "forest.txt");
      sample.observed_edges = sample_observed(truth, a.observed_fraction, observed_rng);
    }
    sample.current_tree = PropagationForest(graph.n_nodes());
    dataset.push_back(std::move(sample));
  }
  run.inputs.push_back(root);
  run.seeds["training"] = a.cfg.rng_seed;

  const TrainResult result = train_alternating(graph, dataset, a.cfg);
  save_checkpoint(run.out_dir / "checkpoint.txt", result.models);
  std::ostringstream curve;
  curve << "epoch\ttotal\tneg_elbo\tdiffusion\tsupervised\n";
  for (const auto& r : result.history) {
    curve << r.epoch << '\t' << text::format_double(r.total) << '\t' << text::format_double(r.neg_elbo) << '\t'
          << text::format_double(r.diffusion) << '\t' << text::format_double(r.supervised) << '\n';
  }
  text::write_atomic(run.out_dir / "loss.tsv", curve.str());
  std::cout << "trained on " << dataset.size() << " instance(s) for " << a.cfg.epochs << " epoch(s)";
  if (!result.history.empty()) std::cout << "; final loss " << result.history.back().total;
  std::cout << "\n";
}

// -----------------------------------------------------------------------------
// infer
// -----------------------------------------------------------------------------

struct InferArgs {
  std::string checkpoint;
  std::string data;
  Range range;
  std::size_t threads = default_threads();
  InferenceConfig cfg;
};

void run_infer(const InferArgs& a, Run& run) {
  a.cfg.validate();
  const fs::path root = a.data;
  const ModelState models = load_checkpoint(a.checkpoint);
  const Graph graph = load_graph(root / "graph.txt");
  if (models.prior.n_nodes() != graph.n_nodes() || models.net.feature_dim() != graph.feature_dim()) {
    throw ShapeError("checkpoint '" + a.checkpoint + "' was trained for " + std::to_string(models.prior.n_nodes()) +
                     " nodes with " + std::to_string(models.net.feature_dim()) + " features, but '" +
                     (root / "graph.txt").string() + "' has " + std::to_string(graph.n_nodes()) + " nodes with " +
                     std::to_string(graph.feature_dim()) + " features");
  }
  if (!models.prior.z_bar) {
    throw UsageError("checkpoint '" + a.checkpoint + "' has no z_bar (trained for 0 epochs); retrain with --epochs >= 1");
  }
  const auto ids = select_instances(root, a.range);
  std::vector<DiffusionObservation> observations;
  for (std::size_t k : ids) {
    auto y = load_observation(instance_dir(root, k) / "observation.txt");
    if (y.size() != graph.n_nodes()) throw ShapeError("instance " + instance_name(k) + ": observation size mismatch");
    observations.push_back(std::move(y));
  }
  run.inputs.push_back(a.checkpoint);
  run.inputs.push_back(root);
  run.seeds["inference"] = a.cfg.rng_seed;

  std::vector<InferenceResult> results(ids.size());
  parallel_for(ids.size(), a.threads, [&](std::size_t i) {
    ModelState local = models;
    results[i] = optimize_latent(local, graph, observations[i], a.cfg);
  });
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const fs::path dir = instance_dir(run.out_dir, ids[i]);
    const InferenceResult& r = results[i];
    text::write_atomic(dir / "seeds.txt", format_binary(r.s_hat));
    text::write_atomic(dir / "forest.txt", format_forest(r.forest));
    text::write_atomic(dir / "seed_prob.txt", format_reals(r.seed_prob));
    text::write_atomic(dir / "y_hat.txt", format_reals(r.y_hat));
    std::ostringstream trace;
    trace << "iteration\tobjective\tbest\n";
    for (std::size_t t = 0; t < r.objective_trace.size(); ++t) {
      trace << t << '\t' << text::format_double(r.objective_trace[t]) << '\t' << text::format_double(r.best_trace[t])
            << '\n';
    }
    text::write_atomic(dir / "trace.tsv", trace.str());
  }
  std::cout << "inferred " << ids.size() << " instance(s) into " << run.out_dir.string() << "\n";
}

// -----------------------------------------------------------------------------
// eval
// -----------------------------------------------------------------------------

struct EvalArgs {
  std::string pred;
  std::string truth;
  Range range;
};

struct EvalRow {
  std::string name;
  std::vector<double> values;
};

const std::vector<std::string> kEvalColumns{"path_precision", "jaccard", "precision", "recall",
                                            "f1",             "auc",     "sequence_error"};

void run_eval(const EvalArgs& a, Run& run) {
  const fs::path pred_root = a.pred, truth_root = a.truth;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<EvalRow> rows;
  for (std::size_t k : select_instances(truth_root, a.range)) {
    const fs::path tdir = instance_dir(truth_root, k), pdir = instance_dir(pred_root, k);
    const SeedVector s_true = load_seeds(tdir / "seeds.txt");
    const PropagationForest f_true = load_forest(tdir / "forest.txt");
    if (!fs::exists(pdir)) throw ParseError("no prediction for instance " + instance_name(k) + " in '" + a.pred + "'");
    const SeedVector s_pred = load_seeds(pdir / "seeds.txt");
    const PropagationForest f_pred = load_forest(pdir / "forest.txt");
    const std::size_t n = s_true.size();
    if (s_pred.size() != n || f_pred.size() != n || f_true.size() != n) {
      throw ShapeError("instance " + instance_name(k) + ": predicted files have " + std::to_string(s_pred.size()) +
                       " nodes, truth has " + std::to_string(n));
    }
    const auto cm = classification_metrics(s_pred, s_true);
    Vector scores = s_pred.as_reals();
    if (fs::exists(pdir / "seed_prob.txt")) {
      scores = load_reals(pdir / "seed_prob.txt");
      if (scores.size() != n) throw ShapeError("instance " + instance_name(k) + ": seed_prob.txt size mismatch");
    }
    std::vector<std::uint8_t> labels(n);
    std::size_t positives = 0;
    for (NodeId v = 0; v < n; ++v) positives += labels[v] = s_true[v] ? 1 : 0;
    const double auc = positives == 0 || positives == n ? nan : roc_auc(scores, labels);
    double seq = nan;
    try {
      seq = sequence_error(f_pred.activation_step, f_true.activation_step);
    } catch (const ContractError&) {
      // prediction and truth cover different node sets
    }
    rows.push_back({instance_name(k),
                    {path_precision(edge_set(f_pred), edge_set(f_true)), jaccard_index(edge_set(f_pred), edge_set(f_true)),
                     cm.precision, cm.recall, cm.f1, auc, seq}});
  }
  run.inputs.push_back(pred_root);
  run.inputs.push_back(truth_root);

  EvalRow mean{"mean", {}};
  for (std::size_t c = 0; c < kEvalColumns.size(); ++c) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& r : rows) {
      if (std::isfinite(r.values[c])) {
        sum += r.values[c];
        ++count;
      }
    }
    mean.values.push_back(count ? sum / static_cast<double>(count) : nan);
  }
  auto cell = [](double v) { return std::isfinite(v) ? text::format_double(v) : std::string("nan"); };
  std::ostringstream report;
  report << "instance";
  for (const auto& c : kEvalColumns) report << '\t' << c;
  report << '\n';
  rows.push_back(mean);
  for (const auto& row : rows) {
    report << row.name;
    for (double v : row.values) report << '\t' << cell(v);
    report << '\n';
  }
  text::write_atomic(run.out_dir / "report.tsv", report.str());
  for (std::size_t c = 0; c < kEvalColumns.size(); ++c) std::cout << kEvalColumns[c] << ' ' << cell(mean.values[c]) << '\n';
}

// -----------------------------------------------------------------------------
// gradcheck
// -----------------------------------------------------------------------------

struct GradcheckArgs {
  std::size_t instances = 20;
  std::uint64_t seed = 0;
  std::string wrong_sign;  // test hook: negate this loss's analytic gradient
};

struct GradInstance {
  Graph graph;
  SiResult sim;
};

GradInstance gradcheck_instance(std::uint64_t seed, std::size_t n) {
  Rng rng = make_stream(seed, "gradcheck");
  std::vector<DirectedEdge> edges;
  for (NodeId u = 0; u < n; ++u) {
    for (NodeId v = u + 1; v < n; ++v) {
      if (v == u + 1 || rng.bernoulli(0.35)) {
        edges.push_back({u, v});
        edges.push_back({v, u});
      }
    }
  }
  DenseMatrix features(n, 3);
  for (double& x : features.data()) x = rng.normal();
  Graph g(n, std::move(edges), std::move(features));
  SiConfig sc;
  sc.seed_fraction = 0.25;
  sc.beta = 0.5;
  sc.iterations = 3;
  sc.rng_seed = seed;
  SiResult sim = simulate_si(g, sc);
  return {std::move(g), std::move(sim)};
}

int run_gradcheck(const GradcheckArgs& a, Run* run) {
  const std::vector<std::string> names{"diffusion", "elbo", "supervised_edge", "inference"};
  if (!a.wrong_sign.empty() && std::find(names.begin(), names.end(), a.wrong_sign) == names.end()) {
    throw UsageError("inject-wrong-sign: unknown loss '" + a.wrong_sign + "'");
  }
  std::map<std::string, GradCheckResult> worst;
  std::map<std::string, std::size_t> checked;
  auto record = [&](const std::string& name, const GradCheckResult& r) {
    ++checked[name];
    auto& w = worst[name];
    if (checked[name] == 1 || r.max_rel_error_above_noise > w.max_rel_error_above_noise ||
        (r.max_rel_error_above_noise == w.max_rel_error_above_noise && r.max_rel_error > w.max_rel_error)) {
      w = r;
    }
  };
  auto wrap = [&](const std::string& name, LossFn fn) -> LossFn {
    if (name != a.wrong_sign) return fn;
    return [fn](std::span<const double> t, Vector* g) {
      const double v = fn(t, g);
      if (g) {
        for (double& x : *g) x = -x;
      }
      return v;
    };
  };

  for (std::size_t k = 0; k < a.instances; ++k) {
    const std::uint64_t seed = instance_seed(a.seed, k);
    const GradInstance inst = gradcheck_instance(seed, 4 + k % 5);
    const Graph& g = inst.graph;
    TrainConfig tc;
    tc.latent_dim = 4;
    tc.rng_seed = seed;
    ModelState m = ModelState::create(g, tc);
    Rng rng = make_stream(seed, "noise");
    Vector noise(tc.latent_dim);
    for (double& x : noise) x = rng.normal();

    auto net_params = m.net.params();
    const Vector psi = flatten_values(net_params);
    record("diffusion", gradient_check(wrap("diffusion", [&](std::span<const double> t, Vector* grad) {
                                         assign_values(net_params, t);
                                         auto r = diffusion_loss(m.net, g, inst.sim.y, inst.sim.s, inst.sim.forest);
                                         if (grad) *grad = r.grad;
                                         return r.value;
                                       }),
                                       psi));
    const auto tree_edges = inst.sim.forest.edges();
    const ObservedEdgeSet observed(tree_edges.begin(), tree_edges.end());
    if (!observed.empty()) {
      record("supervised_edge", gradient_check(wrap("supervised_edge", [&](std::span<const double> t, Vector* grad) {
                                                 assign_values(net_params, t);
                                                 auto r = supervised_edge_loss(m.net, g, observed);
                                                 if (grad) *grad = r.grad;
                                                 return r.value;
                                               }),
                                               psi));
    }
    assign_values(net_params, psi);

    auto prior_params = m.prior.params();
    const Vector phi = flatten_values(prior_params);
    record("elbo", gradient_check(wrap("elbo", [&](std::span<const double> t, Vector* grad) {
                                    assign_values(prior_params, t);
                                    auto r = elbo(m.prior, inst.sim.s, noise, grad != nullptr);
                                    if (grad) *grad = r.grad;
                                    return r.value;
                                  }),
                                  phi));
    assign_values(prior_params, phi);

    m.prior.z_bar = Vector(tc.latent_dim, 0.0);
    const InfluenceMatrix I = m.influence_matrix(g);
    const InferenceConfig ic;
    Vector z0(tc.latent_dim);
    for (double& x : z0) x = 0.5 * rng.normal();
    const auto frozen = inference_objective(m, I, z0, inst.sim.y, g, ic).structure;
    record("inference", gradient_check(wrap("inference", [&](std::span<const double> z, Vector* grad) {
                                         auto o = inference_objective(m, I, z, inst.sim.y, g, ic, &frozen);
                                         if (grad) *grad = o.grad;
                                         return o.value;
                                       }),
                                       z0));
  }

  bool ok = true;
  std::ostringstream report;
  report << "loss\tinstances\tmax_rel_error\tmax_rel_error_above_noise\ttolerance\tstatus\n";
  for (const auto& name : names) {
    const double tol = name == "inference" ? 1e-3 : 1e-4;
    const auto& w = worst[name];
    const bool pass = checked[name] > 0 && w.max_rel_error_above_noise <= tol;
    ok = ok && pass;
    report << name << '\t' << checked[name] << '\t' << text::format_double(w.max_rel_error) << '\t'
           << text::format_double(w.max_rel_error_above_noise) << '\t' << text::format_double(tol) << '\t'
           << (pass ? "ok" : "FAIL") << '\n';
  }
  std::cout << report.str();
  if (run != nullptr) {
    text::write_atomic(run->out_dir / "gradcheck.tsv", report.str());
    run->seeds["gradcheck"] = a.seed;
  }
  return ok ? 0 : 3;
}

// -----------------------------------------------------------------------------
// Entry point
// -----------------------------------------------------------------------------

int run_cli(std::vector<std::string> args);

int run_replay(const std::string& manifest_path, std::string out_override) {
  json m;
  try {
    m = json::parse(text::read_file(manifest_path));
  } catch (const json::exception& e) {
    throw ParseError("manifest '" + manifest_path + "': " + e.what());
  }
  for (const char* key : {"argv", "cwd", "out", "outputs"}) {
    if (!m.contains(key)) throw ParseError("manifest '" + manifest_path + "': missing field '" + key + "'");
  }
  const fs::path cwd = m["cwd"].get<std::string>();
  const fs::path original_out = m["out"].get<std::string>();
  for (const auto& c : m["config_files"]) {
    const fs::path p = fs::path(c["path"].get<std::string>());
    const fs::path abs = p.is_absolute() ? p : cwd / p;
    if (!fs::exists(abs) || hash_file(abs) != c["fnv1a"].get<std::string>()) {
      throw ParseError("config file '" + p.string() + "' changed since the recorded run");
    }
  }
  fs::path out = out_override.empty() ? fs::path(original_out.string() + ".replay") : fs::path(out_override);
  if (out.is_relative()) out = fs::absolute(out);
  std::vector<std::string> argv = m["argv"].get<std::vector<std::string>>();
  bool replaced = false;
  for (std::size_t i = 0; i + 1 < argv.size(); ++i) {
    if (argv[i] == "--out") {
      argv[i + 1] = out.string();
      replaced = true;
    } else if (argv[i].rfind("--out=", 0) == 0) {
      argv[i] = "--out=" + out.string();
      replaced = true;
    }
  }
  if (!replaced) argv.push_back("--out=" + out.string());
  argv.insert(argv.begin(), "dipt");

  const fs::path here = fs::current_path();
  fs::current_path(cwd);
  int code = 0;
  try {
    code = run_cli(argv);
  } catch (...) {
    fs::current_path(here);
    throw;
  }
  fs::current_path(here);
  if (code != 0) return code;

  std::size_t mismatches = 0;
  for (const auto& o : m["outputs"]) {
    const std::string rel = o["path"].get<std::string>();
    const fs::path p = out / rel;
    if (!fs::exists(p) || hash_file(p) != o["fnv1a"].get<std::string>()) {
      std::cout << "differs: " << rel << "\n";
      ++mismatches;
    }
  }
  const auto produced = list_outputs(out);
  if (produced.size() != m["outputs"].size()) {
    std::cout << "output file count differs: " << produced.size() << " vs " << m["outputs"].size() << "\n";
    ++mismatches;
  }
  if (mismatches) {
    std::cout << "replay produced " << mismatches << " difference(s)\n";
    return 2;
  }
  std::cout << "replay identical: " << m["outputs"].size() << " file(s) in " << out.string() << "\n";
  return 0;
}

void add_out(CLI::App* sub, std::string& out) {
  sub->add_option("--out", out, "Output directory")->envname("DIPT_OUT_DIR");
}

void add_range(CLI::App* sub, Range& r) {
  sub->add_option("--first", r.first, "First instance index")->capture_default_str();
  sub->add_option("--count", r.count, "Number of instances (0 = all)")->capture_default_str();
}

int run_cli(std::vector<std::string> args) {
  CLI::App app{"Propagation-tree reconstruction toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  std::string out, config;
  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", config, "JSON config file"); };

  auto* simulate = app.add_subcommand("simulate", "Generate diffusion datasets");
  simulate->require_subcommand(1);
  SimulateSiArgs si;
  auto* sim_si = simulate->add_subcommand("si", "SI diffusion on a random feature graph");
  add_out(sim_si, out);
  add_config(sim_si);
  sim_si->add_option("--nodes", si.nodes, "Number of nodes");
  sim_si->add_option("--features", si.features, "Feature dimension")->capture_default_str();
  sim_si->add_option("--mean-degree", si.mean_degree, "Expected degree")->capture_default_str();
  sim_si->add_option("--transmission", si.transmission, "constant | planted")->capture_default_str();
  sim_si->add_option("--strength", si.strength, "Planted logistic slope")->capture_default_str();
  sim_si->add_option("--bias", si.bias, "Planted logistic intercept")->capture_default_str();
  sim_si->add_option("--beta", si.beta, "Constant per-edge transmission probability")->capture_default_str();
  sim_si->add_option("--iterations", si.iterations, "SI rounds")->capture_default_str();
  sim_si->add_option("--seed-fraction", si.seed_fraction, "Fraction of nodes seeded")->capture_default_str();
  sim_si->add_option("--instances", si.instances, "Number of cascades")->capture_default_str();
  sim_si->add_option("--seed", si.seed, "Run seed")->capture_default_str();

  SimulateIdssArgs idss;
  auto* sim_idss = simulate->add_subcommand("idss", "Spatial SIR over synthetic county mobility");
  add_out(sim_idss, out);
  add_config(sim_idss);
  sim_idss->add_option("--counties", idss.counties, "Number of counties");
  sim_idss->add_option("--population", idss.population, "Population per county")->capture_default_str();
  sim_idss->add_option("--horizon", idss.horizon, "Days simulated")->capture_default_str();
  sim_idss->add_option("--initial-infected", idss.initial_infected, "Index cases")->capture_default_str();
  sim_idss->add_option("--initial-sources", idss.initial_sources, "Source counties")->capture_default_str();
  sim_idss->add_option("--airports", idss.airports, "Size of the source-county pool")->capture_default_str();
  sim_idss->add_option("--daily-prob", idss.daily_prob, "Daily infection probability per infectious day")
      ->delimiter(',')
      ->capture_default_str();
  sim_idss->add_option("--gravity", idss.gravity, "Gravity-model constant")->capture_default_str();
  sim_idss->add_option("--seed", idss.seed, "Run seed")->capture_default_str();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Fit the influence model and seed prior");
  add_out(train, out);
  add_config(train);
  train->add_option("--data", tr.data, "Dataset directory");
  add_range(train, tr.range);
  train->add_option("--epochs", tr.cfg.epochs)->capture_default_str();
  train->add_option("--lr", tr.cfg.lr)->capture_default_str();
  train->add_option("--lambda", tr.cfg.lambda, "Diffusion-loss weight")->capture_default_str();
  train->add_option("--mu", tr.cfg.mu, "Observed-edge weight")->capture_default_str();
  train->add_option("--refresh-every", tr.cfg.tree_refresh_every, "Epochs between tree refreshes")->capture_default_str();
  train->add_option("--ablation", tr.ablation, "full | cosine_influence | no_alternating")->capture_default_str();
  train->add_option("--observed-fraction", tr.observed_fraction, "Fraction of true edges used as observed")
      ->capture_default_str();
  train->add_option("--latent-dim", tr.cfg.latent_dim)->capture_default_str();
  train->add_option("--seed", tr.cfg.rng_seed, "Run seed")->capture_default_str();

  InferArgs inf;
  auto* infer = app.add_subcommand("infer", "Recover sources and propagation forests");
  add_out(infer, out);
  add_config(infer);
  infer->add_option("--checkpoint", inf.checkpoint, "Trained checkpoint");
  infer->add_option("--data", inf.data, "Dataset directory");
  add_range(infer, inf.range);
  infer->add_option("--iterations", inf.cfg.iterations)->capture_default_str();
  infer->add_option("--step-size", inf.cfg.step_size)->capture_default_str();
  infer->add_option("--gamma", inf.cfg.gamma, "Proximity weight")->capture_default_str();
  infer->add_option("--threshold", inf.cfg.seed_threshold, "Seed probability threshold")->capture_default_str();
  infer->add_option("--seed", inf.cfg.rng_seed, "Run seed")->capture_default_str();
  infer->add_option("--threads", inf.threads, "Worker threads")->capture_default_str();

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Score predictions against ground truth");
  add_out(eval, out);
  add_config(eval);
  eval->add_option("--pred", ev.pred, "Prediction directory");
  eval->add_option("--truth", ev.truth, "Ground-truth dataset directory");
  add_range(eval, ev.range);

  GradcheckArgs gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every analytic gradient");
  gradcheck->add_option("--out", out, "Optional output directory");
  add_config(gradcheck);
  gradcheck->add_option("--instances", gc.instances)->capture_default_str();
  gradcheck->add_option("--seed", gc.seed)->capture_default_str();
  gradcheck->add_option("--inject-wrong-sign", gc.wrong_sign)->group("");

  std::string manifest, replay_out;
  auto* replay = app.add_subcommand("replay", "Re-run a command from its manifest and compare outputs");
  replay->add_option("manifest", manifest, "manifest.json of the original run")->required();
  replay->add_option("--out", replay_out, "Directory for the replayed outputs (default <out>.replay)");

  std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (*replay) return run_replay(manifest, replay_out);

  CLI::App* sub = nullptr;
  std::string command;
  if (*simulate) {
    sub = *sim_si ? sim_si : sim_idss;
    command = std::string("simulate ") + sub->get_name();
  } else {
    for (CLI::App* s : {train, infer, eval, gradcheck}) {
      if (*s) sub = s;
    }
    command = sub->get_name();
  }
  Run run;
  run.command = command;
  run.argv.assign(args.begin() + 1, args.end());
  apply_config(*sub, config, run);

  if (sub == gradcheck) {
    if (out.empty()) return run_gradcheck(gc, nullptr);
    run.out_dir = out;
    const int code = run_gradcheck(gc, &run);
    run.resolved = resolved_options(*sub);
    write_manifest(run);
    return code;
  }

  if (out.empty()) throw UsageError("missing config field 'out' (pass --out or set DIPT_OUT_DIR)");
  run.out_dir = out;
  if (sub == sim_si) {
    require_fields(*sub, {"nodes"});
    run_simulate_si(si, run);
  } else if (sub == sim_idss) {
    require_fields(*sub, {"counties"});
    run_simulate_idss(idss, run);
  } else if (sub == train) {
    require_fields(*sub, {"data"});
    run_train(tr, run);
  } else if (sub == infer) {
    require_fields(*sub, {"checkpoint", "data"});
    run_infer(inf, run);
  } else {
    require_fields(*sub, {"pred", "truth"});
    run_eval(ev, run);
  }
  run.resolved = resolved_options(*sub);
  write_manifest(run);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(std::vector<std::string>(argv, argv + argc));
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }
}
