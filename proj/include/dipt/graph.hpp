#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "numeric.hpp"
#include "text_io.hpp"

namespace dipt {

using NodeId = std::size_t;

struct DirectedEdge {
  NodeId src = 0;
  NodeId dst = 0;
  friend auto operator<=>(const DirectedEdge&, const DirectedEdge&) = default;
};

// -----------------------------------------------------------------------------
// Graph
// -----------------------------------------------------------------------------

/// Directed graph with per-node features. Edges are kept sorted by (src, dst).
class Graph {
 public:
  Graph() = default;

  Graph(std::size_t n_nodes, std::vector<DirectedEdge> edges, DenseMatrix features)
      : n_(n_nodes), edges_(std::move(edges)), features_(std::move(features)) {
    if (features_.rows() != n_) {
      throw ShapeError("Graph: feature matrix has " + std::to_string(features_.rows()) + " rows for " +
                       std::to_string(n_) + " nodes");
    }
    if (!features_.all_finite()) throw ContractError("Graph: non-finite feature value");
    std::sort(edges_.begin(), edges_.end());
    for (std::size_t e = 0; e < edges_.size(); ++e) {
      const auto [u, v] = edges_[e];
      if (u >= n_ || v >= n_) {
        throw ContractError("Graph: edge (" + std::to_string(u) + "," + std::to_string(v) + ") out of range");
      }
      if (u == v) throw ContractError("Graph: self-loop at node " + std::to_string(u));
      if (e > 0 && edges_[e - 1] == edges_[e]) {
        throw ContractError("Graph: duplicate edge (" + std::to_string(u) + "," + std::to_string(v) + ")");
      }
    }
    in_.assign(n_, {});
    out_.assign(n_, {});
    for (std::size_t e = 0; e < edges_.size(); ++e) {
      out_[edges_[e].src].push_back(e);
      in_[edges_[e].dst].push_back(e);
    }
  }

  std::size_t n_nodes() const { return n_; }
  std::size_t n_edges() const { return edges_.size(); }
  std::size_t feature_dim() const { return features_.cols(); }

  const std::vector<DirectedEdge>& edges() const { return edges_; }
  const DirectedEdge& edge(std::size_t e) const { return edges_[e]; }
  const DenseMatrix& features() const { return features_; }
  std::span<const double> features_of(NodeId v) const { return features_.row(v); }

  /// Indices (into edges()) of edges ending at v, ordered by source id.
  const std::vector<std::size_t>& in_edges(NodeId v) const { return in_[v]; }
  /// Indices of edges leaving v, ordered by target id.
  const std::vector<std::size_t>& out_edges(NodeId v) const { return out_[v]; }

  std::optional<std::size_t> find_edge(NodeId u, NodeId v) const {
    const DirectedEdge key{u, v};
    auto it = std::lower_bound(edges_.begin(), edges_.end(), key);
    if (it == edges_.end() || *it != key) return std::nullopt;
    return static_cast<std::size_t>(it - edges_.begin());
  }

  bool has_edge(NodeId u, NodeId v) const { return find_edge(u, v).has_value(); }

  friend bool operator==(const Graph& a, const Graph& b) {
    return a.n_ == b.n_ && a.edges_ == b.edges_ && a.features_ == b.features_;
  }

 private:
  std::size_t n_ = 0;
  std::vector<DirectedEdge> edges_;
  DenseMatrix features_;
  std::vector<std::vector<std::size_t>> in_;
  std::vector<std::vector<std::size_t>> out_;
};

// -----------------------------------------------------------------------------
// Binary node states
// -----------------------------------------------------------------------------

template <class Tag>
class BinaryVector {
 public:
  BinaryVector() = default;
  explicit BinaryVector(std::size_t n) : bits_(n, 0) {}
  explicit BinaryVector(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
    for (auto b : bits_) {
      if (b > 1) throw ContractError("binary vector entries must be 0 or 1");
    }
  }

  static BinaryVector from_nodes(std::size_t n, const std::vector<NodeId>& on) {
    BinaryVector v(n);
    for (NodeId i : on) v.set(i, true);
    return v;
  }

  std::size_t size() const { return bits_.size(); }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  void set(std::size_t i, bool value) { bits_.at(i) = value ? 1 : 0; }

  std::size_t count() const { return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1)); }

  std::vector<NodeId> nodes() const {
    std::vector<NodeId> out;
    for (std::size_t i = 0; i < bits_.size(); ++i) {
      if (bits_[i]) out.push_back(i);
    }
    return out;
  }

  Vector as_reals() const { return Vector(bits_.begin(), bits_.end()); }
  const std::vector<std::uint8_t>& bits() const { return bits_; }

  friend bool operator==(const BinaryVector&, const BinaryVector&) = default;

 private:
  std::vector<std::uint8_t> bits_;
};

/// Binary infection snapshot y.
using DiffusionObservation = BinaryVector<struct ObservationTag>;
/// Binary source indicator s.
using SeedVector = BinaryVector<struct SeedTag>;

// -----------------------------------------------------------------------------
// Propagation forest
// -----------------------------------------------------------------------------

/// Who-infected-whom forest: per-node optional parent and activation step.
struct PropagationForest {
  std::vector<std::optional<NodeId>> parent;
  std::vector<std::optional<std::size_t>> activation_step;

  PropagationForest() = default;
  explicit PropagationForest(std::size_t n) : parent(n), activation_step(n) {}

  std::size_t size() const { return parent.size(); }

  /// (parent, child) pairs sorted by child.
  std::vector<DirectedEdge> edges() const {
    std::vector<DirectedEdge> out;
    for (std::size_t i = 0; i < parent.size(); ++i) {
      if (parent[i]) out.push_back({*parent[i], i});
    }
    return out;
  }

  friend bool operator==(const PropagationForest&, const PropagationForest&) = default;
};

/// Edges (infector, infected) known to belong to the true forest.
using ObservedEdgeSet = std::set<DirectedEdge>;

// -----------------------------------------------------------------------------
// Queries and validation
// -----------------------------------------------------------------------------

/// {j : (j, i) in E and y_j = 1}, ascending.
inline std::vector<NodeId> infected_neighbors(const Graph& graph, const DiffusionObservation& y, NodeId i) {
  if (i >= graph.n_nodes()) throw ContractError("infected_neighbors: node out of range");
  std::vector<NodeId> out;
  for (std::size_t e : graph.in_edges(i)) {
    const NodeId j = graph.edge(e).src;
    if (y[j]) out.push_back(j);
  }
  return out;
}

/// Checks every forest invariant and returns all violations (empty means valid).
inline std::vector<std::string> validate_forest(const PropagationForest& forest, const Graph& graph,
                                                const DiffusionObservation& y, const SeedVector& s) {
  std::vector<std::string> v;
  const std::size_t n = graph.n_nodes();
  if (forest.parent.size() != n || forest.activation_step.size() != n || y.size() != n || s.size() != n) {
    v.push_back("shape mismatch");
    return v;
  }
  auto node = [](std::size_t i) { return "node " + std::to_string(i); };
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = forest.parent[i];
    const auto& step = forest.activation_step[i];
    if (s[i] && !y[i]) v.push_back("seed not infected: " + node(i));
    if (!y[i]) {
      if (p) v.push_back("uninfected node has parent: " + node(i));
      if (step) v.push_back("uninfected node has activation step: " + node(i));
      continue;
    }
    if (!step) v.push_back("infected node without activation step: " + node(i));
    if (s[i]) {
      if (p) v.push_back("seed has parent: " + node(i));
      if (step && *step != 0) v.push_back("seed activation step is not 0: " + node(i));
      continue;
    }
    if (!p) {
      v.push_back("uncovered infected node: " + node(i));
      continue;
    }
    if (*p >= n) {
      v.push_back("parent out of range: " + node(i));
      continue;
    }
    if (!graph.has_edge(*p, i)) v.push_back("parent is not a graph neighbor: " + node(i));
    if (!y[*p]) v.push_back("parent not infected: " + node(i));
    const auto& pstep = forest.activation_step[*p];
    if (step && pstep && !(*pstep < *step)) v.push_back("parent not activated earlier: " + node(i));
  }
  // Cycle detection by walking parent links with a three-colour marking.
  std::vector<std::uint8_t> state(n, 0);  // 0 unseen, 1 on current walk, 2 done
  for (std::size_t start = 0; start < n; ++start) {
    if (state[start]) continue;
    std::vector<std::size_t> walk;
    std::size_t cur = start;
    while (true) {
      if (state[cur] == 2) break;
      if (state[cur] == 1) {
        v.push_back("cycle through " + node(cur));
        break;
      }
      state[cur] = 1;
      walk.push_back(cur);
      const auto& p = forest.parent[cur];
      if (!p || *p >= n) break;
      cur = *p;
    }
    for (auto w : walk) state[w] = 2;
  }
  return v;
}

// -----------------------------------------------------------------------------
// Graph file format
// -----------------------------------------------------------------------------
//
//   dipt-graph 1
//   nodes <n> features <F> directed <0|1>
//   <n lines of F numbers>
//   edges <m>
//   <m lines "u v">
//
// '#' starts a comment. With directed 0 every edge line is expanded to both
// directions. Saving always writes the canonical directed form with sorted edges.

inline Graph parse_graph(std::istream& in, const std::string& source) {
  text::LineReader r(in, source);
  auto t = r.expect("header");
  if (t.size() != 2 || t[0] != "dipt-graph") r.fail("expected 'dipt-graph <version>'");
  if (r.to_int(t[1]) != 1) r.fail("unsupported graph format version");
  t = r.expect("size line");
  if (t.size() != 6 || t[0] != "nodes" || t[2] != "features" || t[4] != "directed") {
    r.fail("expected 'nodes <n> features <F> directed <0|1>'");
  }
  const std::size_t n = r.to_count(t[1]);
  const std::size_t f = r.to_count(t[3]);
  const long long directed = r.to_int(t[5]);
  if (directed != 0 && directed != 1) r.fail("directed flag must be 0 or 1");
  DenseMatrix features(n, f);
  for (std::size_t i = 0; i < n; ++i) {
    t = r.expect("feature row");
    if (t.size() != f) r.fail("feature row " + std::to_string(i) + " has " + std::to_string(t.size()) + " values");
    for (std::size_t c = 0; c < f; ++c) features(i, c) = r.to_double(t[c]);
  }
  t = r.expect("edge count");
  if (t.size() != 2 || t[0] != "edges") r.fail("expected 'edges <m>'");
  const std::size_t m = r.to_count(t[1]);
  std::set<DirectedEdge> seen;
  std::vector<DirectedEdge> edges;
  auto add = [&](NodeId u, NodeId v) {
    if (!seen.insert({u, v}).second) {
      r.fail("duplicate edge (" + std::to_string(u) + "," + std::to_string(v) + ")");
    }
    edges.push_back({u, v});
  };
  for (std::size_t e = 0; e < m; ++e) {
    t = r.expect("edge");
    if (t.size() != 2) r.fail("edge line must have two node ids");
    const std::size_t u = r.to_count(t[0]);
    const std::size_t v = r.to_count(t[1]);
    if (u >= n || v >= n) r.fail("node id out of range [0," + std::to_string(n) + ")");
    if (u == v) r.fail("self-loop at node " + std::to_string(u));
    add(u, v);
    if (directed == 0) add(v, u);
  }
  std::vector<std::string_view> extra;
  if (r.next(extra)) r.fail("trailing content after edge list");
  return Graph(n, std::move(edges), std::move(features));
}

inline Graph load_graph(const std::filesystem::path& path) {
  auto in = text::open_input(path);
  return parse_graph(in, path.string());
}

inline std::string format_graph(const Graph& g) {
  std::ostringstream out;
  out << "dipt-graph 1\n";
  out << "nodes " << g.n_nodes() << " features " << g.feature_dim() << " directed 1\n";
  for (std::size_t i = 0; i < g.n_nodes(); ++i) {
    const auto row = g.features_of(i);
    for (std::size_t c = 0; c < row.size(); ++c) out << (c ? " " : "") << text::format_double(row[c]);
    out << "\n";
  }
  out << "edges " << g.n_edges() << "\n";
  for (const auto& e : g.edges()) out << e.src << " " << e.dst << "\n";
  return out.str();
}

inline void save_graph(const Graph& g, const std::filesystem::path& path) { text::write_atomic(path, format_graph(g)); }

// -----------------------------------------------------------------------------
// Per-node files: header line with the node count, then one line per node.
// Forest files carry two columns "parent step", -1 meaning none.
// -----------------------------------------------------------------------------

template <class Tag>
std::string format_binary(const BinaryVector<Tag>& v) {
  std::ostringstream out;
  out << v.size() << "\n";
  for (std::size_t i = 0; i < v.size(); ++i) out << (v[i] ? 1 : 0) << "\n";
  return out.str();
}

template <class Tag>
BinaryVector<Tag> parse_binary(std::istream& in, const std::string& source) {
  text::LineReader r(in, source);
  auto t = r.expect("node count");
  if (t.size() != 1) r.fail("expected node count header");
  const std::size_t n = r.to_count(t[0]);
  BinaryVector<Tag> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    t = r.expect("node value");
    if (t.size() != 1) r.fail("expected one integer per line");
    const long long x = r.to_int(t[0]);
    if (x != 0 && x != 1) r.fail("entry must be 0 or 1");
    v.set(i, x == 1);
  }
  std::vector<std::string_view> extra;
  if (r.next(extra)) r.fail("more entries than the header's node count");
  return v;
}

inline DiffusionObservation load_observation(const std::filesystem::path& path) {
  auto in = text::open_input(path);
  return parse_binary<ObservationTag>(in, path.string());
}

inline SeedVector load_seeds(const std::filesystem::path& path) {
  auto in = text::open_input(path);
  return parse_binary<SeedTag>(in, path.string());
}

template <class Tag>
void save_binary(const BinaryVector<Tag>& v, const std::filesystem::path& path) {
  text::write_atomic(path, format_binary(v));
}

inline std::string format_forest(const PropagationForest& f) {
  std::ostringstream out;
  out << f.size() << "\n";
  for (std::size_t i = 0; i < f.size(); ++i) {
    out << (f.parent[i] ? static_cast<long long>(*f.parent[i]) : -1LL) << " "
        << (f.activation_step[i] ? static_cast<long long>(*f.activation_step[i]) : -1LL) << "\n";
  }
  return out.str();
}

inline PropagationForest parse_forest(std::istream& in, const std::string& source) {
  text::LineReader r(in, source);
  auto t = r.expect("node count");
  if (t.size() != 1) r.fail("expected node count header");
  const std::size_t n = r.to_count(t[0]);
  PropagationForest f(n);
  for (std::size_t i = 0; i < n; ++i) {
    t = r.expect("forest row");
    if (t.size() != 2) r.fail("expected 'parent step'");
    const long long p = r.to_int(t[0]);
    const long long s = r.to_int(t[1]);
    if (p < -1 || s < -1) r.fail("negative values other than -1 are not allowed");
    if (p >= static_cast<long long>(n)) r.fail("parent id out of range");
    if (p >= 0) f.parent[i] = static_cast<NodeId>(p);
    if (s >= 0) f.activation_step[i] = static_cast<std::size_t>(s);
  }
  std::vector<std::string_view> extra;
  if (r.next(extra)) r.fail("more rows than the header's node count");
  return f;
}

inline PropagationForest load_forest(const std::filesystem::path& path) {
  auto in = text::open_input(path);
  return parse_forest(in, path.string());
}

inline void save_forest(const PropagationForest& f, const std::filesystem::path& path) {
  text::write_atomic(path, format_forest(f));
}

inline std::string format_reals(std::span<const double> v) {
  std::ostringstream out;
  out << v.size() << "\n";
  for (double x : v) out << text::format_double(x) << "\n";
  return out.str();
}

inline Vector load_reals(const std::filesystem::path& path) {
  auto in = text::open_input(path);
  text::LineReader r(in, path.string());
  auto t = r.expect("node count");
  const std::size_t n = r.to_count(t.at(0));
  Vector v(n);
  for (auto& x : v) {
    t = r.expect("value");
    x = r.to_double(t.at(0));
  }
  return v;
}

}  // namespace dipt
