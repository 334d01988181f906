#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "clfe/errors.hpp"
#include "clfe/tensor.hpp"

namespace clfe {

/// Plain row-major feature table.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != r * c) throw DimensionError("matrix data length does not match " + std::to_string(r) + "x" + std::to_string(c));
  }

  bool empty() const { return rows == 0; }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  Tensor tensor() const { return Tensor::matrix(rows, cols, data); }

  bool operator==(const Matrix&) const = default;
};

using EdgeList = std::vector<std::pair<std::size_t, std::size_t>>;

/// Graph in CSR form. Row = source node, column = destination. Undirected
/// graphs store both directions; per-edge attributes follow CSR order.
struct Graph {
  std::size_t n = 0;
  bool undirected = true;
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> targets;
  Matrix node_feats;
  Matrix edge_feats;
  std::vector<int> node_labels;
  std::vector<int> edge_labels;
  std::optional<int> graph_label;
  std::optional<double> graph_target;

  std::size_t num_edges() const { return targets.size(); }
  std::size_t degree(std::size_t i) const { return offsets[i + 1] - offsets[i]; }
  std::span<const std::size_t> neighbors(std::size_t i) const { return {targets.data() + offsets[i], degree(i)}; }

  /// Source node of every CSR edge.
  std::vector<std::size_t> sources() const {
    std::vector<std::size_t> s(num_edges());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = offsets[i]; k < offsets[i + 1]; ++k) s[k] = i;
    return s;
  }

  std::optional<std::size_t> find_edge(std::size_t src, std::size_t dst) const {
    auto nb = neighbors(src);
    auto it = std::lower_bound(nb.begin(), nb.end(), dst);
    if (it == nb.end() || *it != dst) return std::nullopt;
    return offsets[src] + static_cast<std::size_t>(it - nb.begin());
  }

  bool has_self_loops() const {
    for (std::size_t i = 0; i < n; ++i)
      if (find_edge(i, i)) return true;
    return false;
  }

  /// Edges as listed in files: undirected graphs give each pair once
  /// (src <= dst), paired with the CSR index of that direction.
  std::vector<std::pair<std::pair<std::size_t, std::size_t>, std::size_t>> listed_edges() const {
    std::vector<std::pair<std::pair<std::size_t, std::size_t>, std::size_t>> out;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = offsets[i]; k < offsets[i + 1]; ++k)
        if (!undirected || i <= targets[k]) out.push_back({{i, targets[k]}, k});
    return out;
  }

  /// Throws ContractError when a structural invariant does not hold.
  void validate() const {
    if (offsets.size() != n + 1 || offsets.front() != 0 || offsets.back() != targets.size())
      throw ContractError("graph offsets inconsistent with node/edge counts");
    for (std::size_t i = 0; i < n; ++i) {
      if (offsets[i] > offsets[i + 1]) throw ContractError("graph offsets decrease at node " + std::to_string(i));
      for (std::size_t k = offsets[i]; k < offsets[i + 1]; ++k) {
        if (targets[k] >= n) throw ContractError("edge target " + std::to_string(targets[k]) + " out of range");
        if (k > offsets[i] && targets[k] <= targets[k - 1])
          throw ContractError("duplicate or unsorted edge from node " + std::to_string(i));
        if (undirected && !find_edge(targets[k], i))
          throw ContractError("undirected graph missing reverse of (" + std::to_string(i) + "," + std::to_string(targets[k]) + ")");
      }
    }
    if (!node_feats.empty() && node_feats.rows != n) throw ContractError("node feature rows differ from node count");
    if (!edge_feats.empty() && edge_feats.rows != num_edges()) throw ContractError("edge feature rows differ from edge count");
    if (!node_labels.empty() && node_labels.size() != n) throw ContractError("node label count differs from node count");
    if (!edge_labels.empty() && edge_labels.size() != num_edges()) throw ContractError("edge label count differs from edge count");
  }

  bool operator==(const Graph&) const = default;

  /// Builds a graph from an edge list. For undirected graphs each pair is
  /// listed once and mirrored; edge_feats/edge_labels align with `edges`.
  static Graph from_edges(std::size_t n, const EdgeList& edges, bool undirected = true, Matrix node_feats = {},
                          const Matrix& edge_feats = {}, std::span<const int> edge_labels = {}) {
    if (!edge_feats.empty() && edge_feats.rows != edges.size())
      throw DimensionError("edge features must align with the edge list");
    if (!edge_labels.empty() && edge_labels.size() != edges.size())
      throw DimensionError("edge labels must align with the edge list");
    struct Directed {
      std::size_t src, dst, listed;
    };
    std::vector<Directed> dir;
    dir.reserve(edges.size() * (undirected ? 2 : 1));
    for (std::size_t e = 0; e < edges.size(); ++e) {
      auto [s, t] = edges[e];
      if (s >= n || t >= n)
        throw IndexError("edge (" + std::to_string(s) + "," + std::to_string(t) + ") outside " + std::to_string(n) + " nodes");
      dir.push_back({s, t, e});
      if (undirected && s != t) dir.push_back({t, s, e});
    }
    std::sort(dir.begin(), dir.end(), [](const Directed& a, const Directed& b) {
      return a.src != b.src ? a.src < b.src : a.dst < b.dst;
    });
    for (std::size_t k = 1; k < dir.size(); ++k)
      if (dir[k].src == dir[k - 1].src && dir[k].dst == dir[k - 1].dst)
        throw ContractError("duplicate edge (" + std::to_string(dir[k].src) + "," + std::to_string(dir[k].dst) + ")");
    Graph g;
    g.n = n;
    g.undirected = undirected;
    g.offsets.assign(n + 1, 0);
    g.targets.resize(dir.size());
    for (std::size_t k = 0; k < dir.size(); ++k) {
      ++g.offsets[dir[k].src + 1];
      g.targets[k] = dir[k].dst;
    }
    for (std::size_t i = 0; i < n; ++i) g.offsets[i + 1] += g.offsets[i];
    if (!edge_feats.empty()) {
      g.edge_feats = Matrix(dir.size(), edge_feats.cols);
      for (std::size_t k = 0; k < dir.size(); ++k)
        std::copy_n(edge_feats.data.data() + dir[k].listed * edge_feats.cols, edge_feats.cols,
                    g.edge_feats.data.data() + k * edge_feats.cols);
    }
    if (!edge_labels.empty()) {
      g.edge_labels.resize(dir.size());
      for (std::size_t k = 0; k < dir.size(); ++k) g.edge_labels[k] = edge_labels[dir[k].listed];
    }
    g.node_feats = std::move(node_feats);
    g.validate();
    return g;
  }
};

/// Per-node out-degrees (equal to in-degrees for undirected graphs).
struct DegreeVector {
  std::vector<std::size_t> degree;

  explicit DegreeVector(const Graph& g) : degree(g.n) {
    for (std::size_t i = 0; i < g.n; ++i) degree[i] = g.degree(i);
  }
  /// Degrees of A + I.
  std::vector<std::size_t> self_looped() const {
    auto d = degree;
    for (auto& v : d) ++v;
    return d;
  }
};

/// Adds edge (i,i) to every node. Self-loop rows get zero edge features and label 0.
inline Graph add_self_loops(const Graph& g) {
  if (g.has_self_loops()) throw ContractError("add_self_loops: graph already has self-loops");
  Graph out = g;
  out.offsets.assign(g.n + 1, 0);
  out.targets.clear();
  out.targets.reserve(g.num_edges() + g.n);
  const std::size_t fw = g.edge_feats.cols;
  if (!g.edge_feats.empty()) out.edge_feats = Matrix(0, fw);
  out.edge_labels.clear();
  for (std::size_t i = 0; i < g.n; ++i) {
    bool placed = false;
    auto emit_loop = [&] {
      out.targets.push_back(i);
      if (!g.edge_feats.empty()) out.edge_feats.data.insert(out.edge_feats.data.end(), fw, 0.0);
      if (!g.edge_labels.empty()) out.edge_labels.push_back(0);
      placed = true;
    };
    for (std::size_t k = g.offsets[i]; k < g.offsets[i + 1]; ++k) {
      if (!placed && g.targets[k] > i) emit_loop();
      out.targets.push_back(g.targets[k]);
      if (!g.edge_feats.empty()) {
        auto r = g.edge_feats.row(k);
        out.edge_feats.data.insert(out.edge_feats.data.end(), r.begin(), r.end());
      }
      if (!g.edge_labels.empty()) out.edge_labels.push_back(g.edge_labels[k]);
    }
    if (!placed) emit_loop();
    out.offsets[i + 1] = out.targets.size();
  }
  if (!g.edge_feats.empty()) out.edge_feats.rows = out.targets.size();
  return out;
}

/// D~^{-1/2} (A + I) D~^{-1/2} in CSR form.
using NormalizedAdjacency = SparseMatrix;

inline NormalizedAdjacency sym_normalize(const Graph& g) {
  if (!g.undirected) throw ContractError("sym_normalize: symmetric normalization needs an undirected graph");
  Graph looped = add_self_loops(g);
  const auto deg = DegreeVector(looped).degree;
  NormalizedAdjacency a;
  a.rows = a.cols = g.n;
  a.offsets = looped.offsets;
  a.indices = looped.targets;
  a.values.resize(looped.num_edges());
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t k = looped.offsets[i]; k < looped.offsets[i + 1]; ++k) {
      const double prod = static_cast<double>(deg[i]) * static_cast<double>(deg[looped.targets[k]]);
      a.values[k] = 1.0 / std::sqrt(prod);
    }
  return a;
}

/// Block-diagonal merge of several graphs.
struct GraphBatch {
  Graph graph;
  std::vector<std::size_t> graph_offsets;
  std::vector<std::size_t> edge_offsets;
  /// Member graph of every node; non-decreasing.
  std::vector<std::size_t> segments;
  std::vector<int> graph_labels;
  std::vector<double> graph_targets;

  std::size_t num_graphs() const { return graph_offsets.size(); }
};

inline GraphBatch batch(std::span<const Graph* const> graphs) {
  if (graphs.empty()) throw ContractError("batch: no graphs");
  const Graph& first = *graphs.front();
  GraphBatch b;
  Graph& m = b.graph;
  m.undirected = first.undirected;
  m.node_feats = Matrix(0, first.node_feats.cols);
  // Edge attributes are judged on graphs that have edges; an edgeless graph
  // carries no per-edge rows either way.
  const Graph* edged = &first;
  for (const Graph* g : graphs)
    if (g->num_edges() > 0) {
      edged = g;
      break;
    }
  const bool node_labels = !first.node_labels.empty();
  const bool edge_labels = !edged->edge_labels.empty();
  const bool has_edge_feats = !edged->edge_feats.empty();
  m.edge_feats = Matrix(0, edged->edge_feats.cols);
  for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
    const Graph& g = *graphs[gi];
    if (g.node_feats.cols != first.node_feats.cols)
      throw DimensionError("batch: node feature width " + std::to_string(g.node_feats.cols) + " differs from " +
                           std::to_string(first.node_feats.cols));
    if (g.node_labels.empty() == node_labels) throw DimensionError("batch: label presence differs between graphs");
    if (g.num_edges() > 0) {
      if (g.edge_feats.empty() == has_edge_feats || (has_edge_feats && g.edge_feats.cols != edged->edge_feats.cols))
        throw DimensionError("batch: edge feature width differs between graphs");
      if (g.edge_labels.empty() == edge_labels) throw DimensionError("batch: label presence differs between graphs");
    }
    if (g.undirected != first.undirected) throw DimensionError("batch: mixed directed and undirected graphs");
    const std::size_t base = m.n;
    b.graph_offsets.push_back(base);
    b.edge_offsets.push_back(m.targets.size());
    for (std::size_t i = 0; i < g.n; ++i) {
      for (std::size_t k = g.offsets[i]; k < g.offsets[i + 1]; ++k) m.targets.push_back(g.targets[k] + base);
      m.offsets.push_back(m.targets.size());
      b.segments.push_back(gi);
    }
    m.n += g.n;
    m.node_feats.data.insert(m.node_feats.data.end(), g.node_feats.data.begin(), g.node_feats.data.end());
    m.edge_feats.data.insert(m.edge_feats.data.end(), g.edge_feats.data.begin(), g.edge_feats.data.end());
    m.node_labels.insert(m.node_labels.end(), g.node_labels.begin(), g.node_labels.end());
    m.edge_labels.insert(m.edge_labels.end(), g.edge_labels.begin(), g.edge_labels.end());
    if (g.graph_label) b.graph_labels.push_back(*g.graph_label);
    if (g.graph_target) b.graph_targets.push_back(*g.graph_target);
  }
  m.node_feats.rows = m.n;
  m.edge_feats.rows = has_edge_feats ? m.targets.size() : 0;
  if (graphs.size() == 1) {
    m.graph_label = first.graph_label;
    m.graph_target = first.graph_target;
  }
  return b;
}

inline GraphBatch batch(const std::vector<Graph>& graphs) {
  std::vector<const Graph*> ptrs;
  for (const auto& g : graphs) ptrs.push_back(&g);
  return batch(std::span<const Graph* const>(ptrs));
}

/// Inverse of batch().
inline std::vector<Graph> unbatch(const GraphBatch& b) {
  std::vector<Graph> out;
  const Graph& m = b.graph;
  std::size_t label_i = 0, target_i = 0;
  for (std::size_t gi = 0; gi < b.num_graphs(); ++gi) {
    const std::size_t n0 = b.graph_offsets[gi];
    const std::size_t n1 = gi + 1 < b.num_graphs() ? b.graph_offsets[gi + 1] : m.n;
    const std::size_t e0 = b.edge_offsets[gi];
    const std::size_t e1 = gi + 1 < b.num_graphs() ? b.edge_offsets[gi + 1] : m.num_edges();
    Graph g;
    g.n = n1 - n0;
    g.undirected = m.undirected;
    g.offsets.assign(1, 0);
    for (std::size_t i = n0; i < n1; ++i) g.offsets.push_back(m.offsets[i + 1] - e0);
    for (std::size_t k = e0; k < e1; ++k) g.targets.push_back(m.targets[k] - n0);
    const std::size_t fw = m.node_feats.cols;
    g.node_feats = Matrix(g.n, fw, std::vector<double>(m.node_feats.data.begin() + n0 * fw, m.node_feats.data.begin() + n1 * fw));
    if (!m.edge_feats.empty() && e1 > e0) {
      const std::size_t ew = m.edge_feats.cols;
      g.edge_feats = Matrix(e1 - e0, ew, std::vector<double>(m.edge_feats.data.begin() + e0 * ew, m.edge_feats.data.begin() + e1 * ew));
    }
    if (!m.node_labels.empty()) g.node_labels.assign(m.node_labels.begin() + n0, m.node_labels.begin() + n1);
    if (!m.edge_labels.empty() && e1 > e0) g.edge_labels.assign(m.edge_labels.begin() + e0, m.edge_labels.begin() + e1);
    if (b.graph_labels.size() == b.num_graphs()) g.graph_label = b.graph_labels[label_i++];
    if (b.graph_targets.size() == b.num_graphs()) g.graph_target = b.graph_targets[target_i++];
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace clfe
