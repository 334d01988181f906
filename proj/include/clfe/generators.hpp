#pragma once

// Seeded synthetic datasets: stochastic block model node classification,
// Euclidean TSP edge classification, and a structural graph regression task.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "clfe/errors.hpp"
#include "clfe/graph.hpp"
#include "clfe/rng.hpp"

namespace clfe {

// ---------------------------------------------------------------------------
// Stochastic block model

enum class SbmFeatures {
  /// One-hot block id, replaced by a uniformly random class with probability `noise`.
  noisy_onehot,
  /// One revealed node per block carries its one-hot id; every other node is all zeros.
  revealed_seeds,
};

struct SbmParams {
  std::vector<std::size_t> blocks{15, 15, 15, 15};
  double p_intra = 0.5;
  double p_inter = 0.1;
  double noise = 0.3;
  SbmFeatures features = SbmFeatures::noisy_onehot;
};

inline Graph gen_sbm(const SbmParams& p, std::uint64_t seed) {
  if (p.blocks.empty()) throw ContractError("gen_sbm: no blocks");
  for (auto s : p.blocks)
    if (s < 1) throw ContractError("gen_sbm: block sizes must be >= 1");
  for (double q : {p.p_intra, p.p_inter, p.noise})
    if (!(q >= 0.0 && q <= 1.0)) throw ContractError("gen_sbm: probabilities must lie in [0,1]");
  Rng rng(seed);
  const std::size_t C = p.blocks.size();
  std::vector<int> label;
  for (std::size_t b = 0; b < C; ++b) label.insert(label.end(), p.blocks[b], static_cast<int>(b));
  const std::size_t n = label.size();

  EdgeList edges;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (rng.bernoulli(label[i] == label[j] ? p.p_intra : p.p_inter)) edges.emplace_back(i, j);

  Matrix feats(n, C);
  if (p.features == SbmFeatures::noisy_onehot) {
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t c = static_cast<std::size_t>(label[i]);
      if (rng.bernoulli(p.noise)) c = rng.below(C);
      feats(i, c) = 1.0;
    }
  } else {
    std::size_t start = 0;
    for (std::size_t b = 0; b < C; ++b) {
      feats(start + rng.below(p.blocks[b]), b) = 1.0;
      start += p.blocks[b];
    }
  }
  Graph g = Graph::from_edges(n, edges, true, std::move(feats));
  g.node_labels = std::move(label);
  return g;
}

// ---------------------------------------------------------------------------
// Travelling salesman

struct Point {
  double x = 0.0;
  double y = 0.0;
};

inline double distance(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

inline constexpr std::size_t kMaxExactTspNodes = 14;

struct Tour {
  std::vector<std::size_t> order;
  double length = 0.0;
};

inline double tour_length(std::span<const Point> pts, std::span<const std::size_t> order) {
  double len = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) len += distance(pts[order[i]], pts[order[(i + 1) % order.size()]]);
  return len;
}

/// Exact shortest Hamiltonian cycle by dynamic programming over subsets.
inline Tour held_karp(std::span<const Point> pts) {
  const std::size_t n = pts.size();
  if (n < 3) throw ContractError("held_karp: need at least 3 points");
  if (n > kMaxExactTspNodes)
    throw ContractError("held_karp: " + std::to_string(n) + " nodes exceeds the exact limit of " +
                        std::to_string(kMaxExactTspNodes) + "; use the 2-opt heuristic labeling");
  // Node 0 is the fixed start; subsets range over nodes 1..n-1.
  const std::size_t m = n - 1;
  const std::size_t full = std::size_t{1} << m;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> cost(full * m, inf);
  std::vector<unsigned char> parent(full * m, 0);
  for (std::size_t j = 0; j < m; ++j) cost[(std::size_t{1} << j) * m + j] = distance(pts[0], pts[j + 1]);
  for (std::size_t mask = 1; mask < full; ++mask)
    for (std::size_t j = 0; j < m; ++j) {
      if (!(mask & (std::size_t{1} << j))) continue;
      const double c = cost[mask * m + j];
      if (c == inf) continue;
      for (std::size_t k = 0; k < m; ++k) {
        if (mask & (std::size_t{1} << k)) continue;
        const std::size_t next = mask | (std::size_t{1} << k);
        const double cand = c + distance(pts[j + 1], pts[k + 1]);
        if (cand < cost[next * m + k]) {
          cost[next * m + k] = cand;
          parent[next * m + k] = static_cast<unsigned char>(j);
        }
      }
    }
  double best = inf;
  std::size_t last = 0;
  for (std::size_t j = 0; j < m; ++j) {
    const double c = cost[(full - 1) * m + j] + distance(pts[j + 1], pts[0]);
    if (c < best) {
      best = c;
      last = j;
    }
  }
  Tour t;
  std::size_t mask = full - 1, j = last;
  std::vector<std::size_t> rev;
  while (true) {
    rev.push_back(j + 1);
    const std::size_t pj = parent[mask * m + j];
    const std::size_t prev_mask = mask & ~(std::size_t{1} << j);
    if (prev_mask == 0) break;
    mask = prev_mask;
    j = pj;
  }
  t.order.push_back(0);
  t.order.insert(t.order.end(), rev.rbegin(), rev.rend());
  t.length = tour_length(pts, t.order);
  return t;
}

/// Nearest-neighbour construction followed by 2-opt until no improving move.
inline Tour two_opt(std::span<const Point> pts) {
  const std::size_t n = pts.size();
  if (n < 3) throw ContractError("two_opt: need at least 3 points");
  std::vector<std::size_t> order{0};
  std::vector<bool> used(n, false);
  used[0] = true;
  for (std::size_t step = 1; step < n; ++step) {
    std::size_t best = n;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!used[j] && distance(pts[order.back()], pts[j]) < bd) {
        bd = distance(pts[order.back()], pts[j]);
        best = j;
      }
    used[best] = true;
    order.push_back(best);
  }
  bool improved = true;
  while (improved) {
    improved = false;
    for (std::size_t i = 0; i + 1 < n; ++i)
      for (std::size_t k = i + 2; k < n; ++k) {
        const std::size_t a = order[i], b = order[i + 1], c = order[k], d = order[(k + 1) % n];
        if (a == d) continue;
        const double delta = distance(pts[a], pts[c]) + distance(pts[b], pts[d]) - distance(pts[a], pts[b]) - distance(pts[c], pts[d]);
        if (delta < -1e-12) {
          std::reverse(order.begin() + static_cast<long>(i) + 1, order.begin() + static_cast<long>(k) + 1);
          improved = true;
        }
      }
  }
  return {order, tour_length(pts, order)};
}

enum class TspLabeling { exact, heuristic };

struct TspInstance {
  std::vector<Point> points;
  Graph graph;
  Tour tour;
  /// False when labels come from the 2-opt heuristic.
  bool exact = true;
};

/// k-nearest-neighbour graph over the points (symmetrized, tour edges added
/// when missing). Edge feature = Euclidean length, label 1 iff on the tour.
inline TspInstance tsp_from_points(std::vector<Point> pts, std::size_t k, TspLabeling labeling = TspLabeling::exact) {
  const std::size_t n = pts.size();
  if (n < 3) throw ContractError("gen_tsp: need at least 3 nodes");
  if (k >= n) throw ContractError("gen_tsp: k must be smaller than the node count");
  TspInstance inst;
  inst.exact = labeling == TspLabeling::exact;
  inst.tour = inst.exact ? held_karp(pts) : two_opt(pts);

  std::vector<std::vector<bool>> adj(n, std::vector<bool>(n, false));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) others.push_back(j);
    std::stable_sort(others.begin(), others.end(),
                     [&](std::size_t a, std::size_t b) { return distance(pts[i], pts[a]) < distance(pts[i], pts[b]); });
    for (std::size_t t = 0; t < k; ++t) adj[i][others[t]] = adj[others[t]][i] = true;
  }
  std::vector<std::vector<bool>> on_tour(n, std::vector<bool>(n, false));
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t a = inst.tour.order[t], b = inst.tour.order[(t + 1) % n];
    adj[a][b] = adj[b][a] = true;
    on_tour[a][b] = on_tour[b][a] = true;
  }
  EdgeList edges;
  std::vector<double> len;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (adj[i][j]) {
        edges.emplace_back(i, j);
        len.push_back(distance(pts[i], pts[j]));
        labels.push_back(on_tour[i][j] ? 1 : 0);
      }
  Matrix nf(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    nf(i, 0) = pts[i].x;
    nf(i, 1) = pts[i].y;
  }
  inst.graph = Graph::from_edges(n, edges, true, std::move(nf), Matrix(edges.size(), 1, std::move(len)), labels);
  inst.points = std::move(pts);
  return inst;
}

inline TspInstance make_tsp_instance(std::size_t n, std::size_t k, std::uint64_t seed,
                                     TspLabeling labeling = TspLabeling::exact) {
  if (labeling == TspLabeling::exact && n > kMaxExactTspNodes)
    throw ContractError("gen_tsp: exact labeling supports at most " + std::to_string(kMaxExactTspNodes) +
                        " nodes; request heuristic labeling for larger instances");
  Rng rng(seed);
  std::vector<Point> pts(n);
  for (auto& p : pts) {
    p.x = rng.uniform();
    p.y = rng.uniform();
  }
  return tsp_from_points(std::move(pts), k, labeling);
}

inline Graph gen_tsp(std::size_t n, std::size_t k, std::uint64_t seed, TspLabeling labeling = TspLabeling::exact) {
  return make_tsp_instance(n, k, seed, labeling).graph;
}

// ---------------------------------------------------------------------------
// Structural regression

struct RegressionParams {
  std::size_t min_nodes = 6;
  std::size_t max_nodes = 14;
  double edge_prob = 0.3;
  std::size_t categories = 4;
  std::size_t designated_category = 0;
  double w_degree = 1.0;
  double w_triangles = 1.0;
  double w_category = 1.0;
};

inline std::size_t count_triangles(const Graph& g) {
  std::size_t t = 0;
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j : g.neighbors(i)) {
      if (j <= i) continue;
      for (std::size_t k : g.neighbors(j))
        if (k > j && g.find_edge(i, k)) ++t;
    }
  return t;
}

/// w_degree * mean degree + w_triangles * triangles / n + w_category * (#nodes of the designated category) / n.
/// The category of a node is the argmax of its one-hot feature row.
inline double structural_target(const Graph& g, const RegressionParams& p) {
  if (g.n == 0) throw ContractError("structural_target: empty graph");
  const double n = static_cast<double>(g.n);
  std::size_t designated = 0;
  for (std::size_t i = 0; i < g.n; ++i) {
    auto r = g.node_feats.row(i);
    const auto cat = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
    if (cat == p.designated_category) ++designated;
  }
  return p.w_degree * static_cast<double>(g.num_edges()) / n + p.w_triangles * static_cast<double>(count_triangles(g)) / n +
         p.w_category * static_cast<double>(designated) / n;
}

inline bool is_connected(const Graph& g) {
  if (g.n == 0) return true;
  std::vector<bool> seen(g.n, false);
  std::vector<std::size_t> stack{0};
  seen[0] = true;
  std::size_t count = 1;
  while (!stack.empty()) {
    auto v = stack.back();
    stack.pop_back();
    for (auto w : g.neighbors(v))
      if (!seen[w]) {
        seen[w] = true;
        ++count;
        stack.push_back(w);
      }
  }
  return count == g.n;
}

inline std::vector<Graph> gen_regression(std::size_t n_graphs, const RegressionParams& p, std::uint64_t seed) {
  if (p.min_nodes < 2 || p.max_nodes < p.min_nodes) throw ContractError("gen_regression: need 2 <= min_nodes <= max_nodes");
  if (p.categories == 0 || p.designated_category >= p.categories) throw ContractError("gen_regression: bad category vocabulary");
  if (!(p.edge_prob > 0.0 && p.edge_prob <= 1.0)) throw ContractError("gen_regression: edge_prob must lie in (0,1]");
  Rng rng(seed);
  std::vector<Graph> out;
  out.reserve(n_graphs);
  for (std::size_t gi = 0; gi < n_graphs; ++gi) {
    const std::size_t n = p.min_nodes + rng.below(p.max_nodes - p.min_nodes + 1);
    Graph g;
    for (std::size_t attempt = 0;; ++attempt) {
      if (attempt == 100000) throw ContractError("gen_regression: could not sample a connected graph; raise edge_prob");
      EdgeList edges;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
          if (rng.bernoulli(p.edge_prob)) edges.emplace_back(i, j);
      g = Graph::from_edges(n, edges);
      if (is_connected(g)) break;
    }
    g.node_feats = Matrix(n, p.categories);
    for (std::size_t i = 0; i < n; ++i) g.node_feats(i, rng.below(p.categories)) = 1.0;
    g.graph_target = structural_target(g, p);
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace clfe
