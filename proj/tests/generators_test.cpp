#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "clfe/generators.hpp"

using namespace clfe;

namespace {

// Brute-force tour oracle: every permutation fixing node 0.
double brute_force_tour(const std::vector<Point>& pts) {
  std::vector<std::size_t> rest(pts.size() - 1);
  std::iota(rest.begin(), rest.end(), 1);
  double best = 1e300;
  do {
    std::vector<std::size_t> order{0};
    order.insert(order.end(), rest.begin(), rest.end());
    best = std::min(best, tour_length(pts, order));
  } while (std::next_permutation(rest.begin(), rest.end()));
  return best;
}

std::vector<std::size_t> positive_degree(const Graph& g) {
  std::vector<std::size_t> deg(g.n, 0);
  auto src = g.sources();
  for (std::size_t k = 0; k < g.num_edges(); ++k)
    if (g.edge_labels[k] == 1) ++deg[src[k]];
  return deg;
}

}  // namespace

TEST(Sbm, DegenerateProbabilitiesGiveCliques) {
  SbmParams p;
  p.blocks = {2, 2};
  p.p_intra = 1.0;
  p.p_inter = 0.0;
  auto g = gen_sbm(p, 7);
  EXPECT_EQ(g.num_edges(), 4u);
  EXPECT_TRUE(g.find_edge(0, 1));
  EXPECT_TRUE(g.find_edge(2, 3));
  EXPECT_FALSE(g.find_edge(1, 2));
  EXPECT_EQ(g.node_labels, (std::vector<int>{0, 0, 1, 1}));
}

TEST(Sbm, EqualProbabilitiesMakeEdgesIndependentOfLabels) {
  SbmParams p;
  p.blocks = {10, 10, 10};
  p.p_intra = p.p_inter = 0.3;
  double intra = 0, intra_pairs = 0, inter = 0, inter_pairs = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    auto g = gen_sbm(p, s);
    for (std::size_t i = 0; i < g.n; ++i)
      for (std::size_t j = i + 1; j < g.n; ++j) {
        const bool same = g.node_labels[i] == g.node_labels[j];
        const bool e = g.find_edge(i, j).has_value();
        (same ? intra : inter) += e;
        (same ? intra_pairs : inter_pairs) += 1;
      }
  }
  const double ratio = (intra / intra_pairs) / (inter / inter_pairs);
  // ~135k intra and ~300k inter pairs at p=0.3: standard error of the ratio is under 0.5%.
  EXPECT_NEAR(ratio, 1.0, 0.02);
}

TEST(Sbm, FixedSeedIsBitIdentical) {
  SbmParams p;
  EXPECT_EQ(gen_sbm(p, 99), gen_sbm(p, 99));
  EXPECT_NE(gen_sbm(p, 99), gen_sbm(p, 100));
  p.features = SbmFeatures::revealed_seeds;
  EXPECT_EQ(gen_sbm(p, 5), gen_sbm(p, 5));
}

TEST(Sbm, NoiseZeroGivesCleanOneHotAndRevealedSeedsGivesOnePerBlock) {
  SbmParams p;
  p.noise = 0.0;
  auto g = gen_sbm(p, 3);
  for (std::size_t i = 0; i < g.n; ++i) EXPECT_EQ(g.node_feats(i, static_cast<std::size_t>(g.node_labels[i])), 1.0);
  p.features = SbmFeatures::revealed_seeds;
  auto h = gen_sbm(p, 3);
  for (std::size_t c = 0; c < p.blocks.size(); ++c) {
    double col = 0.0;
    for (std::size_t i = 0; i < h.n; ++i) {
      col += h.node_feats(i, c);
      if (h.node_feats(i, c) == 1.0) {
        EXPECT_EQ(h.node_labels[i], static_cast<int>(c));
      }
    }
    EXPECT_EQ(col, 1.0);
  }
}

TEST(Sbm, RejectsBadParameters) {
  SbmParams p;
  p.p_intra = 1.5;
  EXPECT_THROW(gen_sbm(p, 1), ContractError);
  p = {};
  p.blocks = {3, 0};
  EXPECT_THROW(gen_sbm(p, 1), ContractError);
}

TEST(Tsp, ThreeNodesAllOnTour) {
  auto g = gen_tsp(3, 2, 11);
  for (int l : g.edge_labels) EXPECT_EQ(l, 1);
  EXPECT_EQ(g.num_edges(), 6u);
}

TEST(Tsp, UnitSquareCornersLabelPerimeter) {
  auto inst = tsp_from_points({{0, 0}, {1, 0}, {1, 1}, {0, 1}}, 3);
  const auto& g = inst.graph;
  EXPECT_NEAR(inst.tour.length, 4.0, 1e-12);
  for (auto [e, k] : g.listed_edges()) {
    const bool diagonal = (e.first + 2 == e.second);
    EXPECT_EQ(g.edge_labels[k], diagonal ? 0 : 1) << e.first << "-" << e.second;
    EXPECT_NEAR(g.edge_feats(k, 0), diagonal ? std::sqrt(2.0) : 1.0, 1e-15);
  }
}

TEST(Tsp, ExactLabelsFormHamiltonianCycleAndMatchBruteForce) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    const std::size_t n = 4 + s % 5;
    auto inst = make_tsp_instance(n, 3, s);
    const auto& g = inst.graph;
    std::size_t positives = 0;
    for (auto [e, k] : g.listed_edges()) positives += g.edge_labels[k] == 1;
    EXPECT_EQ(positives, n);
    for (auto d : positive_degree(g)) EXPECT_EQ(d, 2u);
    EXPECT_NEAR(inst.tour.length, brute_force_tour(inst.points), 1e-12);
    EXPECT_EQ(g.node_feats.cols, 2u);
  }
}

TEST(Tsp, ExactModeRejectsLargeInstances) {
  EXPECT_THROW(gen_tsp(kMaxExactTspNodes + 1, 4, 1), ContractError);
  auto g = gen_tsp(30, 5, 1, TspLabeling::heuristic);
  for (auto d : positive_degree(g)) EXPECT_EQ(d, 2u);
  EXPECT_THROW(gen_tsp(5, 5, 1), ContractError);
}

TEST(Tsp, TwoOptNeverBeatsExact) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto a = make_tsp_instance(9, 4, s);
    EXPECT_GE(two_opt(a.points).length + 1e-12, a.tour.length);
  }
}

TEST(Regression, TriangleWithDesignatedCategory) {
  Matrix f(3, 4);
  for (std::size_t i = 0; i < 3; ++i) f(i, 0) = 1.0;
  auto k3 = Graph::from_edges(3, {{0, 1}, {1, 2}, {0, 2}}, true, f);
  EXPECT_DOUBLE_EQ(structural_target(k3, RegressionParams{}), 2.0 + 1.0 / 3.0 + 1.0);
}

TEST(Regression, IsomorphicGraphsShareTargets) {
  Matrix f(4, 2);
  f(0, 0) = f(1, 1) = f(2, 0) = f(3, 1) = 1.0;
  auto a = Graph::from_edges(4, {{0, 1}, {1, 2}, {2, 3}, {0, 2}}, true, f);
  // Relabel nodes by the permutation 0->3, 1->2, 2->1, 3->0.
  Matrix fp(4, 2);
  fp(3, 0) = fp(2, 1) = fp(1, 0) = fp(0, 1) = 1.0;
  auto b = Graph::from_edges(4, {{3, 2}, {2, 1}, {1, 0}, {3, 1}}, true, fp);
  RegressionParams p;
  p.categories = 2;
  EXPECT_EQ(structural_target(a, p), structural_target(b, p));
}

TEST(Regression, FixedSeedAndConnectivity) {
  RegressionParams p;
  auto a = gen_regression(20, p, 8), b = gen_regression(20, p, 8);
  EXPECT_EQ(a, b);
  for (const auto& g : a) {
    EXPECT_TRUE(is_connected(g));
    EXPECT_GE(g.n, p.min_nodes);
    EXPECT_LE(g.n, p.max_nodes);
    EXPECT_EQ(*g.graph_target, structural_target(g, p));
  }
}
