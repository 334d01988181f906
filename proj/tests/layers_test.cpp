#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "clfe/generators.hpp"
#include "clfe/grad_check.hpp"
#include "clfe/layers.hpp"

using namespace clfe;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

void set(Tensor& t, std::vector<double> v) {
  ASSERT_EQ(v.size(), t.numel());
  std::copy(v.begin(), v.end(), t.mutable_data().begin());
}

Tensor random_features(std::size_t n, std::size_t d, Rng& rng) {
  std::vector<double> v(n * d);
  for (auto& x : v) x = rng.uniform(-1, 1);
  return Tensor::matrix(n, d, std::move(v));
}

Graph random_connected(std::size_t n, double p, std::uint64_t seed) {
  RegressionParams rp;
  rp.min_nodes = rp.max_nodes = n;
  rp.edge_prob = p;
  return gen_regression(1, rp, seed).front();
}

LayerParams make_params(const LayerSpec& spec, std::uint64_t seed) {
  Rng a(seed), b(seed + 1000);
  return LayerParams::init(spec, a, b);
}

// Runs one layer; gatedgcn gets an edge state of ones unless provided.
Tensor run_layer(const LayerSpec& spec, LayerParams& p, const GraphContext& ctx, const Tensor& H, Tensor E = {}) {
  if (spec.backbone == Backbone::gatedgcn && !E) E = Tensor::filled({ctx.num_edges(), spec.width}, 1.0);
  return layer_forward(spec, p, ctx, H, E ? &E : nullptr, true);
}

LayerSpec spec_for(Backbone b, bool clfe, std::size_t d = 4) {
  LayerSpec s;
  s.backbone = b;
  s.width = d;
  s.clfe = clfe;
  s.heads = 2;
  s.kernels = 2;
  return s;
}

}  // namespace

TEST(Gcn, Examples) {
  auto g = Graph::from_edges(2, {{0, 1}});
  auto adj = sym_normalize(g);
  LayerSpec s = spec_for(Backbone::gcn, false, 2);
  auto p = make_params(s, 1);
  set(p.weight, {1, 0, 0, 1});
  EXPECT_EQ(vals(gcn_hidden(Tensor::identity(2), adj, p).h), (std::vector<double>{0.5, 0.5, 0.5, 0.5}));
  set(p.weight, {0, 0, 0, 0});
  auto zero = gcn_hidden(Tensor::identity(2), adj, p).h;
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);

  auto iso = Graph::from_edges(3, {{0, 1}});
  set(p.weight, {1, 2, 3, 4});
  auto H = Tensor::matrix(3, 2, {1, 1, 2, 2, 5, -1});
  auto h = gcn_hidden(H, sym_normalize(iso), p).h;
  EXPECT_EQ(h[4], 5 * 1 + -1 * 3.0);
  EXPECT_EQ(h[5], 5 * 2 + -1 * 4.0);
  EXPECT_THROW(gcn_hidden(Tensor::identity(3), adj, p), DimensionError);
}

TEST(Sage, Examples) {
  LayerSpec s = spec_for(Backbone::sage, false, 1);
  auto p = make_params(s, 1);
  set(p.weight, {1, 1});
  GraphContext path(Graph::from_edges(2, {{0, 1}}));
  EXPECT_EQ(sage_hidden(Tensor::matrix(2, 1, {2, 4}), path, p).h[0], 6.0);

  set(p.weight, {0.5, 7});
  GraphContext iso(Graph::from_edges(1, {}));
  EXPECT_EQ(sage_hidden(Tensor::matrix(1, 1, {3}), iso, p).h[0], 1.5);

  // 4-cycle is 2-regular: mean term equals the constant feature.
  set(p.weight, {0, 1});
  GraphContext cyc(Graph::from_edges(4, {{0, 1}, {1, 2}, {2, 3}, {3, 0}}));
  auto mean_only = sage_hidden(Tensor::filled({4, 1}, 1.25), cyc, p).h;
  for (double v : mean_only.data()) EXPECT_EQ(v, 1.25);
}

TEST(Gat, Examples) {
  LayerSpec s = spec_for(Backbone::gat, false, 4);
  auto p = make_params(s, 3);
  Rng rng(4);
  GraphContext single(Graph::from_edges(1, {}));
  Tensor att;
  auto H = random_features(1, 4, rng);
  auto h = gat_hidden(H, single, p, &att).h;
  EXPECT_EQ(vals(att), (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(vals(h), vals(matmul(H, p.weight)));

  // Star centre 0 with leaves 1 and 2 carrying identical features.
  GraphContext star(Graph::from_edges(3, {{0, 1}, {0, 2}}));
  auto Hs = Tensor::matrix(3, 4, {0.1, 0.2, 0.3, 0.4, 1, -1, 2, 0.5, 1, -1, 2, 0.5});
  gat_hidden(Hs, star, p, &att);
  std::vector<double> on_leaf;
  for (std::size_t e = 0; e < star.loop_src.size(); ++e)
    if (star.loop_dst[e] == 0 && star.loop_src[e] != 0)
      for (std::size_t k = 0; k < 2; ++k) on_leaf.push_back(att[e * 2 + k]);
  ASSERT_EQ(on_leaf.size(), 4u);
  EXPECT_EQ(on_leaf[0], on_leaf[2]);
  EXPECT_EQ(on_leaf[1], on_leaf[3]);

  s.heads = 3;
  EXPECT_THROW(s.validate(), ContractError);
}

TEST(Gat, AttentionRowsSumToOne) {
  LayerSpec s = spec_for(Backbone::gat, true, 6);
  s.heads = 3;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto g = random_connected(8, 0.35, seed);
    GraphContext ctx(g);
    auto p = make_params(s, seed);
    Rng rng(seed);
    Tensor att;
    gat_hidden(random_features(8, 6, rng), ctx, p, &att);
    std::vector<double> tot(8 * 3, 0.0);
    for (std::size_t e = 0; e < ctx.loop_dst.size(); ++e)
      for (std::size_t k = 0; k < 3; ++k) tot[ctx.loop_dst[e] * 3 + k] += att[e * 3 + k];
    for (double t : tot) EXPECT_NEAR(t, 1.0, 1e-12);
  }
}

TEST(MoNet, Examples) {
  LayerSpec s = spec_for(Backbone::monet, false, 1);
  s.kernels = 1;
  auto p = make_params(s, 2);
  set(p.weight, {1});
  GraphContext path(Graph::from_edges(2, {{0, 1}}));
  const double u = 1.0 / std::sqrt(2.0);
  set(p.mu, {u, u});
  Tensor w;
  auto h = monet_hidden(Tensor::matrix(2, 1, {2, 5}), path, p, &w);
  for (double v : w.data()) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(vals(h.h), (std::vector<double>{7, 7}));

  set(p.mu, {0.0, 1.0});
  set(p.log_sigma, {std::log(1e6), std::log(1e6)});
  monet_hidden(Tensor::matrix(2, 1, {2, 5}), path, p, &w);
  for (double v : w.data()) EXPECT_NEAR(v, 1.0, 1e-6);
}

TEST(MoNet, RegularGraphWithMeansAtPseudoCoordinates) {
  LayerSpec s = spec_for(Backbone::monet, false, 2);
  auto p = make_params(s, 5);
  GraphContext cyc(Graph::from_edges(5, {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 0}}));
  const double u = 1.0 / std::sqrt(3.0);
  set(p.mu, {u, u, u, u});
  Tensor w;
  monet_hidden(Tensor::filled({5, 2}, 1.0), cyc, p, &w);
  for (double v : w.data()) EXPECT_EQ(v, 1.0);
}

TEST(GatedGcn, Examples) {
  LayerSpec s = spec_for(Backbone::gatedgcn, false, 2);
  auto p = make_params(s, 7);
  Rng rng(8);

  // Zero gate weights: every logit is 0, so eta = 0.5 / (deg * 0.5 + eps).
  GraphContext star(Graph::from_edges(4, {{0, 1}, {0, 2}, {0, 3}}));
  for (Tensor* t : {&p.gate_a, &p.gate_b, &p.gate_c}) set(*t, {0, 0, 0, 0});
  auto out = gatedgcn_hidden(random_features(4, 2, rng), Tensor::filled({6, 2}, 1.0), star, p, Norm::none, true);
  for (std::size_t e = 0; e < star.num_edges(); ++e)
    if (star.dst[e] == 0) {
      for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(out.gates[e * 2 + k], 1.0 / 3.0, 1e-6);
    }

  // Saturated logits stay finite and near zero.
  set(p.gate_a, {20, 0, 0, 20});
  auto sat = gatedgcn_hidden(random_features(4, 2, rng), Tensor::filled({6, 2}, -2.0), star, p, Norm::none, true);
  for (double v : sat.gates.data()) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0);
  }
  for (double v : sat.hidden.h.data()) EXPECT_TRUE(std::isfinite(v));

  // One in-edge per node: eta = s / (s + eps).
  GraphContext path(Graph::from_edges(2, {{0, 1}}));
  auto one = gatedgcn_hidden(random_features(2, 2, rng), Tensor::filled({2, 2}, 0.3), path, p, Norm::none, true);
  for (double v : one.gates.data()) EXPECT_NEAR(v, 1.0, 1e-5);

  EXPECT_THROW(gatedgcn_hidden(random_features(2, 2, rng), Tensor{}, path, p, Norm::none, true), ContractError);
}

TEST(GatedGcn, GatesLieInOpenUnitInterval) {
  LayerSpec s = spec_for(Backbone::gatedgcn, true, 3);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto g = random_connected(7, 0.4, seed);
    GraphContext ctx(g);
    auto p = make_params(s, seed);
    Rng rng(seed);
    auto out = gatedgcn_hidden(random_features(7, 3, rng), random_features(g.num_edges(), 3, rng), ctx, p, Norm::none, true);
    for (double v : out.gates.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(ClfeCompose, Examples) {
  LayerSpec s = spec_for(Backbone::gcn, true, 1);
  s.activation = Activation::identity;
  auto p = make_params(s, 1);
  set(p.clfe_weight, {0.5, 0.5});
  set(p.clfe_bias, {0});
  EXPECT_EQ(clfe_compose(Tensor::matrix(1, 1, {2}), {Tensor::matrix(1, 1, {3})}, p, s)[0], 7.5);

  s.activation = Activation::relu;
  set(p.clfe_weight, {0, 0});
  EXPECT_EQ(clfe_compose(Tensor::matrix(1, 1, {3}), {Tensor::matrix(1, 1, {-5})}, p, s)[0], 3.0);

  EXPECT_THROW(clfe_compose(Tensor::zeros({2, 1}), {Tensor::zeros({2, 2})}, p, s), DimensionError);
}

TEST(ClfeCompose, SkipOffDropsInput) {
  LayerSpec s = spec_for(Backbone::gcn, false, 1);
  s.skip = false;
  auto p = make_params(s, 1);
  EXPECT_EQ(clfe_compose(Tensor::matrix(1, 1, {3}), {Tensor::matrix(1, 1, {2})}, p, s)[0], 2.0);
}

TEST(StackForward, EmptyStackReturnsInput) {
  GraphContext ctx(Graph::from_edges(2, {{0, 1}}));
  auto X = Tensor::matrix(2, 2, {1, 2, 3, 4});
  auto out = stack_forward({}, {}, ctx, X, nullptr, true);
  EXPECT_EQ(vals(out), vals(X));
}

TEST(StackForward, SingleGcnLayerIsHiddenThenCompose) {
  auto g = Graph::from_edges(2, {{0, 1}});
  GraphContext ctx(g);
  LayerSpec s = spec_for(Backbone::gcn, true, 2);
  std::vector<LayerSpec> specs{s};
  std::vector<LayerParams> ps{make_params(s, 9)};
  auto X = Tensor::matrix(2, 2, {0.3, -0.7, 1.1, 0.2});
  auto expected = clfe_compose(X, gcn_hidden(X, sym_normalize(g), ps[0]), ps[0], s);
  EXPECT_EQ(vals(stack_forward(specs, ps, ctx, X, nullptr, true)), vals(expected));
}

TEST(StackForward, DeepStackOnLargeSbmStaysFiniteAndBackpropagates) {
  SbmParams sp;
  sp.blocks = {25, 25, 25, 25};
  auto g = gen_sbm(sp, 1);
  GraphContext ctx(g);
  for (Backbone b : kAllBackbones) {
    LayerSpec s = spec_for(b, true, 8);
    std::vector<LayerSpec> specs(16, s);
    std::vector<LayerParams> ps;
    Rng br(1), cr(2);
    for (auto& ls : specs) ps.push_back(LayerParams::init(ls, br, cr));
    Rng rng(3);
    auto X = random_features(g.n, 8, rng);
    X.set_requires_grad(true);
    Tensor E = Tensor::filled({g.num_edges(), 8}, 1.0);
    Tape tape;
    Tensor loss;
    {
      Tape::Scope scope(tape);
      auto out = stack_forward(specs, ps, ctx, X, b == Backbone::gatedgcn ? &E : nullptr, true);
      for (double v : out.data()) ASSERT_TRUE(std::isfinite(v)) << to_string(b);
      loss = mean_rows(out);
      loss = sum(loss);
    }
    tape.backward(loss);
    for (double v : X.grad()) ASSERT_TRUE(std::isfinite(v)) << to_string(b);
  }
}

TEST(LayerProperty, ZeroClfeIsBitIdenticalToBaseline) {
  for (Backbone b : kAllBackbones)
    for (Norm nm : {Norm::none, Norm::batch})
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto g = random_connected(6, 0.4, seed);
        GraphContext ctx(g);
        LayerSpec on = spec_for(b, true, 4), off = spec_for(b, false, 4);
        on.norm = off.norm = nm;
        auto p_on = make_params(on, seed), p_off = make_params(off, seed);
        set(p_on.clfe_weight, std::vector<double>(32, 0.0));
        Rng rng(seed);
        auto H = random_features(6, 4, rng);
        EXPECT_EQ(vals(run_layer(on, p_on, ctx, H)), vals(run_layer(off, p_off, ctx, H))) << to_string(b);
      }
}

TEST(LayerProperty, WidthIsPreserved) {
  auto g = random_connected(5, 0.5, 1);
  GraphContext ctx(g);
  for (Backbone b : kAllBackbones)
    for (std::size_t d : {2u, 4u, 6u}) {
      auto s = spec_for(b, true, d);
      auto p = make_params(s, 1);
      Rng rng(2);
      auto out = run_layer(s, p, ctx, random_features(5, d, rng));
      EXPECT_EQ(out.shape(), (Shape{5, d}));
    }
}

TEST(LayerProperty, GradientsMatchFiniteDifferences) {
  for (Backbone b : kAllBackbones)
    for (bool clfe : {false, true})
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        auto g = random_connected(5, 0.5, seed + 10);
        GraphContext ctx(g);
        auto s = spec_for(b, clfe, 4);
        s.activation = Activation::tanh;
        auto p = make_params(s, seed);
        Rng rng(seed);
        auto H = random_features(5, 4, rng);
        auto E = random_features(g.num_edges(), 4, rng);
        auto R = random_features(5, 4, rng);
        std::vector<Tensor> params{H};
        for (auto& [name, t] : p.named_parameters(s)) params.push_back(t);
        if (b == Backbone::gatedgcn) params.push_back(E);
        auto rep = grad_check(
            [&] {
              Tensor e = E;
              return sum(mul(layer_forward(s, p, ctx, params[0], &e, true), R));
            },
            params);
        EXPECT_TRUE(rep.passed) << to_string(b) << " clfe=" << clfe << " param " << rep.worst_param << "["
                                << rep.worst_index << "] rel " << rep.max_rel_error << " analytic " << rep.worst_analytic
                                << " numeric " << rep.worst_numeric;
      }
}

TEST(LayerProperty, ReluLayersPassGradCheckAwayFromKinks) {
  for (Backbone b : kAllBackbones) {
    auto g = random_connected(5, 0.5, 3);
    GraphContext ctx(g);
    auto s = spec_for(b, true, 4);
    s.norm = Norm::batch;
    auto p = make_params(s, 4);
    Rng rng(5);
    auto H = random_features(5, 4, rng);
    auto E = random_features(g.num_edges(), 4, rng);
    auto R = random_features(5, 4, rng);
    std::vector<Tensor> params{H};
    for (auto& [name, t] : p.named_parameters(s)) params.push_back(t);
    auto rep = grad_check(
        [&] {
          Tensor e = E;
          return sum(mul(layer_forward(s, p, ctx, params[0], &e, true), R));
        },
        params);
    EXPECT_TRUE(rep.passed) << to_string(b) << " rel " << rep.max_rel_error;
    EXPECT_GT(rep.checked, 0u);
  }
}

TEST(LayerProperty, PermutationEquivariance) {
  for (Backbone b : kAllBackbones)
    for (bool clfe : {false, true})
      for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const std::size_t n = 7;
        auto g = random_connected(n, 0.4, seed);
        Rng rng(seed + 50);
        std::vector<std::size_t> pi(n);
        std::iota(pi.begin(), pi.end(), 0);
        rng.shuffle(pi);
        EdgeList pe;
        for (auto [e, k] : g.listed_edges()) pe.emplace_back(pi[e.first], pi[e.second]);
        auto gp = Graph::from_edges(n, pe);
        auto s = spec_for(b, clfe, 4);
        auto p1 = make_params(s, seed), p2 = make_params(s, seed);
        auto H = random_features(n, 4, rng);
        std::vector<double> hp(n * 4);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < 4; ++j) hp[pi[i] * 4 + j] = H[i * 4 + j];
        // Edge state: constant per edge so the permuted graph sees the same inputs.
        auto out = run_layer(s, p1, GraphContext(g), H);
        auto outp = run_layer(s, p2, GraphContext(gp), Tensor::matrix(n, 4, hp));
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < 4; ++j)
            EXPECT_NEAR(outp[pi[i] * 4 + j], out[i * 4 + j], 1e-10) << to_string(b);
      }
}

TEST(LayerParams, ClfeWeightHasTwiceWidthRowsAndIsRegistered) {
  for (Backbone b : kAllBackbones) {
    auto s = spec_for(b, true, 4);
    auto p = make_params(s, 1);
    EXPECT_EQ(p.clfe_weight.shape(), (Shape{8, 4}));
    bool found = false;
    for (auto& [name, t] : p.named_parameters(s)) {
      EXPECT_TRUE(t.requires_grad());
      found = found || name == "clfe_weight";
    }
    EXPECT_TRUE(found);
  }
}
