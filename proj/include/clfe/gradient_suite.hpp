#pragma once

// Finite-difference check of one layer of every backbone, shared by the
// gradcheck command and the acceptance binary.

#include <cstdint>
#include <string>
#include <vector>

#include "clfe/generators.hpp"
#include "clfe/grad_check.hpp"
#include "clfe/layers.hpp"

namespace clfe {

struct LayerGradResult {
  Backbone backbone = Backbone::gcn;
  bool clfe = false;
  GradCheckReport report;
  /// Name of the tensor holding the worst coordinate.
  std::string worst_tensor;
};

/// One layer (width d, default activation) on a random connected n-node graph.
/// The loss is sum(layer(H) * R) for a fixed random R, so every output entry
/// carries a distinct weight. Checked tensors: the input H, every trainable
/// layer tensor and, for gatedgcn, the incoming edge state.
inline LayerGradResult layer_grad_check(Backbone b, bool clfe, std::uint64_t seed, std::size_t n = 6, std::size_t d = 4,
                                        const GradCheckOptions& opt = {}) {
  RegressionParams rp;
  rp.min_nodes = rp.max_nodes = n;
  rp.edge_prob = 0.5;
  const Graph g = gen_regression(1, rp, seed).front();
  GraphContext ctx(g);

  LayerSpec spec;
  spec.backbone = b;
  spec.width = d;
  spec.clfe = clfe;
  spec.heads = 2;
  spec.kernels = 2;
  Rng backbone_rng(Rng::mix(seed, 2)), clfe_rng(Rng::mix(seed, 3)), data_rng(Rng::mix(seed, 6));
  LayerParams p = LayerParams::init(spec, backbone_rng, clfe_rng);
  if (clfe)  // a zero bias would hide errors in its gradient path
    for (double& v : p.clfe_bias.mutable_data()) v = data_rng.uniform(-0.5, 0.5);

  auto random = [&](std::size_t r, std::size_t c) {
    std::vector<double> v(r * c);
    for (auto& x : v) x = data_rng.uniform(-1.0, 1.0);
    return Tensor::matrix(r, c, std::move(v));
  };
  Tensor H = random(n, d), E = random(g.num_edges(), d), R = random(n, d);

  std::vector<Tensor> params{H};
  std::vector<std::string> names{"input"};
  for (auto& [name, t] : p.named_parameters(spec)) {
    params.push_back(t);
    names.push_back(name);
  }
  if (b == Backbone::gatedgcn) {
    params.push_back(E);
    names.push_back("edge_state");
  }
  LayerGradResult r;
  r.backbone = b;
  r.clfe = clfe;
  r.report = grad_check(
      [&] {
        Tensor e = E;
        return sum(mul(layer_forward(spec, p, ctx, params[0], &e, true), R));
      },
      params, opt);
  r.worst_tensor = names[r.report.worst_param];
  return r;
}

/// Every backbone with CLFE off and on.
inline std::vector<LayerGradResult> gradient_suite(std::uint64_t seed = 1, std::size_t n = 6, std::size_t d = 4) {
  std::vector<LayerGradResult> out;
  for (Backbone b : kAllBackbones)
    for (bool clfe : {false, true}) out.push_back(layer_grad_check(b, clfe, seed, n, d));
  return out;
}

}  // namespace clfe
