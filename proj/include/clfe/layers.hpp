#pragma once

// Message-passing backbones and the conditional local feature encoding that
// wraps them.
//
// Every backbone returns a pre-activation hidden state h (n x d). The layer
// output is then assembled by clfe_compose:
//
//   clfe on :  out = act( concat(H, h) W + b + h ) + H
//   clfe off:  out = act( h ) + H
//
// with the trailing "+ H" present only when the skip flag is set. The
// activation is applied exactly once per layer, in clfe_compose.

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "clfe/errors.hpp"
#include "clfe/graph.hpp"
#include "clfe/rng.hpp"
#include "clfe/tensor.hpp"

namespace clfe {

enum class Backbone { gcn, sage, gat, monet, gatedgcn };
enum class Norm { none, batch };

inline constexpr Backbone kAllBackbones[] = {Backbone::gcn, Backbone::sage, Backbone::gat, Backbone::monet,
                                             Backbone::gatedgcn};

inline const char* to_string(Backbone b) {
  switch (b) {
    case Backbone::gcn: return "gcn";
    case Backbone::sage: return "sage";
    case Backbone::gat: return "gat";
    case Backbone::monet: return "monet";
    case Backbone::gatedgcn: return "gatedgcn";
  }
  return "?";
}

inline Backbone parse_backbone(std::string_view s) {
  for (Backbone b : kAllBackbones)
    if (s == to_string(b)) return b;
  throw std::invalid_argument("unknown backbone '" + std::string(s) + "'");
}

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    case Activation::leaky_relu: return "leaky_relu";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  for (Activation a : {Activation::identity, Activation::relu, Activation::sigmoid, Activation::tanh, Activation::leaky_relu})
    if (s == to_string(a)) return a;
  throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

inline const char* to_string(Norm n) { return n == Norm::batch ? "batch" : "none"; }

inline Norm parse_norm(std::string_view s) {
  if (s == "none") return Norm::none;
  if (s == "batch") return Norm::batch;
  throw std::invalid_argument("unknown normalization '" + std::string(s) + "'");
}

inline constexpr double kGatedGcnEps = 1e-6;

struct LayerSpec {
  Backbone backbone = Backbone::gcn;
  std::size_t width = 16;
  bool clfe = true;
  bool skip = true;
  Activation activation = Activation::relu;
  Norm norm = Norm::none;
  /// GAT attention heads; must divide width.
  std::size_t heads = 4;
  /// MoNet Gaussian kernels.
  std::size_t kernels = 3;

  void validate() const {
    if (width == 0) throw ContractError("layer width must be positive");
    if (backbone == Backbone::gat && (heads == 0 || width % heads != 0))
      throw ContractError("gat: " + std::to_string(heads) + " heads do not divide width " + std::to_string(width));
    if (backbone == Backbone::monet && kernels == 0) throw ContractError("monet: need at least one kernel");
  }
};

/// Constant structure of one (possibly batched) graph, shared by all layers.
struct GraphContext {
  std::size_t n = 0;
  /// CSR edges: message flows src -> dst.
  std::vector<std::size_t> src, dst;
  /// Edges plus a self-loop on every node lacking one.
  std::vector<std::size_t> loop_src, loop_dst;
  std::optional<NormalizedAdjacency> adj;
  /// 1 / in-degree, 0 for nodes without in-neighbours.
  std::vector<double> inv_in_degree;
  /// MoNet pseudo-coordinates (1/sqrt(d~_dst), 1/sqrt(d~_src)) per closed-neighbourhood edge.
  Tensor pseudo;

  explicit GraphContext(const Graph& g) : n(g.n), src(g.sources()), dst(g.targets) {
    if (g.undirected && !g.has_self_loops()) adj = sym_normalize(g);
    std::vector<std::size_t> indeg(n, 0);
    for (auto d : dst) ++indeg[d];
    inv_in_degree.resize(n);
    for (std::size_t i = 0; i < n; ++i) inv_in_degree[i] = indeg[i] ? 1.0 / static_cast<double>(indeg[i]) : 0.0;
    loop_src = src;
    loop_dst = dst;
    std::vector<bool> has_loop(n, false);
    for (std::size_t e = 0; e < src.size(); ++e)
      if (src[e] == dst[e]) has_loop[src[e]] = true;
    for (std::size_t i = 0; i < n; ++i)
      if (!has_loop[i]) {
        loop_src.push_back(i);
        loop_dst.push_back(i);
      }
    std::vector<double> closed_deg(n, 0.0);
    for (auto d : loop_dst) closed_deg[d] += 1.0;
    std::vector<double> u(loop_src.size() * 2);
    for (std::size_t e = 0; e < loop_src.size(); ++e) {
      u[2 * e] = 1.0 / std::sqrt(closed_deg[loop_dst[e]]);
      u[2 * e + 1] = 1.0 / std::sqrt(closed_deg[loop_src[e]]);
    }
    pseudo = Tensor::matrix(loop_src.size(), 2, std::move(u));
  }

  std::size_t num_edges() const { return src.size(); }
};

/// Glorot-uniform matrix, entries in +-sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng, std::size_t fan_in = 0, std::size_t fan_out = 0) {
  if (fan_in == 0) fan_in = rows;
  if (fan_out == 0) fan_out = cols;
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::matrix(rows, cols, std::move(v), true);
}

inline Tensor zeros_param(Shape s) { return Tensor::zeros(std::move(s), true); }

struct LayerParams {
  // gcn: d x d | sage: 2d x d | gat: d x d | monet: d x (K d)
  Tensor weight;
  // gat, H x d/H each
  Tensor att_src, att_dst;
  // monet, K x 2 each; kernel variance = exp(log_sigma)
  Tensor mu, log_sigma;
  // gatedgcn, d x d each
  Tensor gate_a, gate_b, gate_c, gate_u, gate_v;
  // conditional local feature encoding: 2d x d and d
  Tensor clfe_weight, clfe_bias;
  Tensor bn_gamma, bn_beta;
  BatchNormState bn;
  Tensor edge_bn_gamma, edge_bn_beta;
  BatchNormState edge_bn;

  /// Backbone tensors draw from backbone_rng and CLFE tensors from clfe_rng,
  /// so models that differ only in the CLFE flag share backbone weights.
  static LayerParams init(const LayerSpec& spec, Rng& backbone_rng, Rng& clfe_rng) {
    spec.validate();
    const std::size_t d = spec.width;
    LayerParams p;
    switch (spec.backbone) {
      case Backbone::gcn: p.weight = glorot(d, d, backbone_rng); break;
      case Backbone::sage: p.weight = glorot(2 * d, d, backbone_rng); break;
      case Backbone::gat: {
        const std::size_t hd = d / spec.heads;
        p.weight = glorot(d, d, backbone_rng);
        p.att_src = glorot(spec.heads, hd, backbone_rng, 2 * hd, 1);
        p.att_dst = glorot(spec.heads, hd, backbone_rng, 2 * hd, 1);
        break;
      }
      case Backbone::monet: {
        const std::size_t K = spec.kernels;
        p.weight = glorot(d, K * d, backbone_rng, d, d);
        std::vector<double> mu(K * 2);
        for (auto& m : mu) m = backbone_rng.uniform(0.0, 1.0);
        p.mu = Tensor::matrix(K, 2, std::move(mu), true);
        p.log_sigma = Tensor::matrix(K, 2, std::vector<double>(K * 2, std::log(0.5)), true);
        break;
      }
      case Backbone::gatedgcn:
        p.gate_a = glorot(d, d, backbone_rng);
        p.gate_b = glorot(d, d, backbone_rng);
        p.gate_c = glorot(d, d, backbone_rng);
        p.gate_u = glorot(d, d, backbone_rng);
        p.gate_v = glorot(d, d, backbone_rng);
        break;
    }
    // Drawn even when the flag is off, keeping both arms' streams aligned.
    p.clfe_weight = glorot(2 * d, d, clfe_rng);
    p.clfe_bias = zeros_param({d});
    if (spec.norm == Norm::batch) {
      p.bn_gamma = Tensor::from({d}, std::vector<double>(d, 1.0), true);
      p.bn_beta = zeros_param({d});
      p.bn = BatchNormState(d);
      if (spec.backbone == Backbone::gatedgcn) {
        p.edge_bn_gamma = Tensor::from({d}, std::vector<double>(d, 1.0), true);
        p.edge_bn_beta = zeros_param({d});
        p.edge_bn = BatchNormState(d);
      }
    }
    return p;
  }

  /// Trainable tensors in a fixed order, with names. CLFE tensors are
  /// included only when the layer uses them.
  std::vector<std::pair<std::string, Tensor>> named_parameters(const LayerSpec& spec) const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto put = [&](const char* name, const Tensor& t) {
      if (t) out.emplace_back(name, t);
    };
    put("weight", weight);
    put("att_src", att_src);
    put("att_dst", att_dst);
    put("mu", mu);
    put("log_sigma", log_sigma);
    put("gate_a", gate_a);
    put("gate_b", gate_b);
    put("gate_c", gate_c);
    put("gate_u", gate_u);
    put("gate_v", gate_v);
    if (spec.clfe) {
      put("clfe_weight", clfe_weight);
      put("clfe_bias", clfe_bias);
    }
    put("bn_gamma", bn_gamma);
    put("bn_beta", bn_beta);
    put("edge_bn_gamma", edge_bn_gamma);
    put("edge_bn_beta", edge_bn_beta);
    return out;
  }
};

/// Pre-composition node output of a backbone.
struct HiddenState {
  Tensor h;
};

namespace detail {
inline void require_rows(const Tensor& H, std::size_t n, const char* op) {
  if (H.ndim() != 2 || H.rows() != n)
    throw DimensionError(std::string(op) + ": features " + shape_str(H.shape()) + " do not match " + std::to_string(n) + " nodes");
}
}  // namespace detail

/// A H W with the symmetrically normalized self-looped adjacency.
inline HiddenState gcn_hidden(const Tensor& H, const NormalizedAdjacency& adj, const LayerParams& p) {
  detail::require_rows(H, adj.rows, "gcn");
  return {matmul(spmm(adj, H), p.weight)};
}

/// W applied to concat(H_i, mean of in-neighbour rows); isolated nodes use a zero mean.
inline HiddenState sage_hidden(const Tensor& H, const GraphContext& ctx, const LayerParams& p) {
  detail::require_rows(H, ctx.n, "sage");
  Tensor mean = scale_rows(scatter_add(gather_rows(H, ctx.src), ctx.dst, ctx.n), ctx.inv_in_degree);
  return {matmul(concat_cols(H, mean), p.weight)};
}

/// Multi-head attention over the closed in-neighbourhood. When attention is
/// given it receives the (edges x heads) coefficients over ctx.loop_* edges.
inline HiddenState gat_hidden(const Tensor& H, const GraphContext& ctx, const LayerParams& p, Tensor* attention = nullptr) {
  detail::require_rows(H, ctx.n, "gat");
  Tensor wh = matmul(H, p.weight);
  Tensor s_dst = head_dot(wh, p.att_dst);
  Tensor s_src = head_dot(wh, p.att_src);
  Tensor scores = leaky_relu(add(gather_rows(s_dst, ctx.loop_dst), gather_rows(s_src, ctx.loop_src)));
  Tensor alpha = segment_softmax(scores, ctx.loop_dst, ctx.n);
  if (attention) *attention = alpha;
  Tensor msgs = mul_col_blocks(gather_rows(wh, ctx.loop_src), alpha);
  return {scatter_add(msgs, ctx.loop_dst, ctx.n)};
}

/// Gaussian-mixture weighted sum over the closed in-neighbourhood, averaged over kernels.
inline HiddenState monet_hidden(const Tensor& H, const GraphContext& ctx, const LayerParams& p, Tensor* kernel_weights = nullptr) {
  detail::require_rows(H, ctx.n, "monet");
  const std::size_t K = p.mu.rows();
  Tensor wh = matmul(H, p.weight);
  Tensor w = gaussian_kernel(ctx.pseudo, p.mu, p.log_sigma);
  if (kernel_weights) *kernel_weights = w;
  Tensor msgs = mul_col_blocks(gather_rows(wh, ctx.loop_src), w);
  Tensor agg = sum_col_blocks(scatter_add(msgs, ctx.loop_dst, ctx.n), K);
  return {scale(agg, 1.0 / static_cast<double>(K))};
}

struct GatedGcnOutput {
  HiddenState hidden;
  Tensor edge_state;
  /// Normalized gates eta, one row per edge.
  Tensor gates;
};

/// Edge-gated convolution. For edge j -> i:
///   e^_ij = A e_ij + B h_i + C h_j
///   eta_ij = sigmoid(e^_ij) / (sum_{j'} sigmoid(e^_ij') + eps)
///   h_i   = U h_i + sum_j eta_ij * V h_j
///   e_ij <- e_ij + relu(norm(e^_ij))
inline GatedGcnOutput gatedgcn_hidden(const Tensor& H, const Tensor& E, const GraphContext& ctx, LayerParams& p,
                                      Norm norm, bool training) {
  detail::require_rows(H, ctx.n, "gatedgcn");
  if (!E || E.rows() != ctx.num_edges() || E.cols() != H.cols())
    throw ContractError("gatedgcn: edge state missing or not sized edges x width");
  Tensor e_hat = add(add(matmul(E, p.gate_a), gather_rows(matmul(H, p.gate_b), ctx.dst)),
                     gather_rows(matmul(H, p.gate_c), ctx.src));
  Tensor sig = sigmoid(e_hat);
  Tensor denom = add_scalar(gather_rows(scatter_add(sig, ctx.dst, ctx.n), ctx.dst), kGatedGcnEps);
  Tensor eta = div(sig, denom);
  Tensor msgs = mul(eta, gather_rows(matmul(H, p.gate_v), ctx.src));
  Tensor h = add(matmul(H, p.gate_u), scatter_add(msgs, ctx.dst, ctx.n));
  Tensor e_norm = norm == Norm::batch ? batch_norm(e_hat, p.edge_bn_gamma, p.edge_bn_beta, p.edge_bn, training) : e_hat;
  return {{h}, add(E, relu(e_norm)), eta};
}

/// Combines the layer input H with the backbone hidden state h.
inline Tensor clfe_compose(const Tensor& H, const HiddenState& hidden, const LayerParams& p, const LayerSpec& spec) {
  const Tensor& h = hidden.h;
  if (H.shape() != h.shape())
    throw DimensionError("clfe_compose: layer input " + shape_str(H.shape()) + " and hidden state " + shape_str(h.shape()) + " differ");
  Tensor pre = h;
  if (spec.clfe) {
    Tensor v = add_bias(matmul(concat_cols(H, h), p.clfe_weight), p.clfe_bias);
    pre = add(v, h);
  }
  Tensor out = activate(pre, spec.activation);
  return spec.skip ? add(out, H) : out;
}

/// One full layer: backbone, composition, optional batch norm. For GatedGCN
/// the edge state is read from and written back to *edge_state.
inline Tensor layer_forward(const LayerSpec& spec, LayerParams& p, const GraphContext& ctx, const Tensor& H,
                            Tensor* edge_state, bool training) {
  HiddenState hidden;
  switch (spec.backbone) {
    case Backbone::gcn:
      if (!ctx.adj) throw ContractError("gcn: needs an undirected graph without self-loops");
      hidden = gcn_hidden(H, *ctx.adj, p);
      break;
    case Backbone::sage: hidden = sage_hidden(H, ctx, p); break;
    case Backbone::gat: hidden = gat_hidden(H, ctx, p); break;
    case Backbone::monet: hidden = monet_hidden(H, ctx, p); break;
    case Backbone::gatedgcn: {
      if (!edge_state) throw ContractError("gatedgcn: missing edge state");
      auto out = gatedgcn_hidden(H, *edge_state, ctx, p, spec.norm, training);
      hidden = out.hidden;
      *edge_state = out.edge_state;
      break;
    }
  }
  Tensor out = clfe_compose(H, hidden, p, spec);
  if (spec.norm == Norm::batch) out = batch_norm(out, p.bn_gamma, p.bn_beta, p.bn, training);
  return out;
}

/// Applies the layers in order to already-embedded node features X (n x d).
inline Tensor stack_forward(std::span<const LayerSpec> specs, std::span<LayerParams> params, const GraphContext& ctx,
                            const Tensor& X, Tensor* edge_state, bool training) {
  if (specs.size() != params.size()) throw ContractError("stack_forward: spec/parameter count mismatch");
  Tensor H = X;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    if (specs[l].width != X.cols())
      throw DimensionError("stack_forward: layer " + std::to_string(l) + " width " + std::to_string(specs[l].width) +
                           " differs from embedded width " + std::to_string(X.cols()));
    H = layer_forward(specs[l], params[l], ctx, H, edge_state, training);
  }
  return H;
}

}  // namespace clfe
