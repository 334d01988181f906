#pragma once

// Full network: input embedding, stacked layers, task head.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "clfe/graph.hpp"
#include "clfe/heads.hpp"
#include "clfe/layers.hpp"
#include "clfe/rng.hpp"

namespace clfe {

enum class Task { node_cls, graph_cls, edge_cls, graph_reg };

inline const char* to_string(Task t) {
  switch (t) {
    case Task::node_cls: return "node_cls";
    case Task::graph_cls: return "graph_cls";
    case Task::edge_cls: return "edge_cls";
    case Task::graph_reg: return "graph_reg";
  }
  return "?";
}

inline Task parse_task(std::string_view s) {
  for (Task t : {Task::node_cls, Task::graph_cls, Task::edge_cls, Task::graph_reg})
    if (s == to_string(t)) return t;
  throw std::invalid_argument("unknown task '" + std::string(s) + "'");
}

inline bool is_classification(Task t) { return t != Task::graph_reg; }

struct ModelSpec {
  Task task = Task::node_cls;
  LayerSpec layer;
  std::size_t depth = 4;
  std::size_t in_features = 1;
  /// Width of dataset edge features fed to GatedGCN; 0 means a constant 1 per edge.
  std::size_t edge_in_features = 0;
  std::size_t num_classes = 2;
  /// Pin the CLFE weight and bias at zero and exclude them from training.
  bool clfe_frozen_zero = false;

  std::vector<LayerSpec> layers() const { return std::vector<LayerSpec>(depth, layer); }
  std::size_t out_width() const { return task == Task::graph_reg ? 1 : num_classes; }
};

/// Snapshot of every parameter value and batch-norm running statistic.
struct ModelState {
  std::vector<std::vector<double>> tensors;
  std::vector<std::vector<double>> running;
};

class GnnModel {
 public:
  /// Separate random streams for embedding, backbone, CLFE and head keep the
  /// baseline and CLFE variants of one seed identical outside the CLFE tensors.
  GnnModel(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)), specs_(spec_.layers()) {
    spec_.layer.validate();
    const std::size_t d = spec_.layer.width;
    Rng embed_rng(Rng::mix(seed, 1)), backbone_rng(Rng::mix(seed, 2)), clfe_rng(Rng::mix(seed, 3)), head_rng(Rng::mix(seed, 4));
    embed_w_ = glorot(spec_.in_features, d, embed_rng);
    embed_b_ = zeros_param({d});
    if (spec_.layer.backbone == Backbone::gatedgcn) {
      edge_embed_w_ = glorot(std::max<std::size_t>(1, spec_.edge_in_features), d, embed_rng);
      edge_embed_b_ = zeros_param({d});
    }
    for (const auto& ls : specs_) layers_.push_back(LayerParams::init(ls, backbone_rng, clfe_rng));
    if (spec_.clfe_frozen_zero)
      for (auto& l : layers_) {
        for (double& v : l.clfe_weight.mutable_data()) v = 0.0;
        for (double& v : l.clfe_bias.mutable_data()) v = 0.0;
        l.clfe_weight.set_requires_grad(false);
        l.clfe_bias.set_requires_grad(false);
      }
    const std::size_t head_in = spec_.task == Task::edge_cls ? 2 * d : d;
    head_ = Mlp2::init(head_in, spec_.out_width(), head_rng);
  }

  const ModelSpec& spec() const { return spec_; }
  std::span<const LayerSpec> layer_specs() const { return specs_; }
  LayerParams& layer(std::size_t l) { return layers_[l]; }
  const Mlp2& head() const { return head_; }

  /// Final node representations (n x d).
  Tensor node_features(const Graph& g, const GraphContext& ctx, bool training) {
    if (g.node_feats.cols != spec_.in_features)
      throw DimensionError("model expects " + std::to_string(spec_.in_features) + " node features, graph has " +
                           std::to_string(g.node_feats.cols));
    Tensor X = add_bias(matmul(g.node_feats.tensor(), embed_w_), embed_b_);
    Tensor E;
    if (spec_.layer.backbone == Backbone::gatedgcn) {
      Tensor raw;
      if (spec_.edge_in_features == 0) {
        raw = Tensor::filled({g.num_edges(), 1}, 1.0);
      } else {
        if (g.edge_feats.cols != spec_.edge_in_features || g.edge_feats.rows != g.num_edges())
          throw DimensionError("model expects " + std::to_string(spec_.edge_in_features) + " edge features per edge");
        raw = g.edge_feats.tensor();
      }
      E = add_bias(matmul(raw, edge_embed_w_), edge_embed_b_);
    }
    return stack_forward(specs_, layers_, ctx, X, E ? &E : nullptr, training);
  }

  /// Task output: node logits (n x C), graph logits (G x C), graph scores
  /// (G x 1) or edge logits (E x C) over the batch's CSR edges.
  Tensor forward(const GraphBatch& b, const GraphContext& ctx, bool training) {
    Tensor H = node_features(b.graph, ctx, training);
    switch (spec_.task) {
      case Task::node_cls: return node_head(H, head_);
      case Task::graph_cls:
      case Task::graph_reg: return graph_head(H, b.segments, b.num_graphs(), head_);
      case Task::edge_cls: return edge_head(H, ctx.src, ctx.dst, head_);
    }
    return H;
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out{{"embed.w", embed_w_}, {"embed.b", embed_b_}};
    if (edge_embed_w_) {
      out.emplace_back("edge_embed.w", edge_embed_w_);
      out.emplace_back("edge_embed.b", edge_embed_b_);
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      LayerSpec trainable = specs_[l];
      if (spec_.clfe_frozen_zero) trainable.clfe = false;
      for (auto& [name, t] : layers_[l].named_parameters(trainable)) out.emplace_back("layer" + std::to_string(l) + "." + name, t);
    }
    const char* head_names[] = {"head.w1", "head.b1", "head.w2", "head.b2"};
    auto hp = head_.parameters();
    for (std::size_t i = 0; i < hp.size(); ++i) out.emplace_back(head_names[i], hp[i]);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [_, t] : named_parameters()) out.push_back(t);
    return out;
  }

  ModelState state() const {
    ModelState s;
    for (const auto& t : parameters()) s.tensors.emplace_back(t.data().begin(), t.data().end());
    for (const auto& l : layers_) {
      s.running.push_back(l.bn.running_mean);
      s.running.push_back(l.bn.running_var);
      s.running.push_back(l.edge_bn.running_mean);
      s.running.push_back(l.edge_bn.running_var);
    }
    return s;
  }

  void load(const ModelState& s) {
    auto params = parameters();
    if (s.tensors.size() != params.size()) throw ContractError("model state does not match parameter layout");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto dst = params[i].mutable_data();
      if (dst.size() != s.tensors[i].size()) throw ContractError("model state tensor size mismatch");
      std::copy(s.tensors[i].begin(), s.tensors[i].end(), dst.begin());
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      layers_[l].bn.running_mean = s.running[4 * l];
      layers_[l].bn.running_var = s.running[4 * l + 1];
      layers_[l].edge_bn.running_mean = s.running[4 * l + 2];
      layers_[l].edge_bn.running_var = s.running[4 * l + 3];
    }
  }

 private:
  ModelSpec spec_;
  std::vector<LayerSpec> specs_;
  Tensor embed_w_, embed_b_;
  Tensor edge_embed_w_, edge_embed_b_;
  std::vector<LayerParams> layers_;
  Mlp2 head_;
};

}  // namespace clfe
