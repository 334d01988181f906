#pragma once

// Task heads (graph readout, node, edge) and evaluation metrics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "clfe/errors.hpp"
#include "clfe/layers.hpp"
#include "clfe/rng.hpp"
#include "clfe/tensor.hpp"

namespace clfe {

/// Two affine layers with a relu between: in -> max(1, in/2) -> out.
struct Mlp2 {
  Tensor w1, b1, w2, b2;

  static Mlp2 init(std::size_t in, std::size_t out, Rng& rng) {
    const std::size_t hidden = std::max<std::size_t>(1, in / 2);
    return {glorot(in, hidden, rng), zeros_param({hidden}), glorot(hidden, out, rng), zeros_param({out})};
  }

  std::size_t in_width() const { return w1.rows(); }
  std::size_t out_width() const { return w2.cols(); }

  Tensor operator()(const Tensor& x) const { return add_bias(matmul(relu(add_bias(matmul(x, w1), b1)), w2), b2); }

  std::vector<Tensor> parameters() const { return {w1, b1, w2, b2}; }
};

/// Mean readout per graph followed by the MLP. One output row per graph.
inline Tensor graph_head(const Tensor& node_feats, std::span<const std::size_t> segments, std::size_t num_graphs, const Mlp2& mlp) {
  std::vector<std::size_t> empty;
  Tensor readout = mean_segments(node_feats, segments, num_graphs, &empty);
  if (!empty.empty()) throw ContractError("graph_head: graph " + std::to_string(empty.front()) + " has no nodes");
  return mlp(readout);
}

inline Tensor node_head(const Tensor& node_feats, const Mlp2& mlp) { return mlp(node_feats); }

/// Scores edge (s,t) from concat(h_s, h_t); order matters.
inline Tensor edge_head(const Tensor& node_feats, std::span<const std::size_t> src, std::span<const std::size_t> dst, const Mlp2& mlp) {
  if (src.size() != dst.size()) throw DimensionError("edge_head: endpoint lists differ in length");
  return mlp(concat_cols(gather_rows(node_feats, src), gather_rows(node_feats, dst)));
}

// ---------------------------------------------------------------------------
// Metrics

enum class MetricKind { accuracy_weighted, f1_positive, hits_at_k, mae };

inline const char* to_string(MetricKind m) {
  switch (m) {
    case MetricKind::accuracy_weighted: return "accuracy_weighted";
    case MetricKind::f1_positive: return "f1_positive";
    case MetricKind::hits_at_k: return "hits_at_k";
    case MetricKind::mae: return "mae";
  }
  return "?";
}

inline MetricKind parse_metric(std::string_view s) {
  for (MetricKind m : {MetricKind::accuracy_weighted, MetricKind::f1_positive, MetricKind::hits_at_k, MetricKind::mae})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown metric '" + std::string(s) + "'");
}

/// True when larger values are better.
inline bool higher_is_better(MetricKind m) { return m != MetricKind::mae; }

struct MetricValue {
  MetricKind kind = MetricKind::accuracy_weighted;
  double value = 0.0;
  std::size_t support = 0;
};

/// Mean of per-class recall over the classes present in `truth`.
inline MetricValue accuracy_weighted(std::span<const int> pred, std::span<const int> truth, std::size_t num_classes) {
  if (pred.size() != truth.size()) throw DimensionError("accuracy_weighted: prediction and label counts differ");
  if (truth.empty()) throw ContractError("accuracy_weighted: no samples");
  std::vector<std::size_t> total(num_classes, 0), hit(num_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || static_cast<std::size_t>(truth[i]) >= num_classes) throw IndexError("accuracy_weighted: label out of range");
    ++total[static_cast<std::size_t>(truth[i])];
    if (pred[i] == truth[i]) ++hit[static_cast<std::size_t>(truth[i])];
  }
  double acc = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c)
    if (total[c]) {
      acc += static_cast<double>(hit[c]) / static_cast<double>(total[c]);
      ++present;
    }
  return {MetricKind::accuracy_weighted, acc / static_cast<double>(present), truth.size()};
}

/// F1 score of class 1 as the single rounding of 2TP / (2TP + FP + FN); 0 when TP = 0.
inline MetricValue f1_positive(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) throw DimensionError("f1_positive: prediction and label counts differ");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool p = pred[i] == 1, t = truth[i] == 1;
    tp += p && t;
    fp += p && !t;
    fn += !p && t;
  }
  const double f1 = tp ? static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn) : 0.0;
  return {MetricKind::f1_positive, f1, truth.size()};
}

/// Fraction of positives scoring strictly above the K-th highest negative.
inline MetricValue hits_at_k(std::span<const double> pos, std::span<const double> neg, std::size_t k) {
  if (neg.empty()) throw ContractError("hits_at_k: no negative scores");
  if (k == 0 || k > neg.size())
    throw ContractError("hits_at_k: K=" + std::to_string(k) + " outside [1," + std::to_string(neg.size()) + "]");
  if (pos.empty()) return {MetricKind::hits_at_k, 0.0, 0};
  std::vector<double> sorted(neg.begin(), neg.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(k - 1), sorted.end(), std::greater<>());
  const double threshold = sorted[k - 1];
  std::size_t hits = 0;
  for (double s : pos) hits += s > threshold;
  return {MetricKind::hits_at_k, static_cast<double>(hits) / static_cast<double>(pos.size()), pos.size()};
}

inline MetricValue mae(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw DimensionError("mae: prediction and target counts differ");
  if (truth.empty()) throw ContractError("mae: no samples");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += std::abs(pred[i] - truth[i]);
  return {MetricKind::mae, s / static_cast<double>(truth.size()), truth.size()};
}

/// Row-wise argmax of a logits matrix.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.rows(), C = logits.cols();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (logits[i * C + c] > logits[i * C + best]) best = c;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace clfe
