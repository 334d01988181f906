#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <future>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "clfe/errors.hpp"
#include "clfe/graph.hpp"
#include "clfe/heads.hpp"
#include "clfe/model.hpp"
#include "clfe/rng.hpp"
#include "clfe/tensor.hpp"

namespace clfe {

inline constexpr std::uint64_t kDefaultSeeds[] = {9, 23, 41, 42};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::vector<std::vector<double>> m, v;
};

/// One bias-corrected Adam update using each parameter's accumulated grad.
/// Parameters that received no gradient are treated as having gradient 0.
inline void adam_step(std::span<Tensor> params, AdamState& s, double lr) {
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.emplace_back(p.numel(), 0.0);
      s.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (s.m.size() != params.size()) throw ContractError("adam_step: parameter count changed between steps");
  ++s.t;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = s.m[i];
    auto& v = s.v[i];
    auto data = params[i].mutable_data();
    if (m.size() != data.size()) throw ContractError("adam_step: moment buffer shape differs from parameter " + std::to_string(i));
    auto g = params[i].grad();
    if (!g.empty() && g.size() != data.size()) throw ContractError("adam_step: gradient shape differs from parameter " + std::to_string(i));
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double gk = g.empty() ? 0.0 : g[k];
      m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * gk;
      v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * gk * gk;
      data[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + s.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Reduce-on-plateau schedule

struct ScheduleState {
  double lr = 1e-3;
  double gamma = 0.5;
  std::size_t patience = 5;
  double min_lr = 1e-6;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_improvement = 0;
  std::size_t decays = 0;

  /// Training stops once the learning rate drops below the floor.
  bool halted() const { return lr < min_lr; }
};

inline ScheduleState plateau_decay(ScheduleState s, double val_loss) {
  if (!std::isfinite(val_loss)) throw ContractError("plateau_decay: validation loss is not finite");
  if (val_loss < s.best - 1e-12) {
    s.best = val_loss;
    s.since_improvement = 0;
    return s;
  }
  if (++s.since_improvement >= s.patience) {
    s.lr *= s.gamma;
    s.since_improvement = 0;
    ++s.decays;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Training loop

struct Dataset {
  std::vector<Graph> train, val, test;
};

struct TrainConfig {
  double lr = 1e-3;
  double decay = 0.5;
  std::size_t patience = 5;
  double min_lr = 1e-6;
  std::size_t max_epochs = 200;
  std::size_t batch_size = 32;
  std::uint64_t seed = 42;
  MetricKind metric = MetricKind::accuracy_weighted;
  std::size_t hits_k = 50;
  /// Scale cross-entropy rows by total/count of their class within the batch.
  bool class_weighted = true;
  /// Run the full loop (forward, backward, schedule) without updating parameters.
  bool freeze_parameters = false;
};

inline MetricKind default_metric(Task t) {
  switch (t) {
    case Task::node_cls:
    case Task::graph_cls: return MetricKind::accuracy_weighted;
    case Task::edge_cls: return MetricKind::f1_positive;
    case Task::graph_reg: return MetricKind::mae;
  }
  return MetricKind::accuracy_weighted;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_metric = 0.0;
  double val_metric = 0.0;
  double test_metric = 0.0;
  double lr = 0.0;
  double seconds = 0.0;

  /// Equality on everything except wall time.
  bool same_values(const EpochRecord& o) const {
    return epoch == o.epoch && train_loss == o.train_loss && val_loss == o.val_loss && train_metric == o.train_metric &&
           val_metric == o.val_metric && test_metric == o.test_metric && lr == o.lr;
  }
};

enum class StopReason { lr_floor, max_epochs, failed };

struct RunResult {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> records;
  std::size_t best_epoch = 0;
  double train_metric = 0.0;
  double val_metric = 0.0;
  double test_metric = 0.0;
  std::size_t decays = 0;
  StopReason stop = StopReason::max_epochs;
  std::string error;
  ModelState best_state;

  bool completed() const { return stop != StopReason::failed; }
};

namespace detail {

struct PreparedBatch {
  GraphBatch batch;
  GraphContext ctx;
  explicit PreparedBatch(GraphBatch b) : batch(std::move(b)), ctx(batch.graph) {}
};

inline std::vector<PreparedBatch> prepare(const std::vector<Graph>& graphs, std::size_t batch_size, std::span<const std::size_t> order) {
  std::vector<PreparedBatch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    std::vector<const Graph*> members;
    for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) members.push_back(&graphs[order[i]]);
    out.emplace_back(batch(std::span<const Graph* const>(members)));
  }
  return out;
}

inline std::vector<std::size_t> iota_order(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

/// Labels the loss is computed against for a classification task.
inline std::span<const int> class_targets(Task task, const GraphBatch& b) {
  switch (task) {
    case Task::node_cls: return b.graph.node_labels;
    case Task::edge_cls: return b.graph.edge_labels;
    case Task::graph_cls: return b.graph_labels;
    case Task::graph_reg: break;
  }
  return {};
}

inline std::vector<double> batch_class_weights(std::span<const int> labels, std::size_t C) {
  std::vector<double> count(C, 0.0);
  for (int l : labels)
    if (l >= 0 && static_cast<std::size_t>(l) < C) count[static_cast<std::size_t>(l)] += 1.0;
  std::vector<double> w(C, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    if (count[c] > 0.0) w[c] = static_cast<double>(labels.size()) / count[c];
  return w;
}

inline Tensor task_loss(const ModelSpec& spec, const TrainConfig& cfg, const Tensor& out, const GraphBatch& b) {
  if (spec.task == Task::graph_reg) {
    if (b.graph_targets.size() != b.num_graphs()) throw ContractError("graph_reg: every graph needs a graph_target");
    return l1_loss(out, b.graph_targets);
  }
  auto labels = class_targets(spec.task, b);
  if (labels.size() != out.rows()) throw ContractError(std::string(to_string(spec.task)) + ": labels missing from dataset");
  if (cfg.class_weighted && spec.task != Task::graph_cls) {
    auto w = batch_class_weights(labels, spec.out_width());
    return softmax_cross_entropy(out, labels, w);
  }
  return softmax_cross_entropy(out, labels);
}

struct SplitEval {
  double loss = 0.0;
  double metric = 0.0;
};

inline SplitEval evaluate(GnnModel& model, const TrainConfig& cfg, std::vector<PreparedBatch>& batches) {
  Tape::Pause no_tape;
  const ModelSpec& spec = model.spec();
  double loss_sum = 0.0;
  std::size_t items = 0;
  std::vector<int> pred, truth;
  std::vector<double> pred_v, truth_v, pos, neg;
  for (auto& pb : batches) {
    Tensor out = model.forward(pb.batch, pb.ctx, false);
    Tensor loss = task_loss(spec, cfg, out, pb.batch);
    loss_sum += loss.item() * static_cast<double>(out.rows());
    items += out.rows();
    if (spec.task == Task::graph_reg) {
      pred_v.insert(pred_v.end(), out.data().begin(), out.data().end());
      truth_v.insert(truth_v.end(), pb.batch.graph_targets.begin(), pb.batch.graph_targets.end());
      continue;
    }
    auto labels = class_targets(spec.task, pb.batch);
    auto am = argmax_rows(out);
    pred.insert(pred.end(), am.begin(), am.end());
    truth.insert(truth.end(), labels.begin(), labels.end());
    if (cfg.metric == MetricKind::hits_at_k) {
      const std::size_t C = out.cols();
      for (std::size_t i = 0; i < out.rows(); ++i) {
        const double score = out[i * C + 1] - out[i * C];
        (labels[i] == 1 ? pos : neg).push_back(score);
      }
    }
  }
  SplitEval r;
  r.loss = items ? loss_sum / static_cast<double>(items) : 0.0;
  switch (cfg.metric) {
    case MetricKind::accuracy_weighted: r.metric = accuracy_weighted(pred, truth, spec.out_width()).value; break;
    case MetricKind::f1_positive: r.metric = f1_positive(pred, truth).value; break;
    case MetricKind::hits_at_k: r.metric = hits_at_k(pos, neg, std::min(cfg.hits_k, neg.size())).value; break;
    case MetricKind::mae: r.metric = mae(pred_v, truth_v).value; break;
  }
  return r;
}

}  // namespace detail

/// Trains model on data.train with per-epoch evaluation. Stops when the
/// learning rate falls below cfg.min_lr or after cfg.max_epochs. The reported
/// metrics come from the epoch with the lowest validation loss.
inline RunResult train(GnnModel& model, const Dataset& data, const TrainConfig& cfg) {
  if (data.train.empty() || data.val.empty() || data.test.empty()) throw ContractError("train: every split must be non-empty");
  if (cfg.batch_size == 0) throw ContractError("train: batch size must be positive");
  if (cfg.metric == MetricKind::mae && is_classification(model.spec().task)) throw ContractError("train: mae needs a regression task");
  if (cfg.metric != MetricKind::mae && !is_classification(model.spec().task)) throw ContractError("train: regression needs the mae metric");
  RunResult result;
  result.seed = cfg.seed;
  auto train_eval = detail::prepare(data.train, cfg.batch_size, detail::iota_order(data.train.size()));
  auto val_eval = detail::prepare(data.val, cfg.batch_size, detail::iota_order(data.val.size()));
  auto test_eval = detail::prepare(data.test, cfg.batch_size, detail::iota_order(data.test.size()));

  auto params = model.parameters();
  AdamState adam;
  ScheduleState sched{.lr = cfg.lr, .gamma = cfg.decay, .patience = cfg.patience, .min_lr = cfg.min_lr};
  Rng shuffle_rng(Rng::mix(cfg.seed, 5));
  std::vector<std::size_t> order = detail::iota_order(data.train.size());
  double best_val = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order);
    auto batches = detail::prepare(data.train, cfg.batch_size, order);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      for (auto& p : params) p.zero_grad();
      Tape tape;
      Tensor loss;
      const std::string where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) + ", lr " + std::to_string(sched.lr);
      try {
        Tape::Scope scope(tape);
        Tensor out = model.forward(batches[bi].batch, batches[bi].ctx, true);
        loss = detail::task_loss(model.spec(), cfg, out, batches[bi].batch);
      } catch (const NonFiniteError& e) {
        throw TrainingError(std::string("non-finite value at ") + where + " (" + e.what() + ")");
      }
      if (!std::isfinite(loss.item())) throw TrainingError("non-finite loss at " + where);
      tape.backward(loss);
      if (!cfg.freeze_parameters) adam_step(params, adam, sched.lr);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = sched.lr;
    const auto tr = detail::evaluate(model, cfg, train_eval);
    const auto va = detail::evaluate(model, cfg, val_eval);
    const auto te = detail::evaluate(model, cfg, test_eval);
    rec.train_loss = tr.loss;
    rec.val_loss = va.loss;
    rec.train_metric = tr.metric;
    rec.val_metric = va.metric;
    rec.test_metric = te.metric;
    if (!std::isfinite(va.loss))
      throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch) + ", lr " + std::to_string(sched.lr));
    if (va.loss < best_val) {
      best_val = va.loss;
      result.best_epoch = epoch;
      result.train_metric = tr.metric;
      result.val_metric = va.metric;
      result.test_metric = te.metric;
      result.best_state = model.state();
    }
    sched = plateau_decay(sched, va.loss);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.records.push_back(rec);
    if (sched.halted()) {
      result.stop = StopReason::lr_floor;
      break;
    }
  }
  result.decays = sched.decays;
  return result;
}

// ---------------------------------------------------------------------------
// Multi-seed aggregation

struct MeanStd {
  double mean = 0.0;
  /// Sample (n-1) standard deviation; 0 for a single value.
  double std = 0.0;

  bool operator==(const MeanStd&) const = default;
};

inline MeanStd mean_std(std::span<const double> xs) {
  if (xs.empty()) throw ContractError("mean_std: no values");
  MeanStd r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

struct SeedSummary {
  std::vector<RunResult> runs;
  MeanStd test;
  MeanStd train;
  std::vector<std::uint64_t> failed;
  std::vector<std::string> warnings;

  bool all_completed() const { return failed.empty(); }
};

/// Trains one fresh model per seed (model init and shuffling both follow the
/// seed) and aggregates the final metrics over the runs that completed.
inline SeedSummary run_seeds(const ModelSpec& spec, const Dataset& data, TrainConfig cfg,
                             std::span<const std::uint64_t> seeds = kDefaultSeeds, std::size_t workers = 1) {
  if (seeds.empty()) throw ContractError("run_seeds: need at least one seed");
  auto one = [&](std::uint64_t seed) {
    TrainConfig c = cfg;
    c.seed = seed;
    try {
      GnnModel model(spec, seed);
      return train(model, data, c);
    } catch (const std::exception& e) {
      RunResult r;
      r.seed = seed;
      r.stop = StopReason::failed;
      r.error = e.what();
      return r;
    }
  };
  SeedSummary s;
  if (workers <= 1) {
    for (auto seed : seeds) s.runs.push_back(one(seed));
  } else {
    std::vector<std::future<RunResult>> futs;
    for (auto seed : seeds) futs.push_back(std::async(std::launch::async, one, seed));
    for (auto& f : futs) s.runs.push_back(f.get());
  }
  std::vector<double> test, train_m;
  for (const auto& r : s.runs) {
    if (!r.completed()) {
      s.failed.push_back(r.seed);
      s.warnings.push_back("seed " + std::to_string(r.seed) + " failed: " + r.error);
      continue;
    }
    test.push_back(r.test_metric);
    train_m.push_back(r.train_metric);
  }
  if (!test.empty()) {
    s.test = mean_std(test);
    s.train = mean_std(train_m);
  } else {
    s.warnings.push_back("no seed completed");
  }
  return s;
}

}  // namespace clfe
