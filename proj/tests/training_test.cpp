#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "clfe/generators.hpp"
#include "clfe/training.hpp"

using namespace clfe;

namespace {

Dataset small_sbm(std::size_t graphs, std::uint64_t seed) {
  SbmParams p;
  p.blocks = {5, 5, 5};
  p.p_intra = 0.6;
  p.p_inter = 0.1;
  Dataset d;
  for (std::size_t i = 0; i < graphs; ++i) {
    auto g = gen_sbm(p, seed + i);
    (i % 5 == 3 ? d.val : i % 5 == 4 ? d.test : d.train).push_back(std::move(g));
  }
  return d;
}

ModelSpec node_spec(Backbone b = Backbone::gcn) {
  ModelSpec s;
  s.task = Task::node_cls;
  s.layer.backbone = b;
  s.layer.width = 8;
  s.layer.heads = 2;
  s.depth = 2;
  s.in_features = 3;
  s.num_classes = 3;
  return s;
}

std::vector<std::vector<double>> snapshot(const GnnModel& m) { return m.state().tensors; }

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  auto p = Tensor::from({1}, {2.0}, true);
  p.mutable_grad()[0] = 1.0;
  std::vector<Tensor> ps{p};
  AdamState st;
  adam_step(ps, st, 0.01);
  EXPECT_NEAR(p[0], 2.0 - 0.01 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(st.t, 1u);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto p = Tensor::from({3}, {1, -2, 3}, true);
  p.zero_grad();
  std::vector<Tensor> ps{p};
  AdamState st;
  for (int i = 0; i < 5; ++i) adam_step(ps, st, 0.1);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], -2.0);
  EXPECT_EQ(p[2], 3.0);
}

TEST(Adam, MatchesReferenceRecurrence) {
  // Independent scalar recurrence over a fixed gradient sequence.
  const std::vector<double> grads{0.3, -1.2, 0.7, 2.0, -0.1};
  auto p = Tensor::from({1}, {0.5}, true);
  std::vector<Tensor> ps{p};
  AdamState st;
  double x = 0.5, m = 0, v = 0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    p.zero_grad();
    p.mutable_grad()[0] = grads[t - 1];
    adam_step(ps, st, 0.05);
    m = 0.9 * m + 0.1 * grads[t - 1];
    v = 0.999 * v + 0.001 * grads[t - 1] * grads[t - 1];
    x -= 0.05 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(p[0], x, 1e-14);
  }
}

TEST(Adam, ShapeChangeIsContractError) {
  auto a = Tensor::from({2}, {1, 2}, true);
  std::vector<Tensor> ps{a};
  AdamState st;
  adam_step(ps, st, 0.1);
  std::vector<Tensor> other{Tensor::from({3}, {1, 2, 3}, true)};
  EXPECT_THROW(adam_step(other, st, 0.1), ContractError);
}

TEST(PlateauDecay, DecreasingLossNeverDecays) {
  ScheduleState s{.lr = 1e-3, .gamma = 0.5, .patience = 2};
  for (int e = 0; e < 50; ++e) s = plateau_decay(s, 10.0 - e * 0.1);
  EXPECT_EQ(s.lr, 1e-3);
  EXPECT_EQ(s.decays, 0u);
}

TEST(PlateauDecay, ConstantLossDecaysEveryPatienceEpochs) {
  ScheduleState s{.lr = 1e-3, .gamma = 0.5, .patience = 2};
  std::vector<std::size_t> decay_epochs;
  std::size_t epoch = 0;
  for (; !s.halted(); ++epoch) {
    const auto before = s.decays;
    s = plateau_decay(s, 1.0);
    if (s.decays > before) decay_epochs.push_back(epoch);
    ASSERT_LT(epoch, 1000u);
  }
  ASSERT_GE(decay_epochs.size(), 3u);
  EXPECT_EQ(decay_epochs[0], 2u);
  EXPECT_EQ(decay_epochs[1], 4u);
  // 1e-3 / 2^10 = 9.77e-7 is the first value under the floor.
  EXPECT_EQ(s.decays, 10u);
  EXPECT_NEAR(s.lr, 1e-3 / 1024.0, 1e-20);
}

TEST(PlateauDecay, RejectsNonFiniteLoss) {
  EXPECT_THROW(plateau_decay(ScheduleState{}, std::numeric_limits<double>::quiet_NaN()), ContractError);
}

TEST(Train, ZeroLearningRateKeepsParametersAndMetricsConstant) {
  auto data = small_sbm(10, 1);
  GnnModel m(node_spec(), 9);
  auto before = snapshot(m);
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.min_lr = 0.0;
  cfg.max_epochs = 4;
  cfg.batch_size = 4;
  auto r = train(m, data, cfg);
  EXPECT_EQ(snapshot(m), before);
  ASSERT_EQ(r.records.size(), 4u);
  for (const auto& rec : r.records) {
    EXPECT_EQ(rec.train_loss, r.records[0].train_loss);
    EXPECT_EQ(rec.test_metric, r.records[0].test_metric);
  }
}

TEST(Train, SameSeedGivesIdenticalRecords) {
  auto data = small_sbm(10, 2);
  for (Backbone b : kAllBackbones) {
    TrainConfig cfg;
    cfg.max_epochs = 5;
    cfg.batch_size = 3;
    cfg.lr = 5e-3;
    GnnModel a(node_spec(b), 41), c(node_spec(b), 41);
    auto ra = train(a, data, cfg), rc = train(c, data, cfg);
    ASSERT_EQ(ra.records.size(), rc.records.size());
    for (std::size_t i = 0; i < ra.records.size(); ++i) EXPECT_TRUE(ra.records[i].same_values(rc.records[i])) << to_string(b);
    EXPECT_EQ(snapshot(a), snapshot(c));
  }
}

TEST(Train, LossDecreasesOnAFixedBatch) {
  auto data = small_sbm(5, 3);
  for (Backbone b : kAllBackbones) {
    GnnModel m(node_spec(b), 23);
    auto params = m.parameters();
    TrainConfig cfg;
    auto pb = detail::prepare(data.train, 8, detail::iota_order(data.train.size()));
    AdamState adam;
    std::vector<double> losses;
    for (int step = 0; step < 6; ++step) {
      for (auto& p : params) p.zero_grad();
      Tape tape;
      Tensor loss;
      {
        Tape::Scope scope(tape);
        loss = detail::task_loss(m.spec(), cfg, m.forward(pb[0].batch, pb[0].ctx, true), pb[0].batch);
      }
      losses.push_back(loss.item());
      tape.backward(loss);
      adam_step(params, adam, 1e-4);
    }
    int non_decreasing = 0;
    for (std::size_t i = 1; i < losses.size(); ++i) non_decreasing += !(losses[i] < losses[i - 1]);
    EXPECT_LE(non_decreasing, 1) << to_string(b);
  }
}

TEST(Train, LearningRateIsNonIncreasingAndStopsAtFloor) {
  auto data = small_sbm(10, 4);
  GnnModel m(node_spec(), 42);
  TrainConfig cfg;
  cfg.lr = 1e-5;
  cfg.freeze_parameters = true;
  cfg.patience = 1;
  cfg.decay = 0.3;
  cfg.max_epochs = 200;
  auto r = train(m, data, cfg);
  for (std::size_t i = 1; i < r.records.size(); ++i) EXPECT_LE(r.records[i].lr, r.records[i - 1].lr);
  EXPECT_EQ(r.stop, StopReason::lr_floor);
  EXPECT_LT(r.records.size(), 200u);
}

TEST(Train, ReportsMetricsFromBestValidationEpoch) {
  auto data = small_sbm(10, 5);
  GnnModel m(node_spec(), 9);
  TrainConfig cfg;
  cfg.max_epochs = 15;
  cfg.lr = 1e-2;
  auto r = train(m, data, cfg);
  std::size_t best = 0;
  for (std::size_t i = 1; i < r.records.size(); ++i)
    if (r.records[i].val_loss < r.records[best].val_loss) best = i;
  EXPECT_EQ(r.best_epoch, best);
  EXPECT_EQ(r.test_metric, r.records[best].test_metric);
  EXPECT_EQ(r.train_metric, r.records[best].train_metric);
}

TEST(Train, NonFiniteLossAbortsWithDiagnostic) {
  auto data = small_sbm(10, 6);
  GnnModel m(node_spec(), 9);
  m.parameters()[0].mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.max_epochs = 2;
  try {
    train(m, data, cfg);
    FAIL();
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 0"), std::string::npos);
    EXPECT_NE(msg.find("batch 0"), std::string::npos);
    EXPECT_NE(msg.find("lr"), std::string::npos);
  }
}

TEST(MeanStd, Examples) {
  std::vector<double> one{3.5}, four{1, 2, 3, 4};
  EXPECT_EQ(mean_std(one).std, 0.0);
  auto ms = mean_std(four);
  EXPECT_EQ(ms.mean, 2.5);
  EXPECT_NEAR(ms.std, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_NEAR(ms.std, 1.291, 5e-4);
}

TEST(RunSeeds, DefaultsToFourSeedsAndAggregates) {
  EXPECT_EQ(std::vector<std::uint64_t>(std::begin(kDefaultSeeds), std::end(kDefaultSeeds)),
            (std::vector<std::uint64_t>{9, 23, 41, 42}));
  auto data = small_sbm(10, 7);
  TrainConfig cfg;
  cfg.max_epochs = 2;
  auto s = run_seeds(node_spec(), data, cfg);
  ASSERT_EQ(s.runs.size(), 4u);
  EXPECT_EQ(s.runs[2].seed, 41u);
  std::vector<double> tests;
  for (auto& r : s.runs) tests.push_back(r.test_metric);
  EXPECT_EQ(s.test.mean, mean_std(tests).mean);
  EXPECT_TRUE(s.all_completed());
}

TEST(RunSeeds, ParallelWorkersMatchSequential) {
  auto data = small_sbm(10, 8);
  TrainConfig cfg;
  cfg.max_epochs = 2;
  const std::uint64_t seeds[] = {9, 23};
  auto a = run_seeds(node_spec(), data, cfg, seeds, 1);
  auto b = run_seeds(node_spec(), data, cfg, seeds, 2);
  EXPECT_EQ(a.test.mean, b.test.mean);
  EXPECT_EQ(a.test.std, b.test.std);
}

TEST(RunSeeds, FailedSeedIsReportedAndExcluded) {
  auto data = small_sbm(10, 9);
  data.val.front().node_labels.clear();  // breaks loss evaluation on every seed's val split
  TrainConfig cfg;
  cfg.max_epochs = 1;
  const std::uint64_t seeds[] = {9};
  auto s = run_seeds(node_spec(), data, cfg, seeds);
  EXPECT_FALSE(s.all_completed());
  EXPECT_EQ(s.failed, (std::vector<std::uint64_t>{9}));
  EXPECT_FALSE(s.warnings.empty());
}

TEST(Model, BaselineAndClfeArmsShareNonClfeWeights) {
  auto on = node_spec(Backbone::gat), off = on;
  off.layer.clfe = false;
  GnnModel a(on, 9), b(off, 9);
  auto na = a.named_parameters(), nb = b.named_parameters();
  std::size_t matched = 0;
  for (auto& [name, t] : nb)
    for (auto& [name2, t2] : na)
      if (name == name2) {
        EXPECT_EQ(std::vector<double>(t.data().begin(), t.data().end()), std::vector<double>(t2.data().begin(), t2.data().end()))
            << name;
        ++matched;
      }
  EXPECT_EQ(matched, nb.size());
  EXPECT_EQ(na.size(), nb.size() + 2 * on.depth);
}

TEST(Model, FrozenZeroClfeIsExcludedFromParameters) {
  auto s = node_spec();
  s.clfe_frozen_zero = true;
  GnnModel m(s, 1);
  for (auto& [name, t] : m.named_parameters()) EXPECT_EQ(name.find("clfe"), std::string::npos);
  for (double v : m.layer(0).clfe_weight.data()) EXPECT_EQ(v, 0.0);
}

TEST(Model, StateRoundTrip) {
  auto data = small_sbm(5, 10);
  auto s = node_spec();
  s.layer.norm = Norm::batch;
  GnnModel m(s, 1), other(s, 2);
  TrainConfig cfg;
  cfg.max_epochs = 2;
  train(m, data, cfg);
  other.load(m.state());
  EXPECT_EQ(snapshot(other), snapshot(m));
  EXPECT_EQ(other.state().running, m.state().running);
}
