#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "spurcl/scenario.hpp"
#include "spurcl/train.hpp"
#include "test_util.hpp"

using namespace spurcl;
using spurcl::testing::make_sample;

namespace {

nn::Matrix rows_of(const std::vector<std::vector<double>>& rows) {
  nn::Matrix m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < rows[i].size(); ++k) m(i, k) = rows[i][k];
  return m;
}

/// Mean cross-entropy of w * logits over the rows of one environment.
double scaled_risk(const nn::Matrix& logits, const std::vector<int>& labels, const std::vector<std::size_t>& rows,
                   double w) {
  double total = 0.0;
  for (std::size_t i : rows) {
    double mx = -1e300;
    for (std::size_t k = 0; k < logits.cols; ++k) mx = std::max(mx, w * logits(i, k));
    double z = 0.0;
    for (std::size_t k = 0; k < logits.cols; ++k) z += std::exp(w * logits(i, k) - mx);
    total += mx + std::log(z) - w * logits(i, static_cast<std::size_t>(labels[i]));
  }
  return total / static_cast<double>(rows.size());
}

/// IRMv1 penalty by Richardson-extrapolated central differences in w.
double brute_irm(const nn::Matrix& logits, const std::vector<int>& labels, const std::vector<int>& envs) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < envs.size(); ++i) groups[envs[i]].push_back(i);
  double total = 0.0;
  for (const auto& [e, rows] : groups) {
    auto d = [&](double h) { return (scaled_risk(logits, labels, rows, 1 + h) - scaled_risk(logits, labels, rows, 1 - h)) / (2 * h); };
    const double h = 1e-3;
    const double g = (4 * d(h / 2) - d(h)) / 3;
    total += g * g;
  }
  return total;
}

Dataset two_class_task(std::size_t per_class, int task) {
  Rng rng(derive_seed(17, "data", static_cast<std::uint64_t>(task)));
  Dataset d;
  for (std::size_t i = 0; i < per_class; ++i)
    for (int y = 0; y < 2; ++y) {
      Sample s = make_sample({static_cast<float>(rng.normal()), static_cast<float>(y)}, y, task);
      d.push_back(s);
    }
  return d;
}

TaskData task_of(Dataset train, int id) {
  TaskData t;
  t.task_id = id;
  t.train = std::move(train);
  return t;
}

}  // namespace

// --- IRM

TEST(Irm, ZeroAtScaleOptimum) {
  const double l2 = std::log(2.0), l3 = std::log(3.0);
  const auto logits = rows_of({{l2, 0}, {l2, 0}, {l2, 0}, {0, l3}, {0, l3}, {0, l3}, {0, l3}});
  const std::vector<int> labels = {0, 0, 1, 1, 1, 1, 0};
  const std::vector<int> envs = {0, 0, 0, 1, 1, 1, 1};
  const auto pen = irm_penalty(logits, labels, envs);
  EXPECT_NEAR(pen.value, 0.0, 1e-10);
  EXPECT_NEAR(brute_irm(logits, labels, envs), 0.0, 1e-10);
}

TEST(Irm, MatchesBruteForceScaleDerivative) {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 4 + rng.below(10), c = 2 + rng.below(3);
    nn::Matrix logits(n, c);
    for (auto& v : logits.values) v = 2 * rng.normal();
    std::vector<int> labels(n), envs(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(rng.below(c));
      envs[i] = static_cast<int>(rng.below(3));
    }
    const auto pen = irm_penalty(logits, labels, envs);
    EXPECT_NEAR(pen.value, brute_irm(logits, labels, envs), 1e-8);
  }
}

TEST(Irm, LogitGradientMatchesFiniteDifferences) {
  Rng rng(4);
  nn::Matrix logits(6, 3);
  for (auto& v : logits.values) v = rng.normal();
  const std::vector<int> labels = {0, 1, 2, 0, 1, 2};
  const std::vector<int> envs = {0, 0, 0, 1, 1, 1};
  const auto pen = irm_penalty(logits, labels, envs);
  for (std::size_t k = 0; k < logits.values.size(); ++k) {
    nn::Matrix p = logits, m = logits;
    p.values[k] += 1e-6;
    m.values[k] -= 1e-6;
    const double numeric = (irm_penalty(p, labels, envs).value - irm_penalty(m, labels, envs).value) / 2e-6;
    EXPECT_NEAR(pen.dlogits.values[k], numeric, 1e-7);
  }
}

// --- GroupDRO

TEST(GroupDro, MultiplicativeUpdate) {
  GroupDroState dro;
  dro.ensure(0);
  dro.ensure(1);
  dro.update({{0, 0.0}, {1, std::log(2.0)}}, 1.0);
  const auto q = dro.probabilities();
  EXPECT_NEAR(q.at(0), 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(q.at(1), 2.0 / 3.0, 1e-12);
  dro.update({{0, std::log(2.0)}}, 1.0);
  EXPECT_NEAR(dro.probabilities().at(0), 0.5, 1e-12);
}

TEST(GroupDro, NewGroupStartsAtMeanWeight) {
  GroupDroState dro;
  dro.update({{0, 0.0}, {1, 2.0}}, 1.0);
  dro.ensure(2);
  EXPECT_NEAR(std::log(dro.raw_weight(2)), -1.0, 1e-12);
}

TEST(GroupDro, WeightedLossShares) {
  // Group losses are ln 2 and ln 3, so after one step with eta = 1 the
  // weights are proportional to 2 and 3.
  const auto logits = rows_of({{0, 0}, {0, 0}, {std::log(2.0), 0}, {std::log(2.0), 0}});
  const std::vector<int> labels = {0, 1, 1, 1};
  const std::vector<int> envs = {0, 0, 1, 1};
  GroupDroState dro;
  const PenaltyWeights w{0.0, 0.0, 1.0};
  const auto ml = method_loss(Method::GroupDRO, logits, nn::Matrix(4, 1), labels, envs, w, &dro);
  const double l0 = std::log(2.0), l1 = std::log(3.0);
  const double q0 = std::exp(l0), q1 = std::exp(l1);
  EXPECT_NEAR(ml.base_loss, (2 * q0 * l0 + 2 * q1 * l1) / (2 * q0 + 2 * q1), 1e-12);
}

TEST(GroupDro, ZeroStepEqualsReplay) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    nn::Matrix logits(8, 3);
    for (auto& v : logits.values) v = rng.normal();
    std::vector<int> labels(8), envs(8);
    for (std::size_t i = 0; i < 8; ++i) {
      labels[i] = static_cast<int>(rng.below(3));
      envs[i] = static_cast<int>(rng.below(2));
    }
    GroupDroState dro;
    const auto a = method_loss(Method::GroupDRO, logits, nn::Matrix(8, 1), labels, envs, {0, 0, 0}, &dro);
    const auto b = method_loss(Method::Replay, logits, nn::Matrix(8, 1), labels, envs, {0, 0, 0});
    EXPECT_NEAR(a.loss, b.loss, 1e-12);
    for (std::size_t k = 0; k < a.dlogits.values.size(); ++k) EXPECT_NEAR(a.dlogits.values[k], b.dlogits.values[k], 1e-15);
  }
}

TEST(GroupDro, NeedsState) {
  const auto logits = rows_of({{0, 0}});
  const std::vector<int> labels = {0}, envs = {0};
  EXPECT_THROW(method_loss(Method::GroupDRO, logits, nn::Matrix(1, 1), labels, envs, {}), DataError);
}

// --- other penalties

TEST(Penalties, SpectralDecoupling) {
  const auto logits = rows_of({{3, 4}});
  const std::vector<int> labels = {0}, envs = {0};
  const auto ml = method_loss(Method::SpectralDecoupling, logits, nn::Matrix(1, 1), labels, envs, {2.0, 0, 0});
  EXPECT_NEAR(ml.penalty, 25.0, 1e-12);
  const auto plain = nn::softmax_ce(logits.row(0), 0);
  EXPECT_NEAR(ml.dlogits(0, 0), plain.dlogits[0] + 6.0, 1e-12);
  EXPECT_NEAR(ml.dlogits(0, 1), plain.dlogits[1] + 8.0, 1e-12);
}

TEST(Penalties, RepresentationVariance) {
  const auto z = rows_of({{1, 0}, {3, 0}});
  const auto pen = representation_variance(z);
  EXPECT_NEAR(pen.value, 0.5, 1e-12);
  EXPECT_NEAR(pen.dlogits(0, 0), -0.5, 1e-12);
  EXPECT_NEAR(pen.dlogits(1, 0), 0.5, 1e-12);
  EXPECT_EQ(pen.dlogits(0, 1), 0.0);
}

TEST(Penalties, IbGradientReachesTrunk) {
  const auto logits = rows_of({{0, 1}, {1, 0}});
  const auto z = rows_of({{1, 0}, {3, 0}});
  const std::vector<int> labels = {0, 1}, envs = {0, 1};
  const auto ml = method_loss(Method::IBERM, logits, z, labels, envs, {0, 2.0, 0});
  ASSERT_TRUE(ml.dtrunk.has_value());
  EXPECT_NEAR(ml.penalty, 1.0, 1e-12);
  EXPECT_NEAR((*ml.dtrunk)(1, 0), 1.0, 1e-12);
}

TEST(Penalties, ZeroWeightMatchesReplayExactly) {
  Rng rng(7);
  nn::Matrix logits(6, 2), z(6, 4);
  for (auto& v : logits.values) v = rng.normal();
  for (auto& v : z.values) v = rng.normal();
  const std::vector<int> labels = {0, 1, 0, 1, 1, 0}, envs = {0, 0, 1, 1, 2, 2};
  const auto ref = method_loss(Method::Replay, logits, z, labels, envs, {});
  for (Method m : {Method::IRM, Method::IBERM, Method::IBIRM, Method::SpectralDecoupling}) {
    const auto ml = method_loss(m, logits, z, labels, envs, {0, 0, 0});
    EXPECT_EQ(ml.loss, ref.loss) << to_string(m);
    EXPECT_EQ(ml.dlogits.values, ref.dlogits.values) << to_string(m);
    EXPECT_FALSE(ml.dtrunk.has_value());
  }
}

TEST(Penalties, WarmupRamp) {
  TrainerConfig cfg;
  cfg.lambda_penalty = 2.0;
  cfg.lambda_ib = 0.4;
  cfg.penalty_warmup_epochs = 2.0;
  EXPECT_NEAR(penalty_weights(cfg, 1.0).lambda, 1.0, 1e-12);
  EXPECT_NEAR(penalty_weights(cfg, 1.0).lambda_ib, 0.2, 1e-12);
  EXPECT_NEAR(penalty_weights(cfg, 5.0).lambda, 2.0, 1e-12);
  cfg.penalty_warmup_epochs = 0.0;
  EXPECT_NEAR(penalty_weights(cfg, 0.0).lambda, 2.0, 1e-12);
}

// --- buffer and sampling

TEST(Buffer, HoldsAtMostNPerClass) {
  ReplayBuffer buf(10);
  Rng rng(2);
  buf.update(task_of(two_class_task(50, 0), 0), rng);
  EXPECT_EQ(buf.class_size(0), 10u);
  EXPECT_EQ(buf.class_size(1), 10u);
  buf.update(task_of(two_class_task(50, 1), 1), rng);
  EXPECT_EQ(buf.class_size(0), 10u);
  std::map<int, int> per_task;
  for (const auto& e : buf.entries()) ++per_task[e.task_of_origin];
  EXPECT_EQ(per_task[0], 10);
  EXPECT_EQ(per_task[1], 10);
  buf.update(task_of(two_class_task(50, 2), 2), rng);
  EXPECT_EQ(buf.size(), 20u);
  for (const auto& e : buf.entries()) EXPECT_EQ(e.sample.task_id, e.task_of_origin);
}

TEST(Buffer, SmallTasksAreStoredWhole) {
  Rng rng(2);
  ReplayBuffer buf(10);
  buf.update(task_of(two_class_task(3, 0), 0), rng);
  EXPECT_EQ(buf.size(), 6u);
}

TEST(Buffer, NewClassesGrowTheBuffer) {
  Rng rng(3);
  ReplayBuffer buf(5);
  Dataset d;
  for (int y : {2, 3})
    for (int i = 0; i < 8; ++i) d.push_back(make_sample({0.0f}, y, 1));
  buf.update(task_of(two_class_task(8, 0), 0), rng);
  buf.update(task_of(d, 1), rng);
  EXPECT_EQ(buf.size(), 20u);
  EXPECT_EQ(buf.class_size(3), 5u);
}

TEST(Sampler, BalancedWeights) {
  const std::vector<int> labels = {0, 0, 0, 1};
  const auto w = balanced_sampler_weights(labels);
  EXPECT_NEAR(w[0], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(w[3], 1.0, 1e-12);
}

TEST(Sampler, DrawsClassesEqually) {
  std::vector<int> labels(90, 0);
  labels.resize(100, 1);
  const auto w = balanced_sampler_weights(labels);
  const WeightedSampler sampler(w);
  Rng rng(4);
  int ones = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) ones += labels[sampler.draw(rng)];
  // Binomial(20000, 0.5) has sd ~71.
  EXPECT_NEAR(ones, n / 2, 400);
}

TEST(Sampler, InvalidWeights) {
  EXPECT_THROW(WeightedSampler(std::vector<double>{}), DataError);
  EXPECT_THROW(WeightedSampler(std::vector<double>{0.0, 0.0}), DataError);
  EXPECT_THROW(WeightedSampler(std::vector<double>{1.0, -1.0}), DataError);
}

// --- interference

TEST(Interference, MeanOfPairwiseDots) {
  Rng rng(5);
  const std::vector<std::size_t> hidden = {4};
  const std::array<nn::HeadSpec, 1> heads = {nn::HeadSpec{nn::HeadKind::Linear, 2}};
  const auto model = nn::make_model(2, hidden, heads, 0.0, rng);
  const Dataset a = two_class_task(3, 0), b = two_class_task(2, 1);
  double pairwise = 0.0;
  for (const auto& sa : a)
    for (const auto& sb : b) {
      const std::array<Sample, 1> one_a = {sa}, one_b = {sb};
      pairwise += nn::dot(task_gradient(model, one_a), task_gradient(model, one_b));
    }
  pairwise /= static_cast<double>(a.size() * b.size());
  EXPECT_NEAR(mean_cross_task_interference(model, a, b), pairwise, 1e-12);
  const std::vector<double> u = {1, -2}, v = {3, 1};
  EXPECT_DOUBLE_EQ(interference(u, v), 1.0);
}

// --- config

TEST(Config, MethodNames) {
  for (Method m : kAllMethods) EXPECT_EQ(parse_method(to_string(m)), m);
  try {
    parse_method("erm");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("group_dro"), std::string::npos);
  }
}

TEST(Config, Validation) {
  TrainerConfig cfg;
  EXPECT_NO_THROW(validate(cfg));
  cfg.head = nn::HeadKind::MeanLayer;
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = TrainerConfig{};
  cfg.momentum = 1.0;
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = TrainerConfig{};
  cfg.batch_size = 0;
  EXPECT_THROW(validate(cfg), ConfigError);
}

// --- training loop

namespace {

Scenario small_synth(int tasks, double p, std::uint64_t seed) {
  SynthSpec spec;
  spec.n_tasks = tasks;
  spec.n_train = 200;
  spec.n_eval = 50;
  spec.n_clean_test = 200;
  spec.correlation_p = p;
  spec.seed = seed;
  return build_scenario(spec);
}

TrainerConfig quick(Method m) {
  TrainerConfig cfg;
  cfg.method = m;
  cfg.epochs_per_task = 3;
  cfg.hidden = {16};
  cfg.buffer_per_class = 20;
  return cfg;
}

}  // namespace

TEST(Training, LossDecreasesOnOneTask) {
  const Scenario sc = small_synth(1, 0.0, 1);
  TrainerConfig cfg = quick(Method::Finetune);
  cfg.epochs_per_task = 10;
  auto model = make_scenario_model(sc, cfg);
  ReplayBuffer buf;
  TrainState state;
  Rng rng(1);
  const auto logs = train_task(model, sc.tasks[0], buf, cfg, rng, state);
  ASSERT_EQ(logs.size(), 10u);
  EXPECT_LT(logs.back().mean_loss, logs.front().mean_loss);
  EXPECT_GT(accuracy(model, sc.tasks[0].train), 0.8);
  EXPECT_TRUE(buf.empty());
}

TEST(Training, ReplayFillsTheBuffer) {
  const Scenario sc = small_synth(1, 1.0, 2);
  const TrainerConfig cfg = quick(Method::Replay);
  auto model = make_scenario_model(sc, cfg);
  ReplayBuffer buf(cfg.buffer_per_class);
  TrainState state;
  Rng rng(1);
  train_task(model, sc.tasks[0], buf, cfg, rng, state);
  EXPECT_EQ(buf.size(), 40u);
}

TEST(Training, EveryMethodRunsAndIsDeterministic) {
  const Scenario sc = small_synth(2, 0.5, 3);
  for (Method m : kAllMethods) {
    const TrainerConfig cfg = quick(m);
    nn::ModelParams a, b;
    const auto ra = run_scenario(sc, cfg, {}, &a);
    const auto rb = run_scenario(sc, cfg, {}, &b);
    EXPECT_EQ(ra.entries, rb.entries) << to_string(m);
    EXPECT_EQ(a, b) << to_string(m);
    for (double v : a.heads[0].weight.values) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(Training, ZeroPenaltyTrainsLikeReplay) {
  const Scenario sc = small_synth(2, 0.5, 4);
  TrainerConfig base = quick(Method::Replay);
  nn::ModelParams ref;
  run_scenario(sc, base, {}, &ref);
  for (Method m : {Method::IRM, Method::SpectralDecoupling, Method::GroupDRO}) {
    TrainerConfig cfg = base;
    cfg.method = m;
    cfg.lambda_penalty = 0.0;
    cfg.eta_dro = 0.0;
    nn::ModelParams got;
    run_scenario(sc, cfg, {}, &got);
    for (std::size_t i = 0; i < ref.heads[0].weight.values.size(); ++i)
      EXPECT_NEAR(got.heads[0].weight.values[i], ref.heads[0].weight.values[i], 1e-9) << to_string(m);
  }
}

TEST(Training, RecordLayout) {
  const Scenario sc = small_synth(3, 1.0, 5);
  TrainerConfig cfg = quick(Method::Replay);
  cfg.per_epoch_eval = true;
  const auto rec = run_scenario(sc, cfg);
  EXPECT_EQ(rec.post_task(kSplitCleanTest).size(), 3u);
  EXPECT_EQ(rec.n_tasks(), 3);
  for (int t = 0; t < 3; ++t) {
    for (int k = 0; k <= t; ++k) EXPECT_TRUE(rec.find(t, kPostTaskEpoch, eval_spurious_split(k), "accuracy"));
    EXPECT_FALSE(rec.find(t, kPostTaskEpoch, eval_spurious_split(t + 1), "accuracy"));
    for (int e = 0; e < cfg.epochs_per_task; ++e) {
      EXPECT_TRUE(rec.find(t, e, kSplitTrain, "loss"));
      EXPECT_TRUE(rec.find(t, e, kSplitCleanTest, "accuracy"));
    }
    EXPECT_TRUE(rec.find(t, kPostTaskEpoch, kSplitTrain, "accuracy"));
  }
  for (const auto& e : rec.entries)
    if (e.metric == "accuracy") {
      EXPECT_GE(e.value, 0.0);
      EXPECT_LE(e.value, 1.0);
    }
}

TEST(Training, SeedChangesTheRun) {
  const Scenario sc = small_synth(1, 1.0, 6);
  TrainerConfig a = quick(Method::Replay), b = a;
  b.seed = 1;
  nn::ModelParams ma, mb;
  run_scenario(sc, a, {}, &ma);
  run_scenario(sc, b, {}, &mb);
  EXPECT_NE(ma, mb);
}

TEST(Training, DimensionMismatch) {
  const Scenario sc = small_synth(1, 1.0, 7);
  const TrainerConfig cfg = quick(Method::Replay);
  auto model = make_scenario_model(sc, cfg);
  TaskData bad = task_of({make_sample({1.0f, 2.0f}, 0)}, 0);
  ReplayBuffer buf;
  TrainState state;
  Rng rng(1);
  EXPECT_THROW(train_task(model, bad, buf, cfg, rng, state), ShapeError);
  EXPECT_THROW(train_task(model, TaskData{}, buf, cfg, rng, state), DataError);
}
