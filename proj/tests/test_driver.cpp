#include <gtest/gtest.h>

#include "support.hpp"
#include "tasml/driver.hpp"

namespace tasml {
namespace {

GeneratorConfig generator(std::uint64_t seed) {
  GeneratorConfig g;
  g.dim = 12;
  g.seed = seed;
  return g;
}

DriverConfig driver(std::uint64_t seed, int init_steps = 50) {
  DriverConfig c;
  c.kernel.median_bandwidth = true;
  c.lambda_theta = 3.0;
  c.learning_rate = 1e-2;
  c.init_learning_rate = 1e-3;
  c.init_steps = init_steps;
  c.seed = seed;
  return c;
}

std::shared_ptr<const MetaSet> train_set(std::uint64_t seed, std::size_t n) {
  return std::make_shared<const MetaSet>(sample_multimodal_tasks(generator(seed), n, Split::train));
}

TEST(MetaTrain, RandomInitEqualsZeroInitSteps) {
  const auto train = train_set(1, 30);
  auto a = driver(1, 0);
  auto b = driver(1, 40);
  b.random_init = true;
  const auto sa = meta_train(train, a);
  const auto sb = meta_train(train, b);
  EXPECT_EQ(sa.theta0.flat(), sb.theta0.flat());
  EXPECT_TRUE(sb.init_loss_history.empty());
}

TEST(MetaTrain, ErmLossDecreases) {
  const auto train = train_set(2, 100);
  const auto sys = meta_train(train, driver(2, 400));
  ASSERT_EQ(sys.init_loss_history.size(), 400u);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 50; ++i) {
    first += sys.init_loss_history[static_cast<std::size_t>(i)];
    last += sys.init_loss_history[sys.init_loss_history.size() - 1 - static_cast<std::size_t>(i)];
  }
  EXPECT_LT(last, first);
}

TEST(MetaTrain, RejectsBadConfig) {
  const auto train = train_set(3, 5);
  auto c = driver(3);
  c.lambda_theta = 0.0;
  EXPECT_THROW(meta_train(train, c), ConfigInvalid);
  c = driver(3);
  c.meta_batch = 0;
  EXPECT_THROW(meta_train(train, c), ConfigInvalid);
  EXPECT_THROW(meta_train(std::make_shared<const MetaSet>(), driver(3)), EmptyDataset);
}

TEST(Adapt, ZeroStepsIsTheUnconditionalSystem) {
  const auto train = train_set(4, 40);
  const auto sys = meta_train(train, driver(4));
  const auto target = sample_multimodal_tasks(generator(4), 1, Split::test).tasks[0];
  AdaptOptions o;
  o.steps = 0;
  o.top_m = 5;
  const auto tr = adapt(sys, target, o);
  ASSERT_EQ(tr.records.size(), 1u);
  EXPECT_EQ(tr.final_theta.flat(), sys.theta0.flat());
  EXPECT_EQ(tr.final_accuracy, tr.initial_accuracy);
  EXPECT_EQ(tr.initial_accuracy, task_loss(sys.theta0, target.support, target.query, 3.0, 5).accuracy);
}

TEST(Adapt, TraceHasOneRecordPerStep) {
  const auto train = train_set(5, 40);
  const auto sys = meta_train(train, driver(5));
  const auto target = sample_multimodal_tasks(generator(5), 1, Split::test).tasks[0];
  for (int j : {1, 7}) {
    AdaptOptions o;
    o.steps = j;
    o.top_m = 5;
    const auto tr = adapt(sys, target, o);
    ASSERT_EQ(tr.records.size(), static_cast<std::size_t>(j) + 1);
    for (int s = 0; s <= j; ++s) {
      EXPECT_EQ(tr.records[static_cast<std::size_t>(s)].step, s);
      EXPECT_TRUE(tr.records[static_cast<std::size_t>(s)].accuracy.has_value());
    }
    EXPECT_EQ(tr.weights.selected.size(), 5u);
  }
  AdaptOptions quiet;
  quiet.steps = 3;
  quiet.top_m = 5;
  quiet.trace_eval = false;
  const auto tr = adapt(sys, target, quiet);
  EXPECT_FALSE(tr.records.back().accuracy.has_value());
  EXPECT_GE(tr.final_accuracy, 0.0);
}

TEST(Adapt, QueryLabelsNeverInfluenceAdaptation) {
  const auto train = train_set(6, 40);
  const auto sys = meta_train(train, driver(6));
  auto target = sample_multimodal_tasks(generator(6), 1, Split::test).tasks[0];
  AdaptOptions o;
  o.steps = 5;
  o.top_m = 5;
  const auto before = adapt(sys, target, o);
  for (auto& y : target.query.labels) y = (y + 1) % 5;
  target.query.x *= -2.0;
  const auto after = adapt(sys, target, o);
  EXPECT_EQ(before.final_theta.flat(), after.final_theta.flat());
  for (std::size_t i = 0; i < before.records.size(); ++i)
    EXPECT_EQ(before.records[i].objective, after.records[i].objective);
}

TEST(Adapt, UniformSelectionWithoutTargetIsContinuedErm) {
  // Every training task is the same, so the scores are uniform and the
  // weighted objective is the ERM objective over any batch.
  const auto base = sample_multimodal_tasks(generator(7), 1, Split::train).tasks[0];
  auto set = std::make_shared<MetaSet>();
  for (int i = 0; i < 6; ++i) set->tasks.push_back(base);
  const std::shared_ptr<const MetaSet> train = set;
  auto cfg = driver(7, 0);
  cfg.lambda = 1.0; // K is all ones; keep K + lambda I well conditioned
  const auto sys = meta_train(train, cfg);

  AdaptOptions o;
  o.steps = 10;
  o.top_m = 6;
  o.beta2 = 0.0;
  const auto tr = adapt(sys, base, o);
  for (const auto& [i, w] : tr.weights.selected) EXPECT_NEAR(w, 1.0 / 6.0, 1e-12);

  MetaParams theta = sys.theta0;
  auto state = OptimizerState::create(theta.flat_size(), cfg.learning_rate, cfg.optimizer);
  const std::vector<Task> batch(cfg.meta_batch, base);
  for (int s = 0; s < o.steps; ++s) {
    const auto obj = erm_objective(theta, batch, cfg.lambda_theta, cfg.l2_theta);
    EXPECT_NEAR(obj.loss, tr.records[static_cast<std::size_t>(s)].objective, 1e-10);
    std::tie(state, theta) = optimizer_step(std::move(state), theta, obj.grad);
  }
  EXPECT_LT((theta.flat() - tr.final_theta.flat()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Adapt, RejectsBadOptions) {
  const auto train = train_set(8, 10);
  const auto sys = meta_train(train, driver(8, 0));
  const auto target = sample_multimodal_tasks(generator(8), 1, Split::test).tasks[0];
  AdaptOptions o;
  o.steps = -1;
  EXPECT_THROW(adapt(sys, target, o), ConfigInvalid);
  o = AdaptOptions{};
  o.top_m = 0;
  EXPECT_THROW(adapt(sys, target, o), ConfigInvalid);
}

TEST(Evaluate, SelectsTasksFromTheTargetMode) {
  const auto train = train_set(9, 200);
  const auto sys = meta_train(train, driver(9, 0));
  const auto test = sample_multimodal_tasks(generator(9), 20, Split::test);
  AdaptOptions o;
  o.steps = 0;
  o.top_m = 10;
  const auto summary = evaluate(sys, test, o);
  ASSERT_TRUE(summary.mode_retrieval.has_value());
  EXPECT_GT(*summary.mode_retrieval, 0.8);
  EXPECT_TRUE(std::isnan(summary.steps_per_sec));
  EXPECT_EQ(summary.mean_final, summary.mean_initial);
}

TEST(Evaluate, IndependentOfThreadCount) {
  const auto train = train_set(10, 40);
  const auto sys = meta_train(train, driver(10));
  const auto test = sample_multimodal_tasks(generator(10), 6, Split::test);
  AdaptOptions o;
  o.steps = 4;
  o.top_m = 5;
  const auto one = evaluate(sys, test, o, 1);
  const auto four = evaluate(sys, test, o, 4);
  EXPECT_EQ(one.mean_final, four.mean_final);
  EXPECT_EQ(one.std_final, four.std_final);
  for (std::size_t i = 0; i < test.size(); ++i)
    EXPECT_EQ(one.traces[i].final_theta.flat(), four.traces[i].final_theta.flat());
}

TEST(Evaluate, PopulationStatistics) {
  const auto [m, s] = mean_std({1.0, 3.0});
  EXPECT_EQ(m, 2.0);
  EXPECT_EQ(s, 1.0);
  EXPECT_EQ(mean_std({}).first, 0.0);
}

} // namespace
} // namespace tasml
