// Invariants checked over many random instances.

#include <gtest/gtest.h>

#include "support.hpp"
#include "tasml/driver.hpp"

namespace tasml {
namespace {

using testing::random_dataset;
using testing::random_task;
using testing::random_theta;

constexpr int kTrials = 25;

TEST(Property, CholeskyReconstructsWithinJitter) {
  Rng rng(100);
  for (int t = 0; t < kTrials; ++t) {
    const Eigen::Index n = 1 + t % 12;
    // Rank-deficient Gram matrices every third trial.
    const Matrix a = t % 3 == 0 ? Matrix(testing::random_matrix(n, 1, rng) * testing::random_matrix(1, n, rng))
                                : testing::random_spd(n, rng);
    const Matrix sym = 0.5 * (a + a.transpose());
    Matrix psd = t % 3 == 0 ? Matrix(sym * sym.transpose()) : sym;
    psd = 0.5 * (psd + psd.transpose());
    const auto f = cholesky_factor(psd);
    EXPECT_LE(max_abs(f.reconstruct() - psd), f.jitter + 1e-10 * std::max(1.0, max_abs(psd))) << "trial " << t;
  }
}

TEST(Property, KernelSymmetricAndSelfSimilar) {
  Rng rng(101);
  for (int t = 0; t < kTrials; ++t) {
    KernelConfig k;
    k.family = static_cast<KernelFamily>(t % 3);
    k.sigma = 0.5 + t;
    const auto a = signature(random_dataset(2, 3, 5, rng), k);
    const auto b = signature(random_dataset(2, 3, 5, rng), k);
    EXPECT_EQ(kernel_eval(a, b, k), kernel_eval(b, a, k));
    if (k.family != KernelFamily::linear) {
      EXPECT_EQ(kernel_eval(a, a, k), 1.0);
      EXPECT_GT(kernel_eval(a, b, k), 0.0);
      EXPECT_LE(kernel_eval(a, b, k), 1.0);
    }
  }
}

TEST(Property, SignatureInvariantToRowOrder) {
  Rng rng(102);
  for (int t = 0; t < kTrials; ++t) {
    const Dataset d = random_dataset(3, 1 + t % 5, 7, rng);
    Dataset r = d;
    r.x = d.x.colwise().reverse();
    EXPECT_EQ(signature(d, KernelConfig{}).mean_embedding, signature(r, KernelConfig{}).mean_embedding);
  }
}

TEST(Property, TopMWeightsAreADistribution) {
  Rng rng(103);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int t = 0; t < kTrials; ++t) {
    TaskWeights w;
    w.full = Vector(20);
    for (Eigen::Index i = 0; i < 20; ++i) w.full[i] = normal(rng);
    const std::size_t m = 1 + static_cast<std::size_t>(t % 20);
    const auto f = top_m_filter(w, m);
    ASSERT_EQ(f.selected.size(), m);
    double sum = 0.0;
    double smallest_kept = 1e300;
    std::set<std::size_t> idx;
    for (const auto& [i, v] : f.selected) {
      EXPECT_GE(v, 0.0);
      sum += v;
      idx.insert(i);
      smallest_kept = std::min(smallest_kept, w.full[static_cast<Eigen::Index>(i)]);
    }
    EXPECT_EQ(idx.size(), m);
    EXPECT_NEAR(sum, 1.0, 1e-12);
    for (Eigen::Index i = 0; i < 20; ++i) {
      if (!idx.count(static_cast<std::size_t>(i))) {
        EXPECT_LE(w.full[i], smallest_kept);
      }
    }
  }
}

TEST(Property, DualAndPrimalHeadsAgree) {
  Rng rng(104);
  for (int t = 0; t < kTrials; ++t) {
    const int ways = 2 + t % 4;
    const Eigen::Index p = 4 + t % 9;
    const auto theta = random_theta(p, rng, 0.2);
    const auto s = random_dataset(ways, 1 + t % 5, p, rng);
    const double lambda = 0.05 + 0.1 * (t % 4);
    const Matrix x = repr_forward(theta, s.x);
    Matrix a = x.transpose() * x;
    a.diagonal().array() += lambda;
    const Matrix primal = testing::gauss_solve(a, x.transpose() * one_hot(s.labels, ways)).transpose();
    EXPECT_LT(max_abs(solve_head(theta, s, lambda, ways).w - primal), 1e-8) << "trial " << t;
  }
}

TEST(Property, LossAndAccuracyBounds) {
  Rng rng(105);
  for (int t = 0; t < kTrials; ++t) {
    const auto theta = random_theta(5, rng, 0.5);
    const auto task = random_task(2 + t % 4, 1 + t % 3, 3, 5, rng, 1.0);
    const auto r = task_loss(theta, task.support, task.query, 0.1, task.ways);
    EXPECT_GE(r.loss, 0.0);
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
  }
}

TEST(Property, GradientsMatchFiniteDifferences) {
  Rng rng(106);
  for (int t = 0; t < 8; ++t) {
    const Eigen::Index p = 3 + t % 3;
    const auto theta = random_theta(p, rng);
    const auto task = random_task(2 + t % 3, 1 + t % 4, 3, p, rng);
    const auto g = task_loss_grad(theta, task.support, task.query, 0.3, 1e-3, task.ways);
    auto f = [&](const Vector& v) {
      return task_loss(MetaParams::from_flat(v, p), task.support, task.query, 0.3, task.ways).loss +
             1e-3 * v.squaredNorm();
    };
    EXPECT_LT(grad_check(f, theta.flat(), g.grad), 1e-4) << "trial " << t;
  }
}

TEST(Property, TraceLengthIsStepsPlusOne) {
  GeneratorConfig g;
  g.dim = 8;
  g.signal_dims = 2;
  g.seed = 107;
  const auto train = std::make_shared<const MetaSet>(sample_multimodal_tasks(g, 20, Split::train));
  DriverConfig c;
  c.kernel.median_bandwidth = true;
  c.init_steps = 0;
  c.seed = 107;
  const auto sys = meta_train(train, c);
  const auto test = sample_multimodal_tasks(g, 3, Split::test);
  for (int j = 0; j < 6; ++j) {
    AdaptOptions o;
    o.steps = j;
    o.top_m = 1 + static_cast<std::size_t>(j);
    const auto tr = adapt(sys, test.tasks[static_cast<std::size_t>(j) % 3], o);
    EXPECT_EQ(tr.records.size(), static_cast<std::size_t>(j) + 1);
    EXPECT_EQ(tr.weights.selected.size(), o.top_m);
  }
}

} // namespace
} // namespace tasml
