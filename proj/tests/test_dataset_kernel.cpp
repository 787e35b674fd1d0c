#include <gtest/gtest.h>

#include <algorithm>

#include "support.hpp"
#include "tasml/dataset_kernel.hpp"

namespace tasml {
namespace {

Dataset rows(std::initializer_list<std::initializer_list<double>> values) {
  Dataset d;
  const auto n = static_cast<Eigen::Index>(values.size());
  d.x.resize(n, static_cast<Eigen::Index>(values.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : values) {
    Eigen::Index c = 0;
    for (double v : row) d.x(r, c++) = v;
    d.labels.push_back(0);
    ++r;
  }
  return d;
}

Signature sig(std::initializer_list<double> v) {
  Signature s;
  s.mean_embedding = Vector(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) s.mean_embedding[i++] = x;
  s.n_points = 1;
  return s;
}

KernelConfig gaussian(double sigma) {
  KernelConfig k;
  k.sigma = sigma;
  return k;
}

MetaSet metaset_from(std::vector<Dataset> supports) {
  MetaSet m;
  for (auto& s : supports) {
    Task t;
    t.support = std::move(s);
    t.query = t.support;
    t.ways = 1;
    m.tasks.push_back(std::move(t));
  }
  return m;
}

TEST(Signature, SingletonAndMean) {
  const KernelConfig k;
  const auto one = signature(rows({{1.0, 2.0}}), k);
  EXPECT_EQ(one.n_points, 1u);
  EXPECT_EQ(one.mean_embedding, (Vector(2) << 1.0, 2.0).finished());
  const auto two = signature(rows({{0.0, 0.0}, {1.0, 1.0}}), k);
  EXPECT_EQ(two.mean_embedding, (Vector(2) << 0.5, 0.5).finished());
  EXPECT_THROW(signature(Dataset{}, k), EmptyDataset);
}

TEST(Signature, RowOrderDoesNotMatter) {
  Rng rng(1);
  Dataset d = testing::random_dataset(4, 5, 9, rng);
  Dataset shuffled = d;
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(d.size()));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t i = 0; i < perm.size(); ++i) shuffled.x.row(static_cast<Eigen::Index>(i)) = d.x.row(perm[i]);
  EXPECT_EQ(signature(d, KernelConfig{}).mean_embedding, signature(shuffled, KernelConfig{}).mean_embedding);
}

TEST(Signature, RandomProjection) {
  Rng rng(2);
  const Dataset d = testing::random_dataset(3, 4, 10, rng);
  KernelConfig k;
  k.feature_map = FeatureMapKind::random_projection;
  k.projection_dim = 4;
  k.projection_seed = 99;
  const Matrix p = make_projection(4, 10, 99);
  EXPECT_LT(max_abs(p * p.transpose() - Matrix::Identity(4, 4)), 1e-12);
  EXPECT_EQ(p, make_projection(4, 10, 99));
  const Vector mean = d.x.colwise().mean().transpose();
  EXPECT_LT((signature(d, k).mean_embedding - p * mean).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(make_projection(11, 10, 1), DimensionMismatch);
}

TEST(Kernel, GaussianValues) {
  const auto k = gaussian(1.0);
  EXPECT_EQ(kernel_eval(sig({0.3, -0.2}), sig({0.3, -0.2}), k), 1.0);
  EXPECT_NEAR(kernel_eval(sig({0.0, 0.0}), sig({1.0, 0.0}), k), std::exp(-1.0), 1e-15);
  EXPECT_NEAR(kernel_eval(sig({0.0}), sig({2.0}), gaussian(2.0)), std::exp(-1.0), 1e-15);
}

TEST(Kernel, LinearAndLaplaceValues) {
  KernelConfig lin;
  lin.family = KernelFamily::linear;
  EXPECT_EQ(kernel_eval(sig({1.0, 0.0}), sig({0.0, 1.0}), lin), 0.0);
  lin.c = 0.5;
  EXPECT_EQ(kernel_eval(sig({1.0, 2.0}), sig({3.0, 4.0}), lin), 11.5);
  KernelConfig lap;
  lap.family = KernelFamily::laplace;
  lap.sigma = 2.0;
  EXPECT_NEAR(kernel_eval(sig({0.0, 0.0}), sig({3.0, 4.0}), lap), std::exp(-2.5), 1e-15);
}

TEST(Kernel, SymmetricAndDimensionChecked) {
  Rng rng(3);
  for (auto family : {KernelFamily::gaussian, KernelFamily::linear, KernelFamily::laplace}) {
    KernelConfig k;
    k.family = family;
    k.sigma = 1.3;
    Signature a, b;
    a.mean_embedding = testing::random_matrix(7, 1, rng).col(0);
    b.mean_embedding = testing::random_matrix(7, 1, rng).col(0);
    EXPECT_EQ(kernel_eval(a, b, k), kernel_eval(b, a, k));
  }
  EXPECT_THROW(kernel_eval(sig({1.0}), sig({1.0, 2.0}), KernelConfig{}), DimensionMismatch);
}

TEST(Scoring, SingleTask) {
  const double lambda = 1e-3;
  const auto model = fit_scoring(metaset_from({rows({{1.0, 1.0}})}), gaussian(1.0), lambda);
  EXPECT_NEAR(model.chol.lower(0, 0), std::sqrt(1.0 + lambda), 1e-15);
  const auto w = score(model, rows({{1.0, 1.0}}));
  EXPECT_NEAR(w.full[0], 1.0 / (1.0 + lambda), 1e-15);
  const auto far = score(model, rows({{2.0, 1.0}}));
  EXPECT_NEAR(far.full[0], std::exp(-1.0) / (1.0 + lambda), 1e-15);
}

TEST(Scoring, IdenticalSupportsFactorize) {
  const auto d = rows({{0.5, 0.5}, {1.0, 0.0}});
  const auto model = fit_scoring(metaset_from({d, d, d}), gaussian(1.0), 1e-8);
  const Matrix k = kernel_matrix(model.signatures, model.kernel);
  EXPECT_EQ(k, Matrix::Ones(3, 3));
  const auto w = score(model, d);
  EXPECT_TRUE(w.full.allFinite());
  // K alpha + lambda alpha = v with K all ones and v = 1 gives equal entries summing to ~1.
  EXPECT_NEAR(w.full.sum(), 1.0, 1e-6);
}

TEST(Scoring, KernelMatrixMatchesDoubleLoop) {
  Rng rng(4);
  std::vector<Dataset> supports;
  for (int i = 0; i < 6; ++i) supports.push_back(testing::random_dataset(2, 3, 5, rng));
  KernelConfig k;
  k.median_bandwidth = true;
  const auto model = fit_scoring(metaset_from(supports), k, 1e-8);
  EXPECT_FALSE(model.kernel.median_bandwidth);
  EXPECT_GT(model.kernel.sigma, 0.0);
  const Matrix reconstructed = model.chol.reconstruct();
  for (std::size_t i = 0; i < supports.size(); ++i)
    for (std::size_t j = 0; j < supports.size(); ++j) {
      const Vector mi = supports[i].x.colwise().mean().transpose();
      const Vector mj = supports[j].x.colwise().mean().transpose();
      double expect = std::exp(-(mi - mj).squaredNorm() / (model.kernel.sigma * model.kernel.sigma));
      if (i == j) expect += model.lambda + model.chol.jitter;
      EXPECT_NEAR(reconstructed(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), expect, 1e-10);
    }
}

TEST(Scoring, MedianBandwidth) {
  std::vector<Signature> s{sig({0.0}), sig({1.0}), sig({3.0})};
  // Distances 1, 2, 3.
  EXPECT_EQ(median_pairwise_distance(s), 2.0);
  s.push_back(sig({6.0}));
  // Distances 1, 2, 3, 3, 5, 6.
  EXPECT_EQ(median_pairwise_distance(s), 3.0);
  EXPECT_EQ(median_pairwise_distance({sig({1.0})}), 1.0);
}

TEST(Scoring, InterpolatesTrainingTasks) {
  // Well separated signatures: K is close to I, so alpha(D_i) is close to e_i.
  std::vector<Dataset> supports;
  for (int i = 0; i < 5; ++i) supports.push_back(rows({{10.0 * i, 0.0}, {10.0 * i, 1.0}}));
  const double lambda = 1e-8;
  const auto model = fit_scoring(metaset_from(supports), gaussian(1.0), lambda);
  for (std::size_t i = 0; i < supports.size(); ++i) {
    const auto w = score(model, supports[i]);
    Vector e = Vector::Zero(5);
    e[static_cast<Eigen::Index>(i)] = 1.0;
    EXPECT_LT((w.full - e).cwiseAbs().maxCoeff(), 10.0 * lambda);
  }
}

TEST(Scoring, SymmetricTasksGetEqualWeights) {
  // Two training tasks that are the same set of rows in different order.
  const auto a = rows({{0.0, 1.0}, {1.0, 0.0}, {0.5, 0.5}});
  const auto b = rows({{0.5, 0.5}, {0.0, 1.0}, {1.0, 0.0}});
  const auto model = fit_scoring(metaset_from({a, b, rows({{3.0, 3.0}})}), gaussian(1.0), 1e-3);
  const auto w = score(model, rows({{0.2, 0.2}}));
  EXPECT_LT(std::abs(w.full[0] - w.full[1]), 1e-10);
}

TEST(Scoring, DimensionMismatch) {
  const auto model = fit_scoring(metaset_from({rows({{1.0, 1.0}})}), gaussian(1.0));
  EXPECT_THROW(score(model, rows({{1.0, 1.0, 1.0}})), DimensionMismatch);
  EXPECT_THROW(fit_scoring(MetaSet{}, gaussian(1.0)), EmptyDataset);
  EXPECT_THROW(fit_scoring(metaset_from({rows({{1.0}})}), gaussian(1.0), 0.0), ConfigInvalid);
  EXPECT_THROW(fit_scoring(metaset_from({rows({{1.0}})}), gaussian(-1.0)), ConfigInvalid);
}

TaskWeights weights(std::initializer_list<double> v) {
  TaskWeights w;
  w.full = Vector(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) w.full[i++] = x;
  return w;
}

using Selected = std::vector<std::pair<std::size_t, double>>;

TEST(TopM, KeepsLargestAndRenormalizes) {
  const auto w = top_m_filter(weights({0.5, 0.3, 0.2}), 2);
  ASSERT_EQ(w.selected.size(), 2u);
  EXPECT_EQ(w.selected[0].first, 0u);
  EXPECT_NEAR(w.selected[0].second, 0.625, 1e-15);
  EXPECT_EQ(w.selected[1].first, 1u);
  EXPECT_NEAR(w.selected[1].second, 0.375, 1e-15);
}

TEST(TopM, ClampsNegatives) {
  const auto w = top_m_filter(weights({1.0, -0.2}), 2);
  EXPECT_EQ(w.selected, (Selected{{0, 1.0}, {1, 0.0}}));
}

TEST(TopM, EqualScoresGiveUniformWeights) {
  const auto w = top_m_filter(weights({0.2, 0.2, 0.2, 0.2}), 4);
  for (const auto& [i, v] : w.selected) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(TopM, NoPositiveScoresFallsBackToUniform) {
  const auto w = top_m_filter(weights({-1.0, -2.0, 0.0}), 2);
  EXPECT_EQ(w.selected, (Selected{{2, 0.5}, {0, 0.5}}));
}

TEST(TopM, TiesGoToLowerIndex) {
  const auto w = top_m_filter(weights({0.1, 0.4, 0.4, 0.4}), 2);
  EXPECT_EQ(w.selected[0].first, 1u);
  EXPECT_EQ(w.selected[1].first, 2u);
}

TEST(TopM, ClampsMToN) {
  const auto w = top_m_filter(weights({0.5, 0.5}), 5);
  EXPECT_EQ(w.selected.size(), 2u);
  EXPECT_THROW(top_m_filter(TaskWeights{}, 1), EmptyDataset);
}

TEST(TopM, Idempotent) {
  const auto once = top_m_filter(weights({0.1, 0.7, -0.3, 0.2, 0.4}), 3);
  TaskWeights again;
  again.full = Vector::Zero(5);
  for (const auto& [i, v] : once.selected) again.full[static_cast<Eigen::Index>(i)] = v;
  const auto twice = top_m_filter(again, 3);
  ASSERT_EQ(twice.selected.size(), once.selected.size());
  for (std::size_t i = 0; i < once.selected.size(); ++i) {
    EXPECT_EQ(twice.selected[i].first, once.selected[i].first);
    EXPECT_NEAR(twice.selected[i].second, once.selected[i].second, 1e-15);
  }
}

TEST(TopM, ScaleFree) {
  const auto a = top_m_filter(weights({0.1, 0.7, 0.3, 0.2}), 2);
  const auto b = top_m_filter(weights({0.3, 2.1, 0.9, 0.6}), 2);
  ASSERT_EQ(a.selected.size(), b.selected.size());
  for (std::size_t i = 0; i < a.selected.size(); ++i) {
    EXPECT_EQ(a.selected[i].first, b.selected[i].first);
    EXPECT_NEAR(a.selected[i].second, b.selected[i].second, 1e-15);
  }
}

} // namespace
} // namespace tasml
