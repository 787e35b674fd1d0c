#pragma once

// Kernels between datasets and the kernel-ridge task scoring function
// alpha(D) = (K + lambda I)^{-1} v(D), plus top-M selection of the scores.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "tasml/errors.hpp"
#include "tasml/numerics.hpp"
#include "tasml/rng.hpp"
#include "tasml/taskgen.hpp"

namespace tasml {

enum class KernelFamily { gaussian, linear, laplace };

inline const char* to_string(KernelFamily f) {
  switch (f) {
  case KernelFamily::gaussian: return "gaussian";
  case KernelFamily::linear: return "linear";
  case KernelFamily::laplace: return "laplace";
  }
  return "?";
}

inline KernelFamily parse_kernel_family(const std::string& s) {
  if (s == "gaussian") return KernelFamily::gaussian;
  if (s == "linear") return KernelFamily::linear;
  if (s == "laplace") return KernelFamily::laplace;
  throw ConfigInvalid("kernel.family", "unknown kernel family '" + s + "'");
}

enum class FeatureMapKind { identity, random_projection };

struct KernelConfig {
  KernelFamily family = KernelFamily::gaussian;
  double sigma = 50.0;
  // When set, fit_scoring replaces sigma by the median pairwise distance
  // between training signatures.
  bool median_bandwidth = false;
  double c = 0.0;
  FeatureMapKind feature_map = FeatureMapKind::identity;
  int projection_dim = 0;
  std::uint64_t projection_seed = 0;
};

inline void validate(const KernelConfig& k) {
  if (k.family != KernelFamily::linear && !k.median_bandwidth && !(k.sigma > 0.0 && std::isfinite(k.sigma)))
    throw ConfigInvalid("kernel.sigma", "must be > 0");
  if (!(k.c >= 0.0) || !std::isfinite(k.c)) throw ConfigInvalid("kernel.c", "must be >= 0");
  if (k.feature_map == FeatureMapKind::random_projection && k.projection_dim < 1)
    throw ConfigInvalid("kernel.feature_map", "projection dimension must be >= 1");
}

/// Seeded p x d matrix with orthonormal rows (p <= d).
inline Matrix make_projection(int p, Eigen::Index d, std::uint64_t seed) {
  if (p < 1 || p > d)
    throw DimensionMismatch("random projection: need 1 <= p <= d, got p=" + std::to_string(p) +
                            " d=" + std::to_string(d));
  Rng rng = make_rng(seed, {kTagProjection, static_cast<std::uint64_t>(p), static_cast<std::uint64_t>(d)});
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(d, p);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < p; ++j) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, p);
  return q.transpose();
}

/// Input feature map used for signatures; the projection is materialized once
/// per input dimension.
class FeatureMap {
public:
  FeatureMap() = default;
  FeatureMap(const KernelConfig& k, Eigen::Index input_dim) : input_dim_(input_dim) {
    if (k.feature_map == FeatureMapKind::random_projection)
      projection_ = make_projection(k.projection_dim, input_dim, k.projection_seed);
  }

  Eigen::Index input_dim() const { return input_dim_; }
  Eigen::Index output_dim() const { return projection_.size() == 0 ? input_dim_ : projection_.rows(); }

  Matrix apply(const Eigen::Ref<const Matrix>& x) const {
    if (x.cols() != input_dim_)
      throw DimensionMismatch("feature map expects dim " + std::to_string(input_dim_) + ", got " +
                              std::to_string(x.cols()));
    if (projection_.size() == 0) return x;
    return x * projection_.transpose();
  }

  const Matrix& projection() const { return projection_; }

private:
  Eigen::Index input_dim_ = 0;
  Matrix projection_;
};

struct Signature {
  Vector mean_embedding;
  std::size_t n_points = 0;
};

/// Mean of feature-mapped inputs. Rows are summed in lexicographic order of
/// their values so any reordering of the dataset gives a bitwise-equal result.
inline Signature signature(const Dataset& support, const FeatureMap& map) {
  if (support.empty()) throw EmptyDataset("signature of an empty dataset");
  const Matrix phi = map.apply(support.x);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(phi.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index j = 0; j < phi.cols(); ++j) {
      if (phi(a, j) < phi(b, j)) return true;
      if (phi(b, j) < phi(a, j)) return false;
    }
    return false;
  });
  Vector sum = Vector::Zero(phi.cols());
  for (auto r : order) sum += phi.row(r).transpose();
  Signature s;
  s.n_points = static_cast<std::size_t>(phi.rows());
  s.mean_embedding = sum / static_cast<double>(phi.rows());
  require_finite(s.mean_embedding, "signature");
  return s;
}

inline Signature signature(const Dataset& support, const KernelConfig& kernel) {
  if (support.empty()) throw EmptyDataset("signature of an empty dataset");
  return signature(support, FeatureMap(kernel, support.dim()));
}

inline double kernel_eval(const Signature& a, const Signature& b, const KernelConfig& kernel) {
  if (a.mean_embedding.size() != b.mean_embedding.size())
    throw DimensionMismatch("kernel_eval: signature dims " + std::to_string(a.mean_embedding.size()) + " and " +
                            std::to_string(b.mean_embedding.size()));
  switch (kernel.family) {
  case KernelFamily::gaussian: {
    const double d2 = (a.mean_embedding - b.mean_embedding).squaredNorm();
    return std::exp(-d2 / (kernel.sigma * kernel.sigma));
  }
  case KernelFamily::laplace: return std::exp(-(a.mean_embedding - b.mean_embedding).norm() / kernel.sigma);
  case KernelFamily::linear: {
    // Summed in index order on both sides so the result is exactly symmetric.
    double dot = 0.0;
    for (Eigen::Index i = 0; i < a.mean_embedding.size(); ++i) dot += a.mean_embedding[i] * b.mean_embedding[i];
    return dot + kernel.c;
  }
  }
  return 0.0;
}

/// Median pairwise Euclidean distance between signatures; 1 when degenerate.
inline double median_pairwise_distance(const std::vector<Signature>& sigs) {
  std::vector<double> d;
  d.reserve(sigs.size() * (sigs.size() - (sigs.empty() ? 0 : 1)) / 2);
  for (std::size_t i = 0; i < sigs.size(); ++i)
    for (std::size_t j = i + 1; j < sigs.size(); ++j)
      d.push_back((sigs[i].mean_embedding - sigs[j].mean_embedding).norm());
  if (d.empty()) return 1.0;
  const auto mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  double med = d[mid];
  if (d.size() % 2 == 0) {
    const double lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (med + lower);
  }
  return med > 0.0 ? med : 1.0;
}

struct ScoringModel {
  std::vector<Signature> signatures;
  CholeskyFactor chol; // factor of K + lambda I (+ chol.jitter I)
  double lambda = 1e-8;
  KernelConfig kernel; // sigma resolved, median_bandwidth cleared
  FeatureMap feature_map;

  std::size_t size() const { return signatures.size(); }
};

inline Matrix kernel_matrix(const std::vector<Signature>& sigs, const KernelConfig& kernel) {
  const auto n = static_cast<Eigen::Index>(sigs.size());
  Matrix k(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    k(i, i) = kernel_eval(sigs[static_cast<std::size_t>(i)], sigs[static_cast<std::size_t>(i)], kernel);
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = kernel_eval(sigs[static_cast<std::size_t>(i)], sigs[static_cast<std::size_t>(j)], kernel);
      k(i, j) = v;
      k(j, i) = v;
    }
  }
  return k;
}

/// Builds the scoring model from the support sets of the training tasks and
/// factorizes K + lambda I once.
inline ScoringModel fit_scoring(const MetaSet& train, KernelConfig kernel, double lambda = 1e-8) {
  if (train.empty()) throw EmptyDataset("fit_scoring: empty meta-training set");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigInvalid("lambda", "must be > 0");
  validate(kernel);
  ScoringModel model;
  model.lambda = lambda;
  model.feature_map = FeatureMap(kernel, train.tasks.front().support.dim());
  model.signatures.reserve(train.size());
  for (const auto& t : train.tasks) model.signatures.push_back(signature(t.support, model.feature_map));
  if (kernel.median_bandwidth) {
    kernel.sigma = median_pairwise_distance(model.signatures);
    kernel.median_bandwidth = false;
  }
  model.kernel = kernel;
  Matrix k = kernel_matrix(model.signatures, kernel);
  k.diagonal().array() += lambda;
  model.chol = cholesky_factor(k, 0.0);
  return model;
}

struct TaskWeights {
  Vector full;
  std::vector<std::pair<std::size_t, double>> selected;
};

inline Vector evaluation_vector(const ScoringModel& model, const Signature& target) {
  Vector v(static_cast<Eigen::Index>(model.size()));
  for (std::size_t i = 0; i < model.size(); ++i)
    v[static_cast<Eigen::Index>(i)] = kernel_eval(model.signatures[i], target, model.kernel);
  return v;
}

/// Scores every training task against the target support set.
inline TaskWeights score(const ScoringModel& model, const Dataset& target_support) {
  if (model.size() == 0) throw Error("score: scoring model is not fitted");
  if (target_support.dim() != model.feature_map.input_dim())
    throw DimensionMismatch("score: target dim " + std::to_string(target_support.dim()) + ", model expects " +
                            std::to_string(model.feature_map.input_dim()));
  const Signature target = signature(target_support, model.feature_map);
  TaskWeights w;
  w.full = model.chol.solve_vector(evaluation_vector(model, target));
  return w;
}

/// Keeps the M largest scores (ties to the lower index), clamps negatives to
/// zero and renormalizes to sum one; uniform 1/M if nothing positive is left.
inline TaskWeights top_m_filter(TaskWeights weights, std::size_t m) {
  const auto n = static_cast<std::size_t>(weights.full.size());
  if (n == 0) throw EmptyDataset("top_m_filter: no weights");
  if (m < 1) m = 1;
  if (m > n) {
    std::cerr << "warning: top-M filter size " << m << " exceeds " << n << " tasks; using " << n << '\n';
    m = n;
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return weights.full[static_cast<Eigen::Index>(a)] > weights.full[static_cast<Eigen::Index>(b)];
  });
  idx.resize(m);

  weights.selected.clear();
  double total = 0.0;
  for (auto i : idx) {
    const double w = std::max(0.0, weights.full[static_cast<Eigen::Index>(i)]);
    weights.selected.emplace_back(i, w);
    total += w;
  }
  if (total < 1e-12) {
    for (auto& [i, w] : weights.selected) w = 1.0 / static_cast<double>(m);
  } else {
    for (auto& [i, w] : weights.selected) w /= total;
  }
  return weights;
}

} // namespace tasml
