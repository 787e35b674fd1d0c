#pragma once

// Least-squares meta-learning: a residual two-layer representation
// psi(x) = x + W2 relu(W1 x + b1) + b2, a closed-form ridge head fitted on the
// support set in dual form, the squared-error task loss on the query set, and
// its exact gradient with respect to the representation parameters.

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tasml/errors.hpp"
#include "tasml/numerics.hpp"
#include "tasml/rng.hpp"
#include "tasml/taskgen.hpp"

namespace tasml {

struct MetaParams {
  Matrix w1; // p x p
  Vector b1; // p
  Matrix w2; // p x p
  Vector b2; // p

  static MetaParams zeros(Eigen::Index p) {
    return {Matrix::Zero(p, p), Vector::Zero(p), Matrix::Zero(p, p), Vector::Zero(p)};
  }

  /// He-style init: weights N(0, 2/p), zero biases.
  static MetaParams random(Eigen::Index p, Rng& rng) {
    MetaParams t = zeros(p);
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(p)));
    for (Eigen::Index i = 0; i < p; ++i)
      for (Eigen::Index j = 0; j < p; ++j) t.w1(i, j) = normal(rng);
    for (Eigen::Index i = 0; i < p; ++i)
      for (Eigen::Index j = 0; j < p; ++j) t.w2(i, j) = normal(rng);
    return t;
  }

  Eigen::Index dim() const { return w1.rows(); }
  Eigen::Index flat_size() const { return 2 * dim() * dim() + 2 * dim(); }

  /// Flat layout: w1 (row-major), b1, w2 (row-major), b2.
  Vector flat() const {
    const Eigen::Index p = dim();
    Vector v(flat_size());
    Eigen::Index o = 0;
    v.segment(o, p * p) = Eigen::Map<const Vector>(w1.data(), p * p);
    o += p * p;
    v.segment(o, p) = b1;
    o += p;
    v.segment(o, p * p) = Eigen::Map<const Vector>(w2.data(), p * p);
    o += p * p;
    v.segment(o, p) = b2;
    return v;
  }

  static MetaParams from_flat(const Vector& v, Eigen::Index p) {
    if (v.size() != 2 * p * p + 2 * p)
      throw DimensionMismatch("MetaParams::from_flat: size " + std::to_string(v.size()) + " does not match p=" +
                              std::to_string(p));
    MetaParams t = zeros(p);
    Eigen::Index o = 0;
    Eigen::Map<Vector>(t.w1.data(), p * p) = v.segment(o, p * p);
    o += p * p;
    t.b1 = v.segment(o, p);
    o += p;
    Eigen::Map<Vector>(t.w2.data(), p * p) = v.segment(o, p * p);
    o += p * p;
    t.b2 = v.segment(o, p);
    return t;
  }

  double squared_norm() const {
    return w1.squaredNorm() + b1.squaredNorm() + w2.squaredNorm() + b2.squaredNorm();
  }

  bool consistent() const {
    const auto p = w1.rows();
    return p > 0 && w1.cols() == p && b1.size() == p && w2.rows() == p && w2.cols() == p && b2.size() == p;
  }
};

struct RidgeHead {
  Matrix w; // C x p
  double lambda_theta = 0.1;
};

struct TaskLossReport {
  double loss = 0.0;
  double accuracy = 0.0;
  std::optional<Vector> per_example;
};

inline void require_shape(const MetaParams& theta, Eigen::Index input_dim) {
  if (!theta.consistent()) throw DimensionMismatch("MetaParams has inconsistent layer shapes");
  if (input_dim != theta.dim())
    throw DimensionMismatch("input dim " + std::to_string(input_dim) + " but representation expects " +
                            std::to_string(theta.dim()));
}

/// Row-wise representation of a batch of inputs.
inline Matrix repr_forward(const MetaParams& theta, const Eigen::Ref<const Matrix>& x) {
  require_shape(theta, x.cols());
  Matrix h = x * theta.w1.transpose();
  h.rowwise() += theta.b1.transpose();
  Matrix z = x + h.cwiseMax(0.0) * theta.w2.transpose();
  z.rowwise() += theta.b2.transpose();
  return z;
}

inline Vector repr_forward_one(const MetaParams& theta, const Vector& x) {
  Matrix row = x.transpose();
  Matrix z = repr_forward(theta, Eigen::Ref<const Matrix>(row));
  return z.row(0).transpose();
}

inline int infer_ways(const Dataset& a, const Dataset* b = nullptr) {
  int ways = 0;
  for (int y : a.labels) ways = std::max(ways, y + 1);
  if (b)
    for (int y : b->labels) ways = std::max(ways, y + 1);
  return ways;
}

inline Matrix one_hot(const std::vector<int>& labels, int ways) {
  Matrix y = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), ways);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= ways)
      throw DimensionMismatch("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(ways) + ")");
    y(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  return y;
}

namespace detail {

// Dual-form ridge coefficients: (F F^T + lambda I)^{-1} Y, with the factor.
struct DualRidge {
  CholeskyFactor gram;
  Matrix coef; // m x C
};

inline DualRidge dual_ridge(const Eigen::Ref<const Matrix>& features, const Matrix& targets, double lambda_theta) {
  Matrix gram = features * features.transpose();
  gram.diagonal().array() += lambda_theta;
  DualRidge out;
  out.gram = cholesky_factor(gram, 0.0);
  out.coef = out.gram.solve(targets);
  return out;
}

} // namespace detail

/// W = X^T (X X^T + lambda I)^{-1} Y on the represented support set, as C x p.
inline RidgeHead solve_head(const MetaParams& theta, const Dataset& support, double lambda_theta = 0.1,
                            int ways = 0) {
  if (support.empty()) throw EmptyDataset("solve_head: empty support set");
  if (!(lambda_theta > 0.0)) throw ConfigInvalid("lambda_theta", "must be > 0");
  if (ways <= 0) ways = infer_ways(support);
  const Matrix f = repr_forward(theta, support.x);
  const auto ridge = detail::dual_ridge(f, one_hot(support.labels, ways), lambda_theta);
  RidgeHead head;
  head.lambda_theta = lambda_theta;
  head.w = (f.transpose() * ridge.coef).transpose();
  require_finite(head.w, "ridge head");
  return head;
}

/// One term of a loss: a support set used to fit the head and a query set on
/// which the squared error is measured. The target-task term passes the same
/// dataset as both.
struct LossTerm {
  const Dataset* support = nullptr;
  const Dataset* query = nullptr;
  double weight = 1.0;
  int ways = 0;
};

struct BatchResult {
  double loss = 0.0; // sum_t weight_t * loss_t
  Vector grad;       // flat gradient of `loss`, empty when not requested
  std::vector<TaskLossReport> reports;
};

/// Weighted sum of per-term task losses and its exact gradient. All inputs of
/// all terms go through the network in a single stacked pass.
inline BatchResult batched_task_loss(const MetaParams& theta, std::span<const LossTerm> terms, double lambda_theta,
                                     bool want_grad, bool want_per_example = false) {
  if (!theta.consistent()) throw DimensionMismatch("MetaParams has inconsistent layer shapes");
  if (!(lambda_theta > 0.0)) throw ConfigInvalid("lambda_theta", "must be > 0");
  const Eigen::Index p = theta.dim();

  struct Layout {
    Eigen::Index support_row, query_row, m, n;
    int ways;
  };
  std::vector<Layout> layout;
  layout.reserve(terms.size());
  Eigen::Index rows = 0;
  for (const auto& t : terms) {
    if (!t.support || !t.query || t.support->empty() || t.query->empty())
      throw EmptyDataset("task loss needs non-empty support and query sets");
    require_shape(theta, t.support->dim());
    require_shape(theta, t.query->dim());
    Layout l{rows, 0, t.support->size(), t.query->size(), t.ways > 0 ? t.ways : infer_ways(*t.support, t.query)};
    rows += l.m;
    if (t.query == t.support) {
      l.query_row = l.support_row;
    } else {
      l.query_row = rows;
      rows += l.n;
    }
    layout.push_back(l);
  }

  Matrix x(rows, p);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    x.middleRows(layout[i].support_row, layout[i].m) = terms[i].support->x;
    if (terms[i].query != terms[i].support) x.middleRows(layout[i].query_row, layout[i].n) = terms[i].query->x;
  }

  Matrix pre = x * theta.w1.transpose();
  pre.rowwise() += theta.b1.transpose();
  const Matrix act = pre.cwiseMax(0.0);
  Matrix z = x + act * theta.w2.transpose();
  z.rowwise() += theta.b2.transpose();

  BatchResult out;
  out.reports.reserve(terms.size());
  Matrix dz;
  if (want_grad) dz = Matrix::Zero(rows, p);

  for (std::size_t i = 0; i < terms.size(); ++i) {
    const auto& l = layout[i];
    const auto f = z.middleRows(l.support_row, l.m);
    const auto fq = z.middleRows(l.query_row, l.n);
    const Matrix y = one_hot(terms[i].support->labels, l.ways);
    const Matrix yq = one_hot(terms[i].query->labels, l.ways);
    const auto ridge = detail::dual_ridge(f, y, lambda_theta);
    const Matrix head = f.transpose() * ridge.coef; // p x C
    const Matrix pred = fq * head;                  // n x C
    const Matrix resid = pred - yq;

    TaskLossReport rep;
    rep.loss = resid.squaredNorm() / static_cast<double>(l.n);
    int correct = 0;
    for (Eigen::Index r = 0; r < l.n; ++r) {
      Eigen::Index arg = 0;
      pred.row(r).maxCoeff(&arg);
      if (arg == terms[i].query->labels[static_cast<std::size_t>(r)]) ++correct;
    }
    rep.accuracy = static_cast<double>(correct) / static_cast<double>(l.n);
    if (want_per_example) rep.per_example = resid.rowwise().squaredNorm();
    if (!std::isfinite(rep.loss)) throw NonFiniteValue("task loss is not finite");
    out.loss += terms[i].weight * rep.loss;
    out.reports.push_back(std::move(rep));

    if (!want_grad || terms[i].weight == 0.0) continue;
    // Reverse pass through pred = Fq F^T G^{-1} Y with G = F F^T + lambda I.
    const Matrix d_pred = (2.0 * terms[i].weight / static_cast<double>(l.n)) * resid;
    const Matrix d_head = fq.transpose() * d_pred;        // p x C
    const Matrix d_coef = f * d_head;                      // m x C
    const Matrix d_gram = -ridge.gram.solve(d_coef) * ridge.coef.transpose();
    Matrix d_f = ridge.coef * d_head.transpose();          // m x p
    d_f.noalias() += (d_gram + d_gram.transpose()) * f;
    dz.middleRows(l.query_row, l.n).noalias() += d_pred * head.transpose();
    dz.middleRows(l.support_row, l.m) += d_f;
  }

  if (want_grad) {
    MetaParams g = MetaParams::zeros(p);
    g.w2.noalias() = dz.transpose() * act;
    g.b2 = dz.colwise().sum().transpose();
    Matrix d_pre = dz * theta.w2;
    d_pre.array() *= (pre.array() > 0.0).cast<double>();
    g.w1.noalias() = d_pre.transpose() * x;
    g.b1 = d_pre.colwise().sum().transpose();
    out.grad = g.flat();
    if (!out.grad.allFinite()) throw NonFiniteValue("task loss gradient is not finite");
  }
  return out;
}

/// Mean squared error and accuracy of the ridge head fitted on `support`,
/// evaluated on `query`.
inline TaskLossReport task_loss(const MetaParams& theta, const Dataset& support, const Dataset& query,
                                double lambda_theta = 0.1, int ways = 0, bool per_example = false) {
  const LossTerm term{&support, &query, 1.0, ways};
  auto r = batched_task_loss(theta, std::span<const LossTerm>(&term, 1), lambda_theta, false, per_example);
  return std::move(r.reports.front());
}

struct LossAndGrad {
  TaskLossReport report;
  Vector grad;
};

/// Gradient of task_loss + l2_theta * ||theta||^2. The report carries the
/// unregularized task loss.
inline LossAndGrad task_loss_grad(const MetaParams& theta, const Dataset& support, const Dataset& query,
                                  double lambda_theta = 0.1, double l2_theta = 1e-4, int ways = 0) {
  if (!(l2_theta >= 0.0)) throw ConfigInvalid("l2_theta", "must be >= 0");
  const LossTerm term{&support, &query, 1.0, ways};
  auto r = batched_task_loss(theta, std::span<const LossTerm>(&term, 1), lambda_theta, true);
  LossAndGrad out{std::move(r.reports.front()), std::move(r.grad)};
  if (l2_theta > 0.0) out.grad += (2.0 * l2_theta) * theta.flat();
  return out;
}

} // namespace tasml
