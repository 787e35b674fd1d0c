#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include <Eigen/Dense>

#include "tasml/errors.hpp"

namespace tasml {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline constexpr double kJitterCap = 1e-3;
// First non-zero jitter tried when escalation starts from zero.
inline constexpr double kJitterFloor = 1e-12;

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

inline void require_finite(const Eigen::Ref<const Matrix>& m, const char* what) {
  if (!m.allFinite()) throw NonFiniteValue(std::string(what) + " contains NaN or Inf");
}

/// Lower-triangular factor of A + jitter*I.
struct CholeskyFactor {
  Matrix lower;
  double jitter = 0.0;

  Eigen::Index size() const { return lower.rows(); }

  /// Solves (A + jitter*I) X = B with the stored factor.
  Matrix solve(const Eigen::Ref<const Matrix>& rhs) const {
    if (rhs.rows() != lower.rows())
      throw DimensionMismatch("cholesky solve: rhs has " + std::to_string(rhs.rows()) + " rows, factor is " +
                              std::to_string(lower.rows()));
    Matrix x = rhs;
    lower.triangularView<Eigen::Lower>().solveInPlace(x);
    lower.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
    return x;
  }

  Vector solve_vector(const Vector& rhs) const {
    Matrix b = rhs;
    Matrix x = solve(Eigen::Ref<const Matrix>(b));
    return Eigen::Map<const Vector>(x.data(), x.size());
  }

  Matrix reconstruct() const { return lower * lower.transpose(); }
};

inline void require_square_symmetric(const Eigen::Ref<const Matrix>& a) {
  if (a.rows() != a.cols() || a.rows() == 0)
    throw DimensionMismatch("expected a non-empty square matrix, got " + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()));
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw DimensionMismatch("matrix is not symmetric");
}

/// Factorizes A + jitter*I. Jitter starts at base_jitter and grows x10 on
/// every failed attempt (from kJitterFloor when base_jitter is zero) until
/// kJitterCap; failing at the cap throws NotPositiveDefinite.
inline CholeskyFactor cholesky_factor(const Eigen::Ref<const Matrix>& a, double base_jitter = 0.0) {
  require_square_symmetric(a);
  require_finite(a, "cholesky input");
  if (!(base_jitter >= 0.0)) throw DimensionMismatch("base_jitter must be >= 0");

  double jitter = base_jitter;
  const Eigen::Index n = a.rows();
  for (;;) {
    Matrix shifted = a;
    shifted.diagonal().array() += jitter;
    Eigen::LLT<Matrix, Eigen::Lower> llt(shifted);
    if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().allFinite()) {
      CholeskyFactor f;
      f.lower = llt.matrixL().toDenseMatrix();
      f.jitter = jitter;
      return f;
    }
    if (jitter >= kJitterCap) break;
    jitter = jitter == 0.0 ? kJitterFloor : std::min(jitter * 10.0, kJitterCap);
  }
  throw NotPositiveDefinite("matrix of size " + std::to_string(n) + " is not positive definite with jitter " +
                            std::to_string(kJitterCap));
}

struct CholeskySolution {
  Matrix x;
  CholeskyFactor factor;
};

/// Solves (A + jitter*I) X = B for symmetric A, escalating jitter as needed.
inline CholeskySolution cholesky_solve(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& b,
                                       double base_jitter = 0.0) {
  if (b.rows() != a.rows())
    throw DimensionMismatch("cholesky_solve: A is " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                            " but B has " + std::to_string(b.rows()) + " rows");
  CholeskySolution out;
  out.factor = cholesky_factor(a, base_jitter);
  out.x = out.factor.solve(b);
  return out;
}

/// Central-difference gradient check with step 1e-5. Returns the maximum over
/// coordinates of |analytic - numeric| / max(1, |numeric|).
inline double grad_check(const std::function<double(const Vector&)>& f, const Vector& point,
                         const Vector& analytic_grad, double step = 1e-5) {
  if (point.size() != analytic_grad.size()) throw DimensionMismatch("grad_check: gradient size differs from point");
  Vector probe = point;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + step;
    const double up = f(probe);
    probe[i] = point[i] - step;
    const double down = f(probe);
    probe[i] = point[i];
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NonFiniteValue("grad_check: objective is not finite at coordinate " + std::to_string(i));
    const double numeric = (up - down) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic_grad[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

inline double max_abs(const Eigen::Ref<const Matrix>& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

} // namespace tasml
