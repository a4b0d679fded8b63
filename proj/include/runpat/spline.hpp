#pragma once

#include <Eigen/Dense>

#include "runpat/common.hpp"

namespace runpat {

// Natural cubic spline (second derivative zero at both ends) over knots
// x = 0..n-1 with values y. Knot evaluation returns the knot value exactly.
template <typename Scalar>
class NaturalCubicSpline {
 public:
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  explicit NaturalCubicSpline(const Vec& y) : y_(y), m_(y.size()) {
    const Eigen::Index n = y.size();
    if (n < 2) fail(Err::TooShort, "spline needs at least 2 samples");
    m_.setZero();
    if (n == 2) return;
    // Thomas algorithm on the tridiagonal system for interior second derivatives;
    // unit knot spacing, natural boundary m_0 = m_{n-1} = 0.
    const Eigen::Index k = n - 2;
    Vec diag = Vec::Constant(k, Scalar(4));
    Vec rhs(k);
    for (Eigen::Index i = 0; i < k; ++i) rhs[i] = Scalar(6) * (y[i + 2] - Scalar(2) * y[i + 1] + y[i]);
    for (Eigen::Index i = 1; i < k; ++i) {
      Scalar w = Scalar(1) / diag[i - 1];
      diag[i] -= w;
      rhs[i] -= w * rhs[i - 1];
    }
    m_[k] = rhs[k - 1] / diag[k - 1];
    for (Eigen::Index i = k - 1; i >= 1; --i) m_[i] = (rhs[i - 1] - m_[i + 1]) / diag[i - 1];
  }

  Scalar operator()(Scalar t) const {
    const Eigen::Index n = y_.size();
    if (t <= Scalar(0)) return y_[0];
    if (t >= Scalar(n - 1)) return y_[n - 1];
    Eigen::Index i = static_cast<Eigen::Index>(t);
    if (i > n - 2) i = n - 2;
    Scalar u = t - Scalar(i);       // in [0,1)
    if (u == Scalar(0)) return y_[i];
    Scalar v = Scalar(1) - u;
    return m_[i] * v * v * v / Scalar(6) + m_[i + 1] * u * u * u / Scalar(6) +
           (y_[i] - m_[i] / Scalar(6)) * v + (y_[i + 1] - m_[i + 1] / Scalar(6)) * u;
  }

 private:
  Vec y_;
  Vec m_;  // second derivatives at knots
};

// Resamples y (uniform grid) onto m uniformly spaced points spanning the same
// interval. Endpoints are reproduced exactly; linear inputs are exact.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> resample_uniform(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& y, Eigen::Index m) {
  const Eigen::Index n = y.size();
  if (m < 2) fail(Err::TooShort, "resample target must have >= 2 points");
  NaturalCubicSpline<Scalar> s(y);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out(m);
  const Scalar span = Scalar(n - 1);
  for (Eigen::Index k = 0; k < m; ++k) out[k] = s(span * Scalar(k) / Scalar(m - 1));
  out[0] = y[0];
  out[m - 1] = y[n - 1];
  return out;
}

}  // namespace runpat
