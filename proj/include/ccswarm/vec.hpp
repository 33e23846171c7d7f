#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ccswarm {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr double kPi = std::numbers::pi;

// x - (x.v)v for unit v
inline Vec project_orthogonal(const Vec& v, const Vec& x) {
  return x - x.dot(v) * v;
}

inline Vec normalized_or_throw(const Vec& x, const char* what = "zero vector") {
  double n = x.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw std::invalid_argument(what);
  return x / n;
}

// Columns form an orthonormal basis of v-perp (Householder reflection
// carrying e_n to +/-v; deterministic in v).
inline Mat onb_perp(const Vec& v) {
  const Eigen::Index n = v.size();
  Vec u = v;
  double s = (v[n - 1] >= 0.0) ? 1.0 : -1.0;
  u[n - 1] += s;  // u = v + sign(v_n) e_n
  double uu = u.squaredNorm();
  Mat B(n, n - 1);
  for (Eigen::Index j = 0; j < n - 1; ++j) {
    Vec col = -2.0 * (u[j] / uu) * u;
    col[j] += 1.0;  // H e_j, orthogonal to H e_n = -s v
    B.col(j) = col;
  }
  return B;
}

// surface area of the unit sphere S^m in R^{m+1}
inline double sphere_area(int m) {
  if (m < 0) return 2.0;  // |S^{-1}| convention not used; guard
  return 2.0 * std::pow(kPi, 0.5 * (m + 1)) / std::tgamma(0.5 * (m + 1));
}

}  // namespace ccswarm
