#pragma once

// Tangent-bundle geometry of the unit sphere: points (v, kappa) with
// |v| = 1 and kappa.v = 0, lifts, connection maps, the Sasaki metric,
// chart maps about a pole u, and finite-difference gradients.

#include <cmath>
#include <stdexcept>
#include <utility>

#include "ccswarm/vec.hpp"

namespace ccswarm {

inline constexpr double kConstraintTol = 1e-12;  // construction-time defect bound
inline constexpr double kLiftRejectTol = 1e-10;  // relative, for lift inputs
inline constexpr double kPoleTol = 1e-10;        // chart excludes |v.u| >= 1 - kPoleTol

struct ChartSingularity : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UnitVector {
  Vec x;
  explicit UnitVector(Vec v) : x(std::move(v)) { x = normalized_or_throw(x, "UnitVector: zero input"); }
  int dim() const { return static_cast<int>(x.size()); }
};

// alpha = (v, kappa); both invariants enforced on construction
struct TangentPair {
  Vec v;
  Vec kappa;
  TangentPair(Vec v_, Vec k_) : v(std::move(v_)), kappa(std::move(k_)) {
    v = normalized_or_throw(v, "TangentPair: zero direction");
    kappa -= kappa.dot(v) * v;
  }
  int dim() const { return static_cast<int>(v.size()); }
};

// xi = (a, tau) attached to some alpha
struct BundleTangent {
  Vec a;
  Vec tau;
};

inline bool attached_to(const BundleTangent& xi, const TangentPair& alpha, double tol = 1e-9) {
  double s = xi.a.norm() + xi.tau.norm() + 1.0;
  return std::abs(xi.a.dot(alpha.v)) <= tol * s &&
         std::abs(xi.tau.dot(alpha.v) + xi.a.dot(alpha.kappa)) <= tol * s;
}

// (theta, kappa_par, w, kappa_T) about a pole u; theta in (0, pi),
// w and kappa_T orthogonal to u, kappa_T orthogonal to w
struct ChartPoint {
  double theta;
  double kappa_par;
  Vec w;
  Vec kappa_T;
};

inline BundleTangent horizontal_lift(const TangentPair& alpha, const Vec& a) {
  if (std::abs(a.dot(alpha.v)) > kLiftRejectTol * a.norm())
    throw std::invalid_argument("horizontal_lift: a not tangent at v");
  return {a, -(alpha.kappa.dot(a)) * alpha.v};
}

inline BundleTangent vertical_lift(const TangentPair& alpha, const Vec& tau) {
  if (std::abs(tau.dot(alpha.v)) > kLiftRejectTol * tau.norm())
    throw std::invalid_argument("vertical_lift: tau not tangent at v");
  return {Vec::Zero(alpha.dim()), tau};
}

inline double sasaki_inner(const TangentPair& alpha, const BundleTangent& xi1,
                           const BundleTangent& xi2) {
  Vec p1 = project_orthogonal(alpha.v, xi1.tau);
  Vec p2 = project_orthogonal(alpha.v, xi2.tau);
  return xi1.a.dot(xi2.a) + p1.dot(p2);
}

// (B^H xi, B^V xi) = (a, P_{v-perp} tau)
inline std::pair<Vec, Vec> connection_maps(const TangentPair& alpha, const BundleTangent& xi) {
  return {xi.a, project_orthogonal(alpha.v, xi.tau)};
}

inline TangentPair chart_to_bundle(const UnitVector& u, const ChartPoint& cp) {
  if (!(cp.theta > 0.0 && cp.theta < kPi))
    throw ChartSingularity("chart_to_bundle: theta outside (0,pi)");
  double c = std::cos(cp.theta), s = std::sin(cp.theta);
  Vec v = c * u.x + s * cp.w;
  Vec e_theta = -s * u.x + c * cp.w;
  Vec kappa = cp.kappa_par * e_theta + s * cp.kappa_T;
  return TangentPair(std::move(v), std::move(kappa));
}

inline ChartPoint bundle_to_chart(const UnitVector& u, const TangentPair& alpha) {
  double c = alpha.v.dot(u.x);
  if (std::abs(c) >= 1.0 - kPoleTol)
    throw ChartSingularity("bundle_to_chart: v too close to a pole");
  double theta = std::acos(c);
  double s = std::sin(theta);
  Vec w = (alpha.v - c * u.x) / s;
  w = normalized_or_throw(w);
  Vec e_theta = (c * alpha.v - u.x) / s;
  double kpar = alpha.kappa.dot(e_theta);
  Vec kT = (alpha.kappa - kpar * e_theta) / s;
  // scrub rounding-level defects against u and w
  kT -= kT.dot(u.x) * u.x;
  kT -= kT.dot(w) * w;
  return {theta, kpar, std::move(w), std::move(kT)};
}

inline Vec chart_e_theta(const UnitVector& u, const ChartPoint& cp) {
  return -std::sin(cp.theta) * u.x + std::cos(cp.theta) * cp.w;
}

// Central differences of a scalar field on the bundle.
//   kappa direction: straight fiber paths (v fixed, kappa + t tau).
//   v direction: unit-speed great-circle paths with kappa parallel-transported,
//     kappa(t) = kappa + (kappa.t_j) [(cos t - 1) t_j - sin t v],
//   which stay on the bundle exactly and have horizontal initial velocity.
// Both components are O(h^2) accurate and tangent at v.
template <class F>
std::pair<Vec, Vec> grad_fd(F&& f, const TangentPair& alpha, double h) {
  if (!(h > 0.0 && h <= 1e-2)) throw std::invalid_argument("grad_fd: h outside (0, 1e-2]");
  const int n = alpha.dim();
  Mat B = onb_perp(alpha.v);
  Vec gv = Vec::Zero(n), gk = Vec::Zero(n);
  for (int j = 0; j < n - 1; ++j) {
    Vec t = B.col(j);
    double kt = alpha.kappa.dot(t);

    TangentPair kp(alpha.v, alpha.kappa + h * t);
    TangentPair km(alpha.v, alpha.kappa - h * t);
    gk += ((f(kp) - f(km)) / (2.0 * h)) * t;

    auto moved = [&](double s) {
      Vec vv = std::cos(s) * alpha.v + std::sin(s) * t;
      Vec kk = alpha.kappa + kt * ((std::cos(s) - 1.0) * t - std::sin(s) * alpha.v);
      return TangentPair(std::move(vv), std::move(kk));
    };
    gv += ((f(moved(h)) - f(moved(-h))) / (2.0 * h)) * t;
  }
  return {gv, gk};
}

}  // namespace ccswarm
