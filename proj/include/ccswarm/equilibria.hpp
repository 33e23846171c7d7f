#pragma once

// Anisotropic equilibria of the curvature-control kinetic model: the
// normalization constant, the alignment order parameter c1, density
// evaluation, averages against the equilibrium measure, exact sampling,
// and a pointwise collision-operator evaluator.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ccswarm/geometry.hpp"
#include "ccswarm/quadrature.hpp"
#include "ccswarm/rng.hpp"
#include "ccswarm/vec.hpp"

namespace ccswarm {

struct ModelParams {
  int n;      // ambient dimension, >= 3
  double nu;  // relaxation rate, > 0
  double D;   // curvature noise strength, >= 0 (0 = noiseless dynamics)

  ModelParams(int n_, double nu_, double D_) : n(n_), nu(nu_), D(D_) {
    if (n < 3) throw std::invalid_argument("ModelParams: n must be >= 3");
    if (!(nu > 0.0) || !std::isfinite(nu)) throw std::invalid_argument("ModelParams: nu must be > 0");
    if (!(D >= 0.0) || !std::isfinite(D)) throw std::invalid_argument("ModelParams: D must be >= 0");
  }

  void require_noise() const {
    if (!(D > 0.0)) throw std::invalid_argument("equilibrium analysis requires D > 0");
  }

  double k() const { return nu * nu / D; }          // concentration
  double sigma_kappa() const { return std::sqrt(D / nu); }  // per-coordinate curvature spread
};

// Macroscopic coefficients of the hydrodynamic limit.
struct Coefficients {
  double c1 = 0.0;  // mass transport speed
  double c2 = 0.0;  // self-convection speed
  double c3 = 0.0;  // pressure coefficient, D/nu^2
};

inline double hamiltonian(const TangentPair& alpha, const Vec& u, const ModelParams& p) {
  return -p.nu * alpha.v.dot(u) + 0.5 * alpha.kappa.squaredNorm();
}

// log of int_0^pi exp(k cos t) sin^(n-2) t dt, overflow-safe for any k
inline double log_theta_integral(int n, double k) {
  double scaled = integrate_1d(
      [&](double t) { return std::exp(k * (std::cos(t) - 1.0)) * std::pow(std::sin(t), n - 2); },
      0.0, kPi, 1e-13);
  return k + std::log(scaled);
}

inline double log_normalization_Z(const ModelParams& p) {
  p.require_noise();
  // memoize the last parameter set; density evaluation sits in hot loops
  thread_local int cn = -1;
  thread_local double cnu = 0.0, cD = 0.0, cval = 0.0;
  if (p.n == cn && p.nu == cnu && p.D == cD) return cval;
  double val = 0.5 * (p.n - 1) * std::log(2.0 * kPi * p.D / p.nu) +
               std::log(sphere_area(p.n - 2)) + log_theta_integral(p.n, p.k());
  cn = p.n;
  cnu = p.nu;
  cD = p.D;
  cval = val;
  return val;
}

inline double normalization_Z(const ModelParams& p) { return std::exp(log_normalization_Z(p)); }

inline double log_von_mises_density(const TangentPair& alpha, const Vec& u, const ModelParams& p) {
  return -(p.nu / p.D) * hamiltonian(alpha, u, p) - log_normalization_Z(p);
}

inline double von_mises_density(const TangentPair& alpha, const Vec& u, const ModelParams& p) {
  return std::exp(log_von_mises_density(alpha, u, p));
}

// Mean direction multiplier: int cos(theta) dM = c1, in (0,1).
inline double order_parameter_c1(const ModelParams& p) {
  p.require_noise();
  double k = p.k();
  auto base = [&](double t) {
    return std::exp(k * (std::cos(t) - 1.0)) * std::pow(std::sin(t), p.n - 2);
  };
  double den = integrate_1d(base, 0.0, kPi, 1e-13);
  double num = integrate_1d([&](double t) { return std::cos(t) * base(t); }, 0.0, kPi, 1e-13);
  return num / den;
}

// Average of a rotation-invariant observable g(theta, kappa_par, kappa_perp)
// against the equilibrium measure. Quadrature runs in (theta, kappa_par, m)
// with m = sin(theta) * kappa_perp, where the weight is a plain Gaussian in
// (kappa_par, m) and the angular factor reduces to sin^(n-2):
//   int g dM = S / I_theta * int g(theta, kp, m/sin) e^(k cos) sin^(n-2) N(kp) N(m) m^(n-3)
// with N a centered Gaussian of variance D/nu and S the m^(n-3) moment
// normalizer. Exact up to quadrature error; g must stay bounded when its
// third argument is multiplied by sin(theta).
template <class G>
double integrate_on_M(G&& g, const ModelParams& p) {
  p.require_noise();
  const double k = p.k();
  const double sig = p.sigma_kappa();
  const int n = p.n;

  const int Nt = std::max(128, 64 + static_cast<int>(24.0 * std::sqrt(std::max(k, 1.0))));
  const int Np = 72;
  Quad1D qt = gauss_legendre_on(Nt, 0.0, kPi);
  Quad1D qp = gauss_legendre_on(Np, -8.0 * sig, 8.0 * sig);
  Quad1D qm = gauss_legendre_on(Np, 0.0, 8.0 * sig);

  const double inv_two_var = 1.0 / (2.0 * sig * sig);
  double num = 0.0, den = 0.0;
  for (int it = 0; it < Nt; ++it) {
    double th = qt.x[it], st = std::sin(th);
    double wt = qt.w[it] * std::exp(k * (std::cos(th) - 1.0)) * std::pow(st, n - 2);
    if (wt == 0.0) continue;
    for (int ip = 0; ip < Np; ++ip) {
      double kp = qp.x[ip];
      double wp = qp.w[ip] * std::exp(-kp * kp * inv_two_var);
      for (int im = 0; im < Np; ++im) {
        double m = qm.x[im];
        double wm = qm.w[im] * std::exp(-m * m * inv_two_var) * std::pow(m, n - 3);
        double wgt = wt * wp * wm;
        den += wgt;
        num += wgt * g(th, kp, m / st);
      }
    }
  }
  return num / den;
}

struct McEstimate {
  double mean;
  double stderr_;
};

// Monte Carlo average of a general observable f(alpha) over the equilibrium;
// the fallback when f is not rotation-invariant about u.
template <class F>
McEstimate integrate_on_M_mc(F&& f, const Vec& u, const ModelParams& p, std::size_t count,
                             std::uint64_t seed);

// Draw `count` exact samples of the equilibrium about mean direction u.
// cos(theta) uses a 4096-point monotone-spline inverse CDF; the curvature is
// the exact Gaussian on the tangent plane at the drawn v.
inline std::vector<TangentPair> sample_equilibrium(const Vec& u_in, const ModelParams& p,
                                                   std::size_t count, std::uint64_t seed) {
  p.require_noise();
  const Vec u = normalized_or_throw(u_in, "sample_equilibrium: zero mean direction");
  const int n = p.n;
  if (u.size() != n) throw std::invalid_argument("sample_equilibrium: u has wrong dimension");
  const double k = p.k();

  // CDF table for t = cos(theta), density ~ e^{kt} (1-t^2)^{(n-3)/2}.
  // For large k nearly all mass sits in [1 - 50/k, 1]; restrict the table there.
  const int kTable = 4096;
  double t_lo = (k > 25.0) ? std::max(-1.0, 1.0 - 50.0 / k) : -1.0;
  std::vector<double> ts(kTable), cdf(kTable, 0.0);
  for (int i = 0; i < kTable; ++i) ts[i] = t_lo + (1.0 - t_lo) * i / (kTable - 1);
  auto pdf = [&](double t) {
    double q = std::max(0.0, 1.0 - t * t);
    return std::exp(k * (t - 1.0)) * std::pow(q, 0.5 * (n - 3));
  };
  for (int i = 1; i < kTable; ++i)
    cdf[i] = cdf[i - 1] + integrate_1d(pdf, ts[i - 1], ts[i], 1e-10, 10);
  for (int i = 0; i < kTable; ++i) cdf[i] /= cdf[kTable - 1];
  // enforce strict monotonicity for the inverse query
  for (int i = 1; i < kTable; ++i)
    if (cdf[i] <= cdf[i - 1]) cdf[i] = cdf[i - 1] + 1e-300;
  MonotoneCubic inv_input(ts, cdf);

  std::mt19937_64 eng = make_engine(seed, 0xE9u);
  const double sig = p.sigma_kappa();
  std::vector<TangentPair> out;
  out.reserve(count);
  Vec g(n), g2(n);
  for (std::size_t s = 0; s < count; ++s) {
    double t = inv_input.inverse(draw_uniform(eng));
    t = std::min(1.0 - 1e-15, std::max(-1.0 + 1e-15, t));
    // uniform direction in the hyperplane orthogonal to u
    Vec w;
    do {
      fill_normal(eng, g);
      w = project_orthogonal(u, g);
    } while (w.norm() < 1e-8);
    w /= w.norm();
    double st = std::sqrt(1.0 - t * t);
    Vec v = t * u + st * w;
    v /= v.norm();
    fill_normal(eng, g2);
    Vec kappa = sig * project_orthogonal(v, g2);
    out.emplace_back(std::move(v), std::move(kappa));
  }
  return out;
}

template <class F>
McEstimate integrate_on_M_mc(F&& f, const Vec& u, const ModelParams& p, std::size_t count,
                             std::uint64_t seed) {
  auto samples = sample_equilibrium(u, p, count, seed);
  double sum = 0.0, sum2 = 0.0;
  for (const auto& a : samples) {
    double val = f(a);
    sum += val;
    sum2 += val * val;
  }
  double mean = sum / static_cast<double>(count);
  double var = std::max(0.0, sum2 / static_cast<double>(count) - mean * mean);
  return {mean, std::sqrt(var / static_cast<double>(count))};
}

// Pointwise collision operator
//   Q_u(f) = -<grad_v f, kappa> - nu <grad_kappa f, P_{v-perp} u>
//            + nu ((n-1) f + <kappa, grad_kappa f>) + D Lap_kappa f,
// with every derivative taken by second-order finite differences of step h
// (the fiber is flat, so the Laplacian is the plain second difference along
// an orthonormal frame of the tangent plane).
template <class F>
double collision_apply(F&& f, const Vec& u, const ModelParams& p, const TangentPair& alpha,
                       double h) {
  const int n = alpha.dim();
  auto [gv, gk] = grad_fd(f, alpha, h);
  double f0 = f(alpha);

  double lap = 0.0;
  Mat B = onb_perp(alpha.v);
  for (int j = 0; j < n - 1; ++j) {
    Vec t = B.col(j);
    TangentPair ap(alpha.v, alpha.kappa + h * t);
    TangentPair am(alpha.v, alpha.kappa - h * t);
    lap += (f(ap) - 2.0 * f0 + f(am)) / (h * h);
  }

  double bracket = gv.dot(alpha.kappa) + p.nu * gk.dot(project_orthogonal(alpha.v, u));
  double divergence = p.nu * ((n - 1) * f0 + alpha.kappa.dot(gk));
  return -bracket + divergence + p.D * lap;
}

}  // namespace ccswarm
