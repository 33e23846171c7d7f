#pragma once

// Interacting particle system on the tangent bundle: positions in a periodic
// box, unit velocity directions, curvature vectors, kernel-weighted alignment
// field with cell-list neighbor search, a Stratonovich-Heun stepper, the
// three-dimensional spin formulation, and slab moment extraction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "ccswarm/equilibria.hpp"
#include "ccswarm/geometry.hpp"
#include "ccswarm/rng.hpp"
#include "ccswarm/vec.hpp"

namespace ccswarm {

struct DegenerateAlignment : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Kernel { top_hat, smooth_bump };

// kernel normalized so that int_{R^n} K(|x|) dx = 1; support is |x| <= 1
inline double kernel_value(Kernel k, int n, double r) {
  if (k == Kernel::top_hat) {
    if (r > 1.0) return 0.0;
    return n / sphere_area(n - 1);  // 1 / (unit-ball volume)
  }
  if (r >= 1.0) return 0.0;
  thread_local int cached_n = -1;
  thread_local double cached_c = 0.0;
  if (cached_n != n) {
    double radial = integrate_1d(
        [&](double s) { return std::exp(-1.0 / (1.0 - s * s)) * std::pow(s, n - 1); }, 0.0, 1.0,
        1e-13);
    cached_c = 1.0 / (sphere_area(n - 1) * radial);
    cached_n = n;
  }
  return cached_c * std::exp(-1.0 / (1.0 - r * r));
}

struct ParticleEnsemble {
  ModelParams params;
  double box;        // periodic box side, positions live in [0, box)^n
  double R;          // sensing radius
  Kernel kernel = Kernel::top_hat;
  bool normalized = false;
  double eps = 1.0;  // scale separation bookkeeping for macroscopic runs
  Mat X, V, K;       // n x N, one column per particle
  std::vector<std::mt19937_64> rng;           // one stream per particle
  std::optional<Vec> external_J;              // fixed alignment field override

  ParticleEnsemble(ModelParams p, double box_, double R_, std::size_t N, std::uint64_t seed)
      : params(p), box(box_), R(R_) {
    if (!(box > 0.0) || !(R > 0.0)) throw std::invalid_argument("ParticleEnsemble: box, R > 0");
    const int n = p.n;
    X = Mat::Zero(n, static_cast<Eigen::Index>(N));
    V = Mat::Zero(n, static_cast<Eigen::Index>(N));
    K = Mat::Zero(n, static_cast<Eigen::Index>(N));
    for (Eigen::Index i = 0; i < V.cols(); ++i) V(0, i) = 1.0;
    rng.reserve(N);
    for (std::size_t i = 0; i < N; ++i) rng.push_back(make_engine(seed, i));
  }

  std::size_t size() const { return static_cast<std::size_t>(X.cols()); }

  void set_particle(std::size_t i, const Vec& x, const TangentPair& a) {
    Eigen::Index c = static_cast<Eigen::Index>(i);
    for (int d = 0; d < params.n; ++d) X(d, c) = wrap(x[d]);
    V.col(c) = a.v;
    K.col(c) = a.kappa;
  }

  TangentPair alpha(std::size_t i) const {
    Eigen::Index c = static_cast<Eigen::Index>(i);
    return TangentPair(V.col(c), K.col(c));
  }

  double wrap(double x) const {
    double y = std::fmod(x, box);
    return y < 0.0 ? y + box : y;
  }
};

// cell list over the periodic box; iteration order is cell-major then
// ascending particle index, so sums are reproducible
class CellList {
 public:
  CellList(const Mat& X, double box, double R) : X_(X), box_(box) {
    n_ = static_cast<int>(X.rows());
    ncell_ = std::max(1, static_cast<int>(std::floor(box / R)));
    brute_ = ncell_ < 3;
    if (!brute_) {
      csize_ = box / ncell_;
      int total = 1;
      for (int d = 0; d < n_; ++d) total *= ncell_;
      heads_.assign(total + 1, 0);
      std::vector<int> cell_of(X.cols());
      for (Eigen::Index i = 0; i < X.cols(); ++i) {
        cell_of[i] = flat_cell(X.col(i));
        ++heads_[cell_of[i] + 1];
      }
      for (std::size_t c = 1; c < heads_.size(); ++c) heads_[c] += heads_[c - 1];
      order_.resize(X.cols());
      std::vector<int> cursor(heads_.begin(), heads_.end() - 1);
      for (Eigen::Index i = 0; i < X.cols(); ++i) order_[cursor[cell_of[i]]++] = static_cast<int>(i);
    }
  }

  // visit(j, dx) for every particle j with minimum-image offset |dx| <= R
  // from x (self included when within range)
  template <class F>
  void for_neighbors(const Vec& x, double R, F&& visit) const {
    Vec dx(n_);
    if (brute_) {
      for (Eigen::Index j = 0; j < X_.cols(); ++j) {
        min_image(x, X_.col(j), dx);
        if (dx.norm() <= R) visit(static_cast<int>(j), dx);
      }
      return;
    }
    std::vector<int> base(n_);
    for (int d = 0; d < n_; ++d)
      base[d] = static_cast<int>(std::floor(x[d] / csize_)) % ncell_;
    std::vector<int> offs(n_, -1);
    while (true) {
      int flat = 0;
      for (int d = 0; d < n_; ++d) {
        int c = ((base[d] + offs[d]) % ncell_ + ncell_) % ncell_;
        flat = flat * ncell_ + c;
      }
      for (int idx = heads_[flat]; idx < heads_[flat + 1]; ++idx) {
        int j = order_[idx];
        min_image(x, X_.col(j), dx);
        if (dx.norm() <= R) visit(j, dx);
      }
      int d = n_ - 1;
      while (d >= 0 && offs[d] == 1) offs[d--] = -1;
      if (d < 0) break;
      ++offs[d];
    }
  }

 private:
  int flat_cell(const Eigen::Ref<const Vec>& x) const {
    int flat = 0;
    for (int d = 0; d < n_; ++d) {
      int c = static_cast<int>(std::floor(x[d] / csize_));
      c = std::min(std::max(c, 0), ncell_ - 1);
      flat = flat * ncell_ + c;
    }
    return flat;
  }

  void min_image(const Vec& a, const Eigen::Ref<const Vec>& b, Vec& dx) const {
    for (int d = 0; d < n_; ++d) {
      double t = a[d] - b[d];
      dx[d] = t - box_ * std::round(t / box_);
    }
  }

  const Mat& X_;
  double box_, csize_ = 0.0;
  int n_ = 0, ncell_ = 1;
  bool brute_ = true;
  std::vector<int> heads_;
  std::vector<int> order_;
};

namespace detail {

inline Vec alignment_sum(const ParticleEnsemble& ens, const CellList& cl, const Mat& V,
                         const Vec& x) {
  Vec sum = Vec::Zero(ens.params.n);
  cl.for_neighbors(x, ens.R, [&](int j, const Vec& dx) {
    double w = kernel_value(ens.kernel, ens.params.n, dx.norm() / ens.R);
    if (w != 0.0) sum += w * V.col(j);
  });
  return sum;
}

inline Vec finalize_J(const ParticleEnsemble& ens, Vec sum) {
  if (ens.normalized) {
    double nrm = sum.norm();
    if (nrm <= 1e-12)
      throw DegenerateAlignment("mean_direction: normalized alignment field vanished");
    return sum / nrm;
  }
  return sum / std::pow(ens.R, ens.params.n);
}

// alignment field at every particle of (X, V); one cell list per call
inline Mat alignment_field(const ParticleEnsemble& ens, const Mat& X, const Mat& V) {
  Mat J(ens.params.n, X.cols());
  if (ens.external_J) {
    J.colwise() = *ens.external_J;
    return J;
  }
  CellList cl(X, ens.box, ens.R);
  for (Eigen::Index i = 0; i < X.cols(); ++i)
    J.col(i) = finalize_J(ens, alignment_sum(ens, cl, V, X.col(i)));
  return J;
}

}  // namespace detail

inline Vec mean_direction(const ParticleEnsemble& ens, const Vec& x) {
  if (ens.external_J) return *ens.external_J;
  CellList cl(ens.X, ens.box, ens.R);
  return detail::finalize_J(ens, detail::alignment_sum(ens, cl, ens.V, x));
}

// One midpoint Stratonovich-Heun step of the curvature-control system
//   dX = V dt,   dV = K dt,
//   dK = (-|K|^2 V - nu (K - P_{V-perp} J)) dt + sqrt(2D) P_{V-perp} o dW,
// followed by constraint projection (renormalize V, project K).
inline void step_pcc(ParticleEnsemble& ens, double dt, const Mat* dW_override = nullptr) {
  if (!(dt > 0.0)) throw std::invalid_argument("step_pcc: dt must be > 0");
  const int n = ens.params.n;
  const Eigen::Index N = ens.X.cols();
  const double nu = ens.params.nu;
  const double amp = std::sqrt(2.0 * ens.params.D);

  Mat dW(n, N);
  if (dW_override) {
    dW = *dW_override;  // externally coupled increments (refinement studies)
  } else if (ens.params.D > 0.0) {
    Vec g(n);
    for (Eigen::Index i = 0; i < N; ++i) {
      fill_normal(ens.rng[static_cast<std::size_t>(i)], g);
      dW.col(i) = std::sqrt(dt) * g;
    }
  } else {
    dW.setZero();
  }

  Mat J = detail::alignment_field(ens, ens.X, ens.V);
  Mat Xm(n, N), Vm(n, N), Km(n, N);
  for (Eigen::Index i = 0; i < N; ++i) {
    Vec v = ens.V.col(i), k = ens.K.col(i), j = J.col(i);
    Vec fK = -k.squaredNorm() * v - nu * (k - project_orthogonal(v, j));
    Vm.col(i) = v + 0.5 * dt * k;
    Km.col(i) = k + 0.5 * dt * fK + 0.5 * amp * project_orthogonal(v, dW.col(i));
    Xm.col(i) = ens.X.col(i) + 0.5 * dt * v;
  }
  for (Eigen::Index i = 0; i < N; ++i)
    for (int d = 0; d < n; ++d) Xm(d, i) = ens.wrap(Xm(d, i));

  Mat Jm = detail::alignment_field(ens, Xm, Vm);
  for (Eigen::Index i = 0; i < N; ++i) {
    Vec v = Vm.col(i), k = Km.col(i), j = Jm.col(i);
    Vec fK = -k.squaredNorm() * v - nu * (k - project_orthogonal(v, j));
    Vec vn = ens.V.col(i) + dt * k;
    Vec kn = ens.K.col(i) + dt * fK + amp * project_orthogonal(v, dW.col(i));
    vn /= vn.norm();
    kn -= kn.dot(vn) * vn;
    ens.V.col(i) = vn;
    ens.K.col(i) = kn;
    for (int d = 0; d < n; ++d) ens.X(d, i) = ens.wrap(ens.X(d, i) + dt * Vm(d, i));
  }
}

inline Vec cross3(const Vec& a, const Vec& b) {
  Vec c(3);
  c[0] = a[1] * b[2] - a[2] * b[1];
  c[1] = a[2] * b[0] - a[0] * b[2];
  c[2] = a[0] * b[1] - a[1] * b[0];
  return c;
}

inline Vec spin_from_curvature(const Vec& v, const Vec& k, double delta) {
  return -cross3(k, v) / delta;
}

inline Vec curvature_from_spin(const Vec& v, const Vec& s, double delta) {
  return delta * cross3(s, v);
}

// Native integrator for the three-dimensional spin form
//   dX = V dt,   dV = delta S x V dt,
//   dS = V x ((nu/delta) J - nu S x V) dt + (sqrt(2D)/delta) V x o dW,
// discretized with the same midpoint Heun rule and the same per-particle
// noise stream as step_pcc, so runs with equal seeds share increments.
inline void step_spin_n3(ParticleEnsemble& ens, double dt, double delta) {
  if (ens.params.n != 3) throw std::invalid_argument("step_spin_n3: requires n = 3");
  if (!(delta > 0.0)) throw std::invalid_argument("step_spin_n3: delta must be > 0");
  if (!(dt > 0.0)) throw std::invalid_argument("step_spin_n3: dt must be > 0");
  const Eigen::Index N = ens.X.cols();
  const double nu = ens.params.nu;
  const double amp = std::sqrt(2.0 * ens.params.D) / delta;

  Mat dW(3, N);
  if (ens.params.D > 0.0) {
    Vec g(3);
    for (Eigen::Index i = 0; i < N; ++i) {
      fill_normal(ens.rng[static_cast<std::size_t>(i)], g);
      dW.col(i) = std::sqrt(dt) * g;
    }
  } else {
    dW.setZero();
  }

  Mat S(3, N);
  for (Eigen::Index i = 0; i < N; ++i)
    S.col(i) = spin_from_curvature(ens.V.col(i), ens.K.col(i), delta);

  Mat J = detail::alignment_field(ens, ens.X, ens.V);
  Mat Xm(3, N), Vm(3, N), Sm(3, N);
  for (Eigen::Index i = 0; i < N; ++i) {
    Vec v = ens.V.col(i), s = S.col(i), j = J.col(i);
    Vec fV = delta * cross3(s, v);
    Vec fS = cross3(v, (nu / delta) * j - nu * cross3(s, v));
    Vm.col(i) = v + 0.5 * dt * fV;
    Sm.col(i) = s + 0.5 * dt * fS + 0.5 * amp * cross3(v, dW.col(i));
    Xm.col(i) = ens.X.col(i) + 0.5 * dt * v;
  }
  for (Eigen::Index i = 0; i < N; ++i)
    for (int d = 0; d < 3; ++d) Xm(d, i) = ens.wrap(Xm(d, i));

  Mat Jm = detail::alignment_field(ens, Xm, Vm);
  for (Eigen::Index i = 0; i < N; ++i) {
    Vec v = Vm.col(i), s = Sm.col(i), j = Jm.col(i);
    Vec fV = delta * cross3(s, v);
    Vec fS = cross3(v, (nu / delta) * j - nu * cross3(s, v));
    Vec vn = ens.V.col(i) + dt * fV;
    Vec sn = S.col(i) + dt * fS + amp * cross3(v, dW.col(i));
    vn /= vn.norm();
    sn -= sn.dot(vn) * vn;
    ens.V.col(i) = vn;
    ens.K.col(i) = curvature_from_spin(vn, sn, delta);
    for (int d = 0; d < 3; ++d) ens.X(d, i) = ens.wrap(ens.X(d, i) + dt * Vm(d, i));
  }
}

// Run step_pcc to time T, invoking sink(ens, step, t) at step 0, every
// `output_every` steps, and at the end.
template <class Sink>
void simulate(ParticleEnsemble& ens, double dt, double T, int output_every, Sink&& sink) {
  if (!(dt > 0.0) || !(T >= 0.0)) throw std::invalid_argument("simulate: need dt > 0, T >= 0");
  if (output_every < 1) throw std::invalid_argument("simulate: output_every must be >= 1");
  long steps = std::lround(T / dt);
  sink(ens, 0L, 0.0);
  for (long s = 1; s <= steps; ++s) {
    step_pcc(ens, dt);
    if (s % output_every == 0 || s == steps) sink(ens, s, s * dt);
  }
}

struct MomentField {
  int bins = 0;
  double bin_width = 0.0;
  std::vector<double> rho;        // count density per slab
  std::vector<double> flux_norm;  // |velocity flux density| per slab
  Mat u;                          // mean direction per slab (columns)
  std::vector<std::uint8_t> occupied;
};

// Slab-binned moments along the first axis: rho = count / slab volume,
// flux = sum V / slab volume, u = flux / |flux| where occupied.
inline MomentField extract_moments(const ParticleEnsemble& ens, int bins) {
  if (bins < 1) throw std::invalid_argument("extract_moments: bins must be >= 1");
  const int n = ens.params.n;
  MomentField mf;
  mf.bins = bins;
  mf.bin_width = ens.box / bins;
  mf.rho.assign(bins, 0.0);
  mf.flux_norm.assign(bins, 0.0);
  mf.u = Mat::Zero(n, bins);
  mf.occupied.assign(bins, 0);
  double volume = mf.bin_width * std::pow(ens.box, n - 1);

  Mat flux = Mat::Zero(n, bins);
  for (Eigen::Index i = 0; i < ens.X.cols(); ++i) {
    int b = std::min(bins - 1, static_cast<int>(ens.X(0, i) / mf.bin_width));
    mf.rho[b] += 1.0;
    flux.col(b) += ens.V.col(i);
    mf.occupied[b] = 1;
  }
  bool any = false;
  for (int b = 0; b < bins; ++b) {
    any = any || mf.occupied[b];
    mf.rho[b] /= volume;
    flux.col(b) /= volume;
    mf.flux_norm[b] = flux.col(b).norm();
    if (mf.occupied[b] && mf.flux_norm[b] > 0.0) mf.u.col(b) = flux.col(b) / mf.flux_norm[b];
  }
  if (!any) throw std::invalid_argument("extract_moments: no particles in any bin");
  return mf;
}

}  // namespace ccswarm
