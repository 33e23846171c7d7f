#pragma once

// One-dimensional periodic finite-volume solver for the self-organized
// hydrodynamic system closed by the macroscopic coefficients:
//   d_t rho + d_x (c1 rho u_x)                          = 0,
//   d_t u   + c2 u_x d_x u + (c3 / rho) P_{u-perp} e_x d_x rho = 0,  |u| = 1,
// with rho a cell-averaged density and u a full unit direction in R^n carried
// on each cell (the direction equation is genuinely n-dimensional through the
// projection even though space is 1D).  Density uses a conservative
// first-order upwind flux, so total mass telescopes exactly; the direction
// update upwinds its self-transport term, central-differences the pressure
// term, and renormalizes afterwards (the discrete constraint projection).
// Also provides the linear analysis helpers used by the validation pipeline:
// a finite-difference linearization of the step map around a uniform state
// and a phase-speed measurement via a two-mode exponential fit.

#include <array>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccswarm/equilibria.hpp"
#include "ccswarm/vec.hpp"

namespace ccswarm {

struct CflViolation : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PositivityLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SohState {
  double length = 1.0;  // periodic domain [0, length)
  Vec rho;              // cell-averaged density per cell, size Nx
  Mat u;                // n x Nx, one unit direction per cell
  double t = 0.0;

  SohState(int n, int Nx, double length_) : length(length_) {
    if (n < 2) throw std::invalid_argument("SohState: direction dimension must be >= 2");
    if (Nx < 3) throw std::invalid_argument("SohState: need at least 3 cells");
    if (!(length > 0.0) || !std::isfinite(length))
      throw std::invalid_argument("SohState: length must be > 0");
    rho = Vec::Ones(Nx);
    u = Mat::Zero(n, Nx);
    u.row(0).setOnes();
  }

  int n() const { return static_cast<int>(u.rows()); }
  int cells() const { return static_cast<int>(rho.size()); }
  double dx() const { return length / cells(); }
  double x_center(int i) const { return (i + 0.5) * dx(); }
  double mass() const { return rho.sum() * dx(); }
};

// Advective CFL number of a candidate step: the fastest signal is bounded by
// the mass-transport speed c1 (|u_x| <= 1), the self-transport speed |c2|,
// and the pressure-wave scale sqrt(c3).
inline double cfl_number(const SohState& st, const Coefficients& c, double dt) {
  double speed = std::max({c.c1, std::abs(c.c2), std::sqrt(std::max(c.c3, 0.0))});
  return dt * speed / st.dx();
}

// One explicit split step: (i) conservative upwind continuity update of rho
// with face flux c1 rho u_x; (ii) direction update from the freshly advanced
// density, followed by renormalization.  Rejects steps whose CFL number
// exceeds 0.45 and aborts if the density reaches the 1e-12 positivity floor.
inline void step_soh(SohState& st, const Coefficients& c, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("step_soh: dt must be > 0");
  if (!(c.c1 > 0.0) || !(c.c3 >= 0.0) || !std::isfinite(c.c2))
    throw std::invalid_argument("step_soh: need c1 > 0, c3 >= 0, finite c2");
  const double cfl = cfl_number(st, c, dt);
  if (!(cfl <= 0.45))
    throw CflViolation("step_soh: CFL number " + std::to_string(cfl) + " exceeds 0.45");
  if (!(st.rho.minCoeff() >= 1e-12))
    throw PositivityLoss("step_soh: density at or below the 1e-12 positivity floor");

  const int N = st.cells();
  const int n = st.n();
  const double dx = st.dx();

  // (i) upwind mass flux through face i+1/2, direction from the face velocity
  Vec flux(N);
  for (int i = 0; i < N; ++i) {
    int ip = i + 1 == N ? 0 : i + 1;
    double a = 0.5 * c.c1 * (st.u(0, i) + st.u(0, ip));
    flux[i] = a >= 0.0 ? a * st.rho[i] : a * st.rho[ip];
  }
  Vec rho_new(N);
  for (int i = 0; i < N; ++i) {
    int im = i == 0 ? N - 1 : i - 1;
    rho_new[i] = st.rho[i] - dt / dx * (flux[i] - flux[im]);
  }
  if (!(rho_new.minCoeff() >= 1e-12))
    throw PositivityLoss("step_soh: density at or below the 1e-12 positivity floor");

  // (ii) direction update: self-transport upwinded on the sign of c2 u_x,
  // pressure term central, both evaluated with the advanced density
  Mat u_new(n, N);
  for (int i = 0; i < N; ++i) {
    int ip = i + 1 == N ? 0 : i + 1;
    int im = i == 0 ? N - 1 : i - 1;
    double s = c.c2 * st.u(0, i);
    Vec dudx = s >= 0.0 ? Vec((st.u.col(i) - st.u.col(im)) / dx)
                        : Vec((st.u.col(ip) - st.u.col(i)) / dx);
    double drho = (rho_new[ip] - rho_new[im]) / (2.0 * dx);
    Vec pressure = Vec::Zero(n);
    pressure[0] = drho;
    pressure -= (st.u(0, i) * drho) * st.u.col(i);  // project out the u component
    Vec v = st.u.col(i) - dt * (s * dudx + (c.c3 / rho_new[i]) * pressure);
    u_new.col(i) = normalized_or_throw(v, "step_soh: direction update annihilated u");
  }

  st.rho = rho_new;
  st.u = u_new;
  st.t += dt;
}

struct SohHistory {
  std::vector<double> times;
  std::vector<Vec> rho;
  std::vector<Mat> u;

  std::size_t frames() const { return times.size(); }
};

// Advance to time T with fixed dt, recording the initial state, every
// `output_every`-th step, and the final step.  Step failures are rethrown
// with the simulation time at which they occurred.
inline SohHistory run_soh(SohState& st, const Coefficients& c, double T, double dt,
                          int output_every = 1) {
  if (!(dt > 0.0) || !(T >= 0.0)) throw std::invalid_argument("run_soh: need dt > 0, T >= 0");
  if (output_every < 1) throw std::invalid_argument("run_soh: output_every must be >= 1");
  SohHistory hist;
  auto record = [&]() {
    hist.times.push_back(st.t);
    hist.rho.push_back(st.rho);
    hist.u.push_back(st.u);
  };
  record();
  long steps = std::lround(T / dt);
  for (long s = 1; s <= steps; ++s) {
    try {
      step_soh(st, c, dt);
    } catch (const CflViolation& e) {
      throw CflViolation("t=" + std::to_string(st.t) + ": " + e.what());
    } catch (const PositivityLoss& e) {
      throw PositivityLoss("t=" + std::to_string(st.t) + ": " + e.what());
    }
    if (s % output_every == 0 || s == steps) record();
  }
  return hist;
}

// Least-squares fit of a uniformly sampled complex sequence by two complex
// exponentials: find the order-2 linear recurrence the data best satisfies,
// take its characteristic roots z, and return log(z)/dt_sample.  Valid while
// both mode frequencies stay below the sampling Nyquist rate.
inline std::array<std::complex<double>, 2> fit_two_mode_rates(
    const std::vector<std::complex<double>>& s, double dt_sample) {
  const int M = static_cast<int>(s.size());
  if (M < 6) throw std::invalid_argument("fit_two_mode_rates: need at least 6 samples");
  if (!(dt_sample > 0.0)) throw std::invalid_argument("fit_two_mode_rates: dt_sample > 0");
  Eigen::MatrixXcd A(M - 2, 2);
  Eigen::VectorXcd rhs(M - 2);
  for (int m = 0; m + 2 < M; ++m) {
    A(m, 0) = s[m + 1];
    A(m, 1) = s[m];
    rhs(m) = s[m + 2];
  }
  Eigen::Vector2cd b = A.colPivHouseholderQr().solve(rhs);
  std::complex<double> disc = std::sqrt(b(0) * b(0) + 4.0 * b(1));
  std::complex<double> z1 = 0.5 * (b(0) + disc);
  std::complex<double> z2 = 0.5 * (b(0) - disc);
  return {std::log(z1) / dt_sample, std::log(z2) / dt_sample};
}

namespace soh_detail {

// In-plane tangent direction at u0 that the pressure term excites: the
// normalized projection of e_x orthogonal to u0.  Requires an oblique
// background (u0 not parallel to the x axis), otherwise the density and
// direction perturbations decouple and there is nothing to measure.
inline Vec coupling_direction(const Vec& u0) {
  Vec ephi = -u0[0] * u0;
  ephi[0] += 1.0;
  double nrm = ephi.norm();
  if (!(nrm > 1e-8))
    throw std::invalid_argument("wave analysis: background direction must be oblique to e_x");
  return ephi / nrm;
}

}  // namespace soh_detail

// Phase speeds of the two coupled density/direction modes of the discrete
// scheme at spatial wavenumber index `mode`, from a finite-difference
// linearization of the step map around the uniform state (rho0, u0).  The
// scheme is translation invariant there, so acting on single-Fourier-mode
// perturbations of the density and of the in-plane direction component
// yields the exact 2x2 mode matrix; speeds are its eigenfrequencies divided
// by the wavenumber, returned sorted ascending.
inline std::array<double, 2> linearized_wave_speeds(int Nx, double length, double rho0,
                                                    const Vec& u0_in, const Coefficients& c,
                                                    int mode = 1) {
  if (!(rho0 > 0.0)) throw std::invalid_argument("linearized_wave_speeds: rho0 must be > 0");
  if (mode < 1 || 2 * mode >= Nx)
    throw std::invalid_argument("linearized_wave_speeds: mode must resolve on the grid");
  const Vec u0 = normalized_or_throw(u0_in, "linearized_wave_speeds: zero background direction");
  const int n = static_cast<int>(u0.size());
  const Vec ephi = soh_detail::coupling_direction(u0);
  const double k = 2.0 * kPi * mode / length;
  const double eps = 1e-5;  // perturbation amplitude
  const double tau = 1e-6;  // step length for the finite-difference generator

  // action of the linearized generator on a (rho, in-plane angle) field pair;
  // the uniform state is an exact fixed point, so one tiny step isolates it
  auto apply = [&](int field, bool use_sin) {
    SohState st(n, Nx, length);
    for (int i = 0; i < Nx; ++i) {
      double w = eps * (use_sin ? std::sin(k * st.x_center(i)) : std::cos(k * st.x_center(i)));
      st.rho[i] = rho0 + (field == 0 ? w : 0.0);
      Vec u = u0 + (field == 1 ? w : 0.0) * ephi;
      st.u.col(i) = u / u.norm();
    }
    SohState pre = st;
    step_soh(st, c, tau);
    std::pair<Vec, Vec> out{Vec(Nx), Vec(Nx)};
    for (int i = 0; i < Nx; ++i) {
      out.first[i] = (st.rho[i] - pre.rho[i]) / (eps * tau);
      out.second[i] = ephi.dot(st.u.col(i) - pre.u.col(i)) / (eps * tau);
    }
    return out;
  };

  // assemble the complex 2x2 mode matrix column by column: the generator
  // applied to cos + i sin is the matrix column times exp(i k x)
  Eigen::Matrix2cd S;
  const double dx = length / Nx;
  for (int field = 0; field < 2; ++field) {
    auto [cr, ca] = apply(field, false);
    auto [sr, sa] = apply(field, true);
    std::complex<double> srho(0.0, 0.0), sang(0.0, 0.0);
    for (int i = 0; i < Nx; ++i) {
      std::complex<double> ph = std::exp(std::complex<double>(0.0, -k * (i + 0.5) * dx));
      srho += std::complex<double>(cr[i], sr[i]) * ph;
      sang += std::complex<double>(ca[i], sa[i]) * ph;
    }
    S(0, field) = srho / static_cast<double>(Nx);
    S(1, field) = sang / static_cast<double>(Nx);
  }

  std::complex<double> tr = S(0, 0) + S(1, 1);
  std::complex<double> det = S(0, 0) * S(1, 1) - S(0, 1) * S(1, 0);
  std::complex<double> disc = std::sqrt(tr * tr - 4.0 * det);
  std::array<double, 2> speeds{-(0.5 * (tr + disc)).imag() / k,
                               -(0.5 * (tr - disc)).imag() / k};
  if (speeds[0] > speeds[1]) std::swap(speeds[0], speeds[1]);
  return speeds;
}

// Measured counterpart of linearized_wave_speeds: evolve a small single-mode
// density perturbation of the same uniform background with the nonlinear
// scheme, record the complex Fourier amplitude of the density at that mode,
// and extract the two propagating speeds with the two-exponential fit.
inline std::array<double, 2> measured_wave_speeds(int Nx, double length, double rho0,
                                                  const Vec& u0_in, const Coefficients& c,
                                                  int mode, double amplitude, double T, double dt,
                                                  int samples = 32) {
  if (!(amplitude > 0.0) || !(rho0 > 0.0))
    throw std::invalid_argument("measured_wave_speeds: need rho0 > 0 and amplitude > 0");
  if (samples < 6) throw std::invalid_argument("measured_wave_speeds: need >= 6 samples");
  const Vec u0 = normalized_or_throw(u0_in, "measured_wave_speeds: zero background direction");
  soh_detail::coupling_direction(u0);  // reject degenerate backgrounds up front
  const int n = static_cast<int>(u0.size());
  const double k = 2.0 * kPi * mode / length;

  SohState st(n, Nx, length);
  for (int i = 0; i < Nx; ++i) {
    st.rho[i] = rho0 * (1.0 + amplitude * std::cos(k * st.x_center(i)));
    st.u.col(i) = u0;
  }

  std::vector<std::complex<double>> amp;
  auto record = [&]() {
    std::complex<double> a(0.0, 0.0);
    for (int i = 0; i < Nx; ++i)
      a += (st.rho[i] - rho0) * std::exp(std::complex<double>(0.0, -k * st.x_center(i)));
    amp.push_back(a * (2.0 / static_cast<double>(Nx)));
  };
  long per = std::max(1L, std::lround(T / (static_cast<double>(samples) * dt)));
  record();
  for (int m = 0; m < samples; ++m) {
    for (long q = 0; q < per; ++q) step_soh(st, c, dt);
    record();
  }

  auto rates = fit_two_mode_rates(amp, static_cast<double>(per) * dt);
  std::array<double, 2> speeds{-rates[0].imag() / k, -rates[1].imag() / k};
  if (speeds[0] > speeds[1]) std::swap(speeds[0], speeds[1]);
  return speeds;
}

}  // namespace ccswarm
