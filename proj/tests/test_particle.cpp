#include <catch2/catch_amalgamated.hpp>

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <random>
#include <vector>

#include "ccswarm/equilibria.hpp"
#include "ccswarm/particle.hpp"
#include "ccswarm/quadrature.hpp"

using namespace ccswarm;

namespace {

Vec e(int n, int i) {
  Vec v = Vec::Zero(n);
  v[i] = 1.0;
  return v;
}

Vec random_unit(std::mt19937_64& eng, int n) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = g(eng);
  return v / v.norm();
}

void scatter_uniform(ParticleEnsemble& ens, std::mt19937_64& eng) {
  std::uniform_real_distribution<double> u(0.0, ens.box);
  for (Eigen::Index i = 0; i < ens.X.cols(); ++i)
    for (int d = 0; d < ens.params.n; ++d) ens.X(d, i) = u(eng);
}

// brute-force alignment field for cross-checking the cell list
Vec brute_force_J(const ParticleEnsemble& ens, const Vec& x) {
  const int n = ens.params.n;
  Vec sum = Vec::Zero(n);
  for (Eigen::Index j = 0; j < ens.X.cols(); ++j) {
    double r2 = 0.0;
    for (int d = 0; d < n; ++d) {
      double t = x[d] - ens.X(d, j);
      t -= ens.box * std::round(t / ens.box);
      r2 += t * t;
    }
    sum += kernel_value(ens.kernel, n, std::sqrt(r2) / ens.R) * ens.V.col(j);
  }
  if (ens.normalized) return sum / sum.norm();
  return sum / std::pow(ens.R, n);
}

}  // namespace

TEST_CASE("alignment field oracles") {
  SECTION("two co-located particles, normalized") {
    ParticleEnsemble ens(ModelParams(3, 1.0, 1.0), 10.0, 1.0, 2, 1);
    ens.normalized = true;
    Vec x(3);
    x << 5.0, 5.0, 5.0;
    ens.set_particle(0, x, TangentPair(e(3, 0), Vec::Zero(3)));
    ens.set_particle(1, x, TangentPair(e(3, 1), Vec::Zero(3)));
    Vec J = mean_direction(ens, x);
    Vec expect = (e(3, 0) + e(3, 1)) / std::sqrt(2.0);
    REQUIRE((J - expect).norm() < 1e-14);
  }

  SECTION("one particle, normalized, at its own position") {
    ParticleEnsemble ens(ModelParams(4, 1.0, 1.0), 5.0, 0.5, 1, 1);
    ens.normalized = true;
    std::mt19937_64 eng(7);
    Vec v = random_unit(eng, 4);
    Vec x = Vec::Constant(4, 2.0);
    ens.set_particle(0, x, TangentPair(v, Vec::Zero(4)));
    REQUIRE((mean_direction(ens, x) - v).norm() < 1e-14);
  }

  SECTION("single particle, non-normalized top hat") {
    double R = 0.7;
    ParticleEnsemble ens(ModelParams(3, 1.0, 1.0), 12.0, R, 1, 1);
    std::mt19937_64 eng(8);
    Vec v = random_unit(eng, 3);
    Vec x = Vec::Constant(3, 6.0);
    ens.set_particle(0, x, TangentPair(v, Vec::Zero(3)));
    Vec expect = (3.0 / (4.0 * kPi)) * v / (R * R * R);
    REQUIRE((mean_direction(ens, x) - expect).norm() < 1e-14 * expect.norm());
  }

  SECTION("degenerate normalized field") {
    ParticleEnsemble ens(ModelParams(3, 1.0, 1.0), 10.0, 1.0, 2, 1);
    ens.normalized = true;
    Vec x = Vec::Constant(3, 5.0);
    ens.set_particle(0, x, TangentPair(e(3, 0), Vec::Zero(3)));
    ens.set_particle(1, x, TangentPair(-e(3, 0), Vec::Zero(3)));
    REQUIRE_THROWS_AS(mean_direction(ens, x), DegenerateAlignment);
  }

  SECTION("kernels integrate to one") {
    for (int n : {3, 4}) {
      for (Kernel k : {Kernel::top_hat, Kernel::smooth_bump}) {
        // radial quadrature independent of the constant baked into kernel_value
        double total = sphere_area(n - 1) *
                       integrate_1d(
                           [&](double r) { return kernel_value(k, n, r) * std::pow(r, n - 1); },
                           0.0, 1.0, 1e-12);
        REQUIRE(total == Catch::Approx(1.0).epsilon(1e-9));
      }
    }
  }

  SECTION("cell list agrees with the direct double loop") {
    std::mt19937_64 eng(99);
    for (Kernel k : {Kernel::top_hat, Kernel::smooth_bump}) {
      ParticleEnsemble ens(ModelParams(3, 1.0, 1.0), 2.0, 0.33, 400, 5);
      ens.kernel = k;
      scatter_uniform(ens, eng);
      for (Eigen::Index i = 0; i < 400; ++i) {
        Vec v = random_unit(eng, 3);
        ens.V.col(i) = v;
      }
      for (int rep = 0; rep < 50; ++rep) {
        Vec x(3);
        for (int d = 0; d < 3; ++d) x[d] = 2.0 * std::uniform_real_distribution<double>()(eng);
        Vec a = mean_direction(ens, x);
        Vec b = brute_force_J(ens, x);
        REQUIRE((a - b).norm() < 1e-13 * (1.0 + b.norm()));
      }
    }
  }

  SECTION("relabeling particles leaves the field unchanged") {
    std::mt19937_64 eng(123);
    ParticleEnsemble ens(ModelParams(3, 1.0, 1.0), 2.0, 0.4, 200, 5);
    scatter_uniform(ens, eng);
    for (Eigen::Index i = 0; i < 200; ++i) ens.V.col(i) = random_unit(eng, 3);
    ParticleEnsemble rev = ens;
    for (Eigen::Index i = 0; i < 200; ++i) {
      rev.X.col(i) = ens.X.col(199 - i);
      rev.V.col(i) = ens.V.col(199 - i);
    }
    for (int rep = 0; rep < 20; ++rep) {
      Vec x(3);
      for (int d = 0; d < 3; ++d) x[d] = 2.0 * std::uniform_real_distribution<double>()(eng);
      REQUIRE((mean_direction(ens, x) - mean_direction(rev, x)).norm() < 1e-13);
    }
  }
}

TEST_CASE("aligned state is a fixed point of the drift") {
  ParticleEnsemble ens(ModelParams(3, 2.0, 0.0), 1e6, 1.0, 1, 3);
  Vec u = e(3, 0);
  ens.external_J = u;
  Vec x0 = Vec::Constant(3, 100.0);
  ens.set_particle(0, x0, TangentPair(u, Vec::Zero(3)));
  double dt = 1e-2;
  for (int s = 0; s < 100; ++s) step_pcc(ens, dt);
  REQUIRE((ens.V.col(0) - u).norm() < 1e-14);
  REQUIRE(ens.K.col(0).norm() < 1e-14);
  Vec expect = x0 + u;  // T = 1
  REQUIRE((ens.X.col(0) - expect).norm() < 1e-12);
}

TEST_CASE("noiseless trajectory follows the planar pendulum reduction") {
  // In the plane spanned by the target direction and the initial velocity,
  // the angle to the target and the signed curvature obey
  //   theta' = kappa,  kappa' = -nu (kappa + |J| sin theta).
  for (double nu : {1.0, 8.0}) {
    ParticleEnsemble ens(ModelParams(3, nu, 0.0), 1e6, 1.0, 1, 3);
    ens.external_J = e(3, 0);
    double th0 = 2.0, kp0 = 0.5;
    Vec v0(3), et0(3);
    v0 << std::cos(th0), std::sin(th0), 0.0;
    et0 << -std::sin(th0), std::cos(th0), 0.0;
    ens.set_particle(0, Vec::Constant(3, 10.0), TangentPair(v0, kp0 * et0));

    // reference: classic fourth-order integration of the reduced system
    double rdt = 1e-4;
    auto rhs = [&](double th, double kp) { return std::make_pair(kp, -nu * (kp + std::sin(th))); };
    std::vector<double> ref_th, ref_kp;
    {
      double th = th0, kp = kp0;
      ref_th.push_back(th);
      ref_kp.push_back(kp);
      long steps = std::lround(20.0 / rdt);
      for (long s = 1; s <= steps; ++s) {
        auto [k1t, k1k] = rhs(th, kp);
        auto [k2t, k2k] = rhs(th + 0.5 * rdt * k1t, kp + 0.5 * rdt * k1k);
        auto [k3t, k3k] = rhs(th + 0.5 * rdt * k2t, kp + 0.5 * rdt * k2k);
        auto [k4t, k4k] = rhs(th + rdt * k3t, kp + rdt * k3k);
        th += rdt / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t);
        kp += rdt / 6.0 * (k1k + 2.0 * k2k + 2.0 * k3k + k4k);
        ref_th.push_back(th);
        ref_kp.push_back(kp);
      }
    }

    double dt = 2e-5;
    long per_sample = std::lround(0.1 / dt);
    long ref_per_sample = std::lround(0.1 / rdt);
    double sup = 0.0, worst_plane = 0.0;
    for (int sample = 1; sample <= 200; ++sample) {
      for (long s = 0; s < per_sample; ++s) step_pcc(ens, dt);
      Vec v = ens.V.col(0), k = ens.K.col(0);
      double th_ref = ref_th[sample * ref_per_sample];
      double kp_ref = ref_kp[sample * ref_per_sample];
      // recover the planar coordinates from the ambient state
      double th = std::atan2(v[1], v[0]);
      // unwrap against the reference to compare angles continuously
      th += 2.0 * kPi * std::round((th_ref - th) / (2.0 * kPi));
      Vec et(3);
      et << -std::sin(th), std::cos(th), 0.0;
      double kp = k.dot(et);
      sup = std::max(sup, std::abs(th - th_ref));
      sup = std::max(sup, std::abs(kp - kp_ref));
      worst_plane = std::max(worst_plane, std::abs(v[2]));
      worst_plane = std::max(worst_plane, std::abs(k[2]));
    }
    CAPTURE(nu, sup);
    REQUIRE(sup <= 1e-5);
    REQUIRE(worst_plane < 1e-13);
  }
}

TEST_CASE("constraints hold after every noisy step") {
  std::mt19937_64 eng(2718);
  for (int n : {3, 4}) {
    ParticleEnsemble ens(ModelParams(n, 1.0, 1.0), 4.0, 0.8, 40, 77);
    scatter_uniform(ens, eng);
    for (Eigen::Index i = 0; i < 40; ++i) {
      Vec v = random_unit(eng, n);
      Vec k = project_orthogonal(v, random_unit(eng, n));
      ens.set_particle(static_cast<std::size_t>(i), ens.X.col(i), TangentPair(v, k));
    }
    double worst = 0.0;
    for (int s = 0; s < 300; ++s) {
      step_pcc(ens, 1e-3);
      for (Eigen::Index i = 0; i < 40; ++i) {
        worst = std::max(worst, std::abs(ens.V.col(i).norm() - 1.0));
        worst = std::max(worst, std::abs(ens.K.col(i).dot(ens.V.col(i))));
      }
    }
    CAPTURE(n, worst);
    REQUIRE(worst <= 1e-12);
  }
}

TEST_CASE("noiseless runs dissipate the alignment energy") {
  std::mt19937_64 eng(321);
  double nu = 1.5;
  ParticleEnsemble ens(ModelParams(3, nu, 0.0), 1e6, 1.0, 1, 9);
  Vec u = random_unit(eng, 3);
  ens.external_J = 2.0 * u;  // arbitrary magnitude
  Vec v0 = random_unit(eng, 3);
  Vec k0 = project_orthogonal(v0, random_unit(eng, 3));
  ens.set_particle(0, Vec::Constant(3, 5.0), TangentPair(v0, k0));

  auto energy = [&](const ParticleEnsemble& s) {
    return -nu * s.V.col(0).dot(*s.external_J) + 0.5 * s.K.col(0).squaredNorm();
  };
  double dt = 1e-5;
  double H = energy(ens), H0 = H;
  double worst_rise = -1.0;
  for (int s = 0; s < 30000; ++s) {
    step_pcc(ens, dt);
    double Hn = energy(ens);
    worst_rise = std::max(worst_rise, Hn - H);
    H = Hn;
  }
  CAPTURE(worst_rise);
  REQUIRE(worst_rise <= 1e-8 * dt);
  REQUIRE(H < H0);
}

TEST_CASE("weak convergence of the stepper is at least first order") {
  // Coarse runs consume the sums of the fine increments, so the comparison
  // isolates the time-discretization error of the mean alignment.
  const int n = 3;
  const double nu = 1.0, D = 0.5, T = 0.5;
  const std::size_t N = 2000;
  Vec u = e(n, 0);

  auto run = [&](double dt, int refine, std::uint64_t seed) {
    ParticleEnsemble ens(ModelParams(n, nu, D), 1e6, 1.0, N, 11);
    ens.external_J = u;
    std::mt19937_64 init(55);
    for (std::size_t i = 0; i < N; ++i) {
      Vec v = random_unit(init, n);
      Vec k = 0.5 * project_orthogonal(v, random_unit(init, n));
      ens.set_particle(i, Vec::Constant(n, 100.0), TangentPair(v, k));
    }
    double fine_dt = dt / refine;
    long coarse_steps = std::lround(T / dt);
    std::vector<std::mt19937_64> noise;
    for (std::size_t i = 0; i < N; ++i) noise.push_back(make_engine(seed, i));
    Mat dW(n, static_cast<Eigen::Index>(N));
    Vec g(n);
    for (long s = 0; s < coarse_steps; ++s) {
      dW.setZero();
      for (int r = 0; r < refine; ++r)
        for (std::size_t i = 0; i < N; ++i) {
          fill_normal(noise[i], g);
          dW.col(static_cast<Eigen::Index>(i)) += std::sqrt(fine_dt) * g;
        }
      step_pcc(ens, dt, &dW);
    }
    double mean = 0.0;
    for (Eigen::Index i = 0; i < ens.V.cols(); ++i) mean += ens.V.col(i).dot(u);
    return mean / static_cast<double>(N);
  };

  // Same Brownian path within each pair: the coarse run sums its fine
  // increments. The step sizes are far apart so the systematic error
  // dominates the coupled Monte Carlo residue.
  double err_a = std::abs(run(3.2e-2, 8, 300) - run(3.2e-2 / 8, 1, 300));
  double err_b = std::abs(run(8e-3, 8, 400) - run(8e-3 / 8, 1, 400));
  double rate = std::log(err_a / err_b) / std::log(4.0);
  CAPTURE(err_a, err_b, rate);
  REQUIRE(err_a < 0.05);
  REQUIRE(rate >= 0.8);
}

TEST_CASE("spin variables round trip and degenerate cases") {
  std::mt19937_64 eng(64);
  SECTION("curvature -> spin -> curvature is the identity") {
    for (int rep = 0; rep < 100; ++rep) {
      Vec v = random_unit(eng, 3);
      Vec k = 3.0 * project_orthogonal(v, random_unit(eng, 3));
      double delta = 0.25 + 2.0 * std::uniform_real_distribution<double>()(eng);
      Vec s = spin_from_curvature(v, k, delta);
      REQUIRE(std::abs(s.dot(v)) < 1e-14 * (1.0 + s.norm()));
      REQUIRE((curvature_from_spin(v, s, delta) - k).norm() <= 1e-14 * (1.0 + k.norm()));
    }
  }

  SECTION("zero spin means straight-line motion") {
    ParticleEnsemble ens(ModelParams(3, 1.0, 0.0), 1e6, 1.0, 1, 5);
    ens.external_J = Vec::Zero(3);
    Vec v0 = random_unit(eng, 3);
    Vec x0 = Vec::Constant(3, 7.0);
    ens.set_particle(0, x0, TangentPair(v0, Vec::Zero(3)));
    for (int s = 0; s < 1000; ++s) step_spin_n3(ens, 1e-3, 1.0);
    REQUIRE((ens.V.col(0) - v0).norm() < 1e-14);
    REQUIRE(ens.K.col(0).norm() < 1e-14);
    REQUIRE((ens.X.col(0) - (x0 + v0)).norm() < 1e-12);
  }

  SECTION("rejects wrong dimension and bad delta") {
    ParticleEnsemble bad(ModelParams(4, 1.0, 1.0), 1.0, 0.5, 1, 5);
    REQUIRE_THROWS_AS(step_spin_n3(bad, 1e-3, 1.0), std::invalid_argument);
    ParticleEnsemble ok(ModelParams(3, 1.0, 1.0), 1.0, 0.5, 1, 5);
    REQUIRE_THROWS_AS(step_spin_n3(ok, 1e-3, 0.0), std::invalid_argument);
  }
}

TEST_CASE("spin form tracks the curvature form with shared noise") {
  // Interacting run in a mild regime; both integrators draw identical
  // increments, so the gap measures only the formulation difference.
  for (double delta : {1.0, 2.0}) {
    const double nu = 0.5, D = 1e-4, dt = 1e-4, T = 1.0;
    const std::size_t N = 3;
    auto build = [&]() {
      ParticleEnsemble ens(ModelParams(3, nu, D), 10.0, 20.0, N, 424242);
      ens.normalized = true;
      std::mt19937_64 init(17);
      std::normal_distribution<double> g(0.0, 1.0);
      for (std::size_t i = 0; i < N; ++i) {
        Vec v(3);
        v << 1.0, 0.05 * g(init), 0.05 * g(init);
        v /= v.norm();
        Vec k = 0.1 * project_orthogonal(v, random_unit(init, 3));
        Vec x = Vec::Constant(3, 5.0) + 0.1 * Vec::NullaryExpr(3, [&](Eigen::Index) { return g(init); });
        ens.set_particle(i, x, TangentPair(v, k));
      }
      return ens;
    };

    ParticleEnsemble a = build();
    ParticleEnsemble b = build();
    long steps = std::lround(T / dt);
    double sup = 0.0;
    for (long s = 0; s < steps; ++s) {
      step_pcc(a, dt);
      step_spin_n3(b, dt, delta);
      for (std::size_t i = 0; i < N; ++i) {
        Eigen::Index c = static_cast<Eigen::Index>(i);
        sup = std::max(sup, (a.X.col(c) - b.X.col(c)).norm());
        sup = std::max(sup, (a.V.col(c) - b.V.col(c)).norm());
        sup = std::max(sup, (a.K.col(c) - b.K.col(c)).norm());
      }
    }
    CAPTURE(delta, sup);
    REQUIRE(sup <= 1e-6);
  }
}

TEST_CASE("stepping is bit-reproducible for a fixed seed") {
  auto build = [&](std::uint64_t seed) {
    ParticleEnsemble ens(ModelParams(3, 1.0, 1.0), 3.0, 0.6, 60, seed);
    std::mt19937_64 init(1);
    scatter_uniform(ens, init);
    for (Eigen::Index i = 0; i < 60; ++i) {
      Vec v = random_unit(init, 3);
      ens.set_particle(static_cast<std::size_t>(i), ens.X.col(i),
                       TangentPair(v, project_orthogonal(v, random_unit(init, 3))));
    }
    for (int s = 0; s < 50; ++s) step_pcc(ens, 1e-3);
    return ens;
  };
  ParticleEnsemble r1 = build(12), r2 = build(12), r3 = build(13);
  REQUIRE((r1.X - r2.X).norm() == 0.0);
  REQUIRE((r1.V - r2.V).norm() == 0.0);
  REQUIRE((r1.K - r2.K).norm() == 0.0);
  REQUIRE((r1.V - r3.V).norm() > 0.0);
}

TEST_CASE("constant alignment field preserves the equilibrium law") {
  const double nu = 1.0, D = 1.0;
  ModelParams p(3, nu, D);
  Vec u = e(3, 0);
  const std::size_t N = 3000;
  ParticleEnsemble ens(p, 50.0, 1.0, N, 31415);
  ens.external_J = u;
  auto init = sample_equilibrium(u, p, N, 2718);
  std::mt19937_64 eng(5);
  std::uniform_real_distribution<double> ux(0.0, 50.0);
  for (std::size_t i = 0; i < N; ++i) {
    Vec x(3);
    x << ux(eng), ux(eng), ux(eng);
    ens.set_particle(i, x, init[i]);
  }
  for (int s = 0; s < 1000; ++s) step_pcc(ens, 2e-3);

  // chi-squared of cos(theta) against the stationary angular marginal
  double k = p.k();
  auto pdf = [&](double t) { return std::exp(k * (t - 1.0)); };
  const int G = 2001;
  std::vector<double> ts(G), cdf(G, 0.0);
  for (int i = 0; i < G; ++i) ts[i] = -1.0 + 2.0 * i / (G - 1);
  for (int i = 1; i < G; ++i) cdf[i] = cdf[i - 1] + integrate_1d(pdf, ts[i - 1], ts[i], 1e-12);
  for (int i = 0; i < G; ++i) cdf[i] /= cdf[G - 1];
  MonotoneCubic F(ts, cdf);

  const int bins = 40;
  std::vector<double> counts(bins, 0.0);
  for (Eigen::Index i = 0; i < ens.V.cols(); ++i) {
    double q = F(ens.V.col(i).dot(u));
    counts[std::min(bins - 1, static_cast<int>(q * bins))] += 1.0;
  }
  double expect = static_cast<double>(N) / bins, stat = 0.0;
  for (double c : counts) stat += (c - expect) * (c - expect) / expect;
  boost::math::chi_squared dist(bins - 1);
  double pval = boost::math::cdf(boost::math::complement(dist, stat));
  CAPTURE(stat, pval);
  REQUIRE(pval > 1e-3);

  // curvature marginal keeps its variance too
  double s2 = 0.0;
  for (Eigen::Index i = 0; i < ens.K.cols(); ++i) s2 += ens.K.col(i).squaredNorm();
  double mean_k2 = s2 / static_cast<double>(N);
  REQUIRE(mean_k2 == Catch::Approx(2.0 * D / nu).margin(5.0 * 2.0 * std::sqrt(2.0 / N)));
}

TEST_CASE("slab moments") {
  SECTION("identical velocities give that direction everywhere") {
    ParticleEnsemble ens(ModelParams(3, 1.0, 1.0), 8.0, 1.0, 200, 4);
    std::mt19937_64 eng(6);
    scatter_uniform(ens, eng);
    Vec v = random_unit(eng, 3);
    for (Eigen::Index i = 0; i < 200; ++i)
      ens.set_particle(static_cast<std::size_t>(i), ens.X.col(i), TangentPair(v, Vec::Zero(3)));
    MomentField mf = extract_moments(ens, 5);
    for (int b = 0; b < mf.bins; ++b) {
      if (!mf.occupied[b]) continue;
      REQUIRE((mf.u.col(b) - v).norm() < 1e-13);
      REQUIRE(mf.flux_norm[b] / mf.rho[b] == Catch::Approx(1.0).epsilon(1e-13));
    }
  }

  SECTION("equilibrium ensemble recovers the order parameter") {
    ModelParams p(3, 1.0, 1.0);
    Vec u = e(3, 0);
    const std::size_t N = 100000;
    ParticleEnsemble ens(p, 10.0, 1.0, N, 8);
    auto alphas = sample_equilibrium(u, p, N, 909);
    std::mt19937_64 eng(10);
    std::uniform_real_distribution<double> ux(0.0, 10.0);
    for (std::size_t i = 0; i < N; ++i) {
      Vec x(3);
      x << ux(eng), ux(eng), ux(eng);
      ens.set_particle(i, x, alphas[i]);
    }
    double c1 = order_parameter_c1(p);
    MomentField mf = extract_moments(ens, 4);
    for (int b = 0; b < mf.bins; ++b) {
      REQUIRE(mf.occupied[b]);
      double count = mf.rho[b] * mf.bin_width * 100.0;
      double se = std::sqrt(1.0 / count);  // generous bound on the flux error
      REQUIRE(mf.flux_norm[b] / mf.rho[b] == Catch::Approx(c1).margin(4.0 * se));
      REQUIRE((mf.u.col(b) - u).norm() < 6.0 * se);
    }
  }

  SECTION("empty bins are flagged") {
    ParticleEnsemble ens(ModelParams(3, 1.0, 1.0), 8.0, 1.0, 3, 4);
    for (std::size_t i = 0; i < 3; ++i) {
      Vec x(3);
      x << 0.5, 4.0, 4.0;  // all in the first slab
      ens.set_particle(i, x, TangentPair(e(3, 0), Vec::Zero(3)));
    }
    MomentField mf = extract_moments(ens, 8);
    REQUIRE(mf.occupied[0] == 1);
    for (int b = 1; b < 8; ++b) REQUIRE(mf.occupied[b] == 0);
    REQUIRE_THROWS_AS(extract_moments(ens, 0), std::invalid_argument);
  }

  SECTION("no particles at all") {
    ParticleEnsemble ens(ModelParams(3, 1.0, 1.0), 8.0, 1.0, 0, 4);
    REQUIRE_THROWS_AS(extract_moments(ens, 4), std::invalid_argument);
  }
}

TEST_CASE("simulate composes steps and reports on cadence") {
  ParticleEnsemble ens(ModelParams(3, 1.0, 0.0), 1e6, 1.0, 1, 21);
  ens.external_J = e(3, 0);
  std::mt19937_64 eng(33);
  Vec v0 = random_unit(eng, 3);
  Vec k0 = project_orthogonal(v0, random_unit(eng, 3));
  ens.set_particle(0, Vec::Constant(3, 2.0), TangentPair(v0, k0));
  ParticleEnsemble manual = ens;

  std::vector<long> seen;
  simulate(ens, 1e-3, 0.05, 10, [&](const ParticleEnsemble&, long s, double) { seen.push_back(s); });
  for (int s = 0; s < 50; ++s) step_pcc(manual, 1e-3);

  REQUIRE(seen == std::vector<long>{0, 10, 20, 30, 40, 50});
  REQUIRE((ens.V.col(0) - manual.V.col(0)).norm() == 0.0);
  REQUIRE((ens.X.col(0) - manual.X.col(0)).norm() == 0.0);
}
