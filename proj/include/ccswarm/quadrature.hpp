#pragma once

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <utility>
#include <vector>

#include "ccswarm/vec.hpp"

namespace ccswarm {

// adaptive Gauss-Kronrod on [a,b]
template <class F>
double integrate_1d(F&& f, double a, double b, double rel_tol = 1e-12, int max_depth = 15) {
  return boost::math::quadrature::gauss_kronrod<double, 15>::integrate(
      std::forward<F>(f), a, b, max_depth, rel_tol);
}

struct Quad1D {
  std::vector<double> x, w;
};

// Gauss-Legendre nodes/weights on [-1,1] (Golub-Welsch)
inline Quad1D gauss_legendre(int N) {
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(N, N);
  for (int i = 1; i < N; ++i) {
    double b = i / std::sqrt(4.0 * i * i - 1.0);
    J(i, i - 1) = b;
    J(i - 1, i) = b;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  Quad1D q;
  q.x.resize(N);
  q.w.resize(N);
  for (int i = 0; i < N; ++i) {
    q.x[i] = es.eigenvalues()[i];
    double v0 = es.eigenvectors()(0, i);
    q.w[i] = 2.0 * v0 * v0;
  }
  return q;
}

inline Quad1D gauss_legendre_on(int N, double a, double b) {
  Quad1D q = gauss_legendre(N);
  for (int i = 0; i < N; ++i) {
    q.x[i] = 0.5 * (a + b) + 0.5 * (b - a) * q.x[i];
    q.w[i] *= 0.5 * (b - a);
  }
  return q;
}

// Monotone cubic Hermite interpolant (Fritsch-Carlson slopes).
class MonotoneCubic {
 public:
  MonotoneCubic() = default;
  MonotoneCubic(std::vector<double> x, std::vector<double> y)
      : x_(std::move(x)), y_(std::move(y)) {
    const size_t n = x_.size();
    m_.assign(n, 0.0);
    std::vector<double> d(n - 1);
    for (size_t i = 0; i + 1 < n; ++i) d[i] = (y_[i + 1] - y_[i]) / (x_[i + 1] - x_[i]);
    m_[0] = d[0];
    m_[n - 1] = d[n - 2];
    for (size_t i = 1; i + 1 < n; ++i)
      m_[i] = (d[i - 1] * d[i] <= 0.0) ? 0.0 : 0.5 * (d[i - 1] + d[i]);
    for (size_t i = 0; i + 1 < n; ++i) {
      if (d[i] == 0.0) {
        m_[i] = m_[i + 1] = 0.0;
        continue;
      }
      double a = m_[i] / d[i], b = m_[i + 1] / d[i];
      double s = a * a + b * b;
      if (s > 9.0) {
        double t = 3.0 / std::sqrt(s);
        m_[i] = t * a * d[i];
        m_[i + 1] = t * b * d[i];
      }
    }
  }

  double operator()(double xq) const {
    const auto& x = x_;
    size_t lo = 0, hi = x.size() - 1;
    if (xq <= x.front()) return y_.front();
    if (xq >= x.back()) return y_.back();
    while (hi - lo > 1) {
      size_t mid = (lo + hi) / 2;
      (x[mid] <= xq ? lo : hi) = mid;
    }
    double hh = x[lo + 1] - x[lo], t = (xq - x[lo]) / hh;
    double h00 = (1 + 2 * t) * (1 - t) * (1 - t), h10 = t * (1 - t) * (1 - t);
    double h01 = t * t * (3 - 2 * t), h11 = t * t * (t - 1);
    return h00 * y_[lo] + hh * h10 * m_[lo] + h01 * y_[lo + 1] + hh * h11 * m_[lo + 1];
  }

  // inverse query for strictly increasing data (bisection; the interpolant is monotone)
  double inverse(double yq) const {
    if (yq <= y_.front()) return x_.front();
    if (yq >= y_.back()) return x_.back();
    double a = x_.front(), b = x_.back();
    for (int it = 0; it < 60; ++it) {
      double mid = 0.5 * (a + b);
      ((*this)(mid) < yq ? a : b) = mid;
    }
    return 0.5 * (a + b);
  }

 private:
  std::vector<double> x_, y_, m_;
};

}  // namespace ccswarm
