#pragma once

// Cubic spline with not-a-knot end conditions and a bracketed root finder.

#include <Eigen/Dense>
#include <boost/math/tools/roots.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "impervia/errors.hpp"

namespace impervia::numerics {

class CubicSpline {
 public:
  CubicSpline() = default;

  // x strictly increasing, at least 2 points. With 2 points the spline is
  // the line through them, with 3 it is the interpolating parabola.
  CubicSpline(std::vector<double> x, std::vector<double> y) : x_(std::move(x)), y_(std::move(y)) {
    const std::size_t n = x_.size();
    if (n < 2 || y_.size() != n) throw RangeError("spline needs at least 2 matching points");
    for (std::size_t i = 1; i < n; ++i)
      if (!(x_[i] > x_[i - 1])) throw RangeError("spline abscissae must be strictly increasing");
    m_.assign(n, 0.0);
    if (n == 2) return;

    // Unknowns: second derivatives M_0..M_{n-1}.
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<int>(n), static_cast<int>(n));
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<int>(n));
    auto h = [&](std::size_t i) { return x_[i + 1] - x_[i]; };
    for (std::size_t i = 1; i + 1 < n; ++i) {
      const int r = static_cast<int>(i);
      a(r, r - 1) = h(i - 1);
      a(r, r) = 2.0 * (h(i - 1) + h(i));
      a(r, r + 1) = h(i);
      rhs(r) = 6.0 * ((y_[i + 1] - y_[i]) / h(i) - (y_[i] - y_[i - 1]) / h(i - 1));
    }
    const int last = static_cast<int>(n - 1);
    if (n == 3) {
      // single cubic piece degenerates to a parabola: equal second derivatives
      a(0, 0) = 1; a(0, 1) = -1;
      a(last, last) = 1; a(last, last - 1) = -1;
    } else {
      // third derivative continuous across x_1 and x_{n-2}
      a(0, 0) = h(1); a(0, 1) = -(h(0) + h(1)); a(0, 2) = h(0);
      a(last, last - 2) = h(n - 2); a(last, last - 1) = -(h(n - 3) + h(n - 2)); a(last, last) = h(n - 3);
    }
    const Eigen::VectorXd m = a.partialPivLu().solve(rhs);
    for (std::size_t i = 0; i < n; ++i) m_[i] = m(static_cast<int>(i));
  }

  const std::vector<double>& knots() const { return x_; }

  double operator()(double x) const {
    const std::size_t n = x_.size();
    std::size_t i = static_cast<std::size_t>(std::upper_bound(x_.begin(), x_.end(), x) - x_.begin());
    i = std::clamp<std::size_t>(i, 1, n - 1) - 1;
    const double hi = x_[i + 1] - x_[i];
    const double a = (x_[i + 1] - x) / hi;
    const double b = (x - x_[i]) / hi;
    return a * y_[i] + b * y_[i + 1] + ((a * a * a - a) * m_[i] + (b * b * b - b) * m_[i + 1]) * hi * hi / 6.0;
  }

 private:
  std::vector<double> x_, y_, m_;
};

/// Root of f on [lo, hi] where f(lo), f(hi) have opposite signs (or one is
/// zero). Uses TOMS 748, a bracketing method in the Brent family.
inline double find_root(const std::function<double(double)>& f, double lo, double hi, double tol = 1e-12) {
  const double flo = f(lo), fhi = f(hi);
  if (flo == 0.0) return lo;
  if (fhi == 0.0) return hi;
  if ((flo < 0) == (fhi < 0)) throw NumericError("root not bracketed");
  std::uintmax_t iters = 200;
  auto tolf = [tol](double a, double b) { return std::abs(b - a) <= tol * std::max(1.0, std::abs(a)); };
  auto r = boost::math::tools::toms748_solve(f, lo, hi, flo, fhi, tolf, iters);
  return 0.5 * (r.first + r.second);
}

}  // namespace impervia::numerics
