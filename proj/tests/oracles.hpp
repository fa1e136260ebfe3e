#pragma once

// Reference implementations used only by tests: derivative-free and
// first-order optimizers plus textbook formulas, independent of the
// library's Newton solvers.

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "tsdc/types.hpp"

namespace oracle {

using tsdc::Mat;
using tsdc::Vec;

// Nelder-Mead simplex minimizer.
inline Vec nelder_mead(const std::function<double(const Vec&)>& f, Vec x0,
                       double scale = 0.5, int max_iter = 50000, double tol = 1e-13) {
  const int d = static_cast<int>(x0.size());
  std::vector<Vec> xs(d + 1, x0);
  std::vector<double> fs(d + 1);
  for (int j = 0; j < d; ++j) xs[j + 1][j] += scale;
  for (int j = 0; j <= d; ++j) fs[j] = f(xs[j]);

  auto order = [&]() {
    for (int a = 0; a <= d; ++a)
      for (int b = a + 1; b <= d; ++b)
        if (fs[b] < fs[a]) {
          std::swap(fs[a], fs[b]);
          std::swap(xs[a], xs[b]);
        }
  };

  for (int it = 0; it < max_iter; ++it) {
    order();
    if (fs[d] - fs[0] < tol) break;

    Vec centroid = Vec::Zero(d);
    for (int j = 0; j < d; ++j) centroid += xs[j];
    centroid /= d;

    const Vec xr = centroid + (centroid - xs[d]);
    const double fr = f(xr);
    if (fr < fs[0]) {
      const Vec xe = centroid + 2.0 * (centroid - xs[d]);
      const double fe = f(xe);
      if (fe < fr) {
        xs[d] = xe;
        fs[d] = fe;
      } else {
        xs[d] = xr;
        fs[d] = fr;
      }
    } else if (fr < fs[d - 1]) {
      xs[d] = xr;
      fs[d] = fr;
    } else {
      const Vec xc = centroid + 0.5 * (xs[d] - centroid);
      const double fc = f(xc);
      if (fc < fs[d]) {
        xs[d] = xc;
        fs[d] = fc;
      } else {
        for (int j = 1; j <= d; ++j) {
          xs[j] = xs[0] + 0.5 * (xs[j] - xs[0]);
          fs[j] = f(xs[j]);
        }
      }
    }
  }
  order();
  return xs[0];
}

// Bisection for a scalar root on [lo, hi]; requires a sign change.
inline double bisect(const std::function<double(double)>& f, double lo, double hi,
                     double tol = 1e-13) {
  double flo = f(lo), fhi = f(hi);
  if (flo == 0.0) return lo;
  if (fhi == 0.0) return hi;
  if ((flo > 0) == (fhi > 0)) throw std::runtime_error("bisect: no sign change");
  for (int it = 0; it < 500 && hi - lo > tol; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double fm = f(mid);
    if (fm == 0.0) return mid;
    if ((fm > 0) == (flo > 0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

// Backtracking gradient ascent with central-difference gradients.  f must
// return -inf outside its domain.
inline Vec gradient_ascent(const std::function<double(const Vec&)>& f, Vec x,
                           int max_iter = 200000, double gtol = 1e-10) {
  const int d = static_cast<int>(x.size());
  double fx = f(x);
  double step = 1.0;
  for (int it = 0; it < max_iter; ++it) {
    Vec g(d);
    for (int j = 0; j < d; ++j) {
      const double h = 1e-7 * (1.0 + std::abs(x[j]));
      Vec xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      g[j] = (f(xp) - f(xm)) / (2.0 * h);
    }
    if (g.lpNorm<Eigen::Infinity>() < gtol) break;
    double s = step;
    for (;;) {
      const Vec cand = x + s * g;
      const double fc = f(cand);
      if (std::isfinite(fc) && fc > fx + 1e-4 * s * g.squaredNorm()) {
        x = cand;
        fx = fc;
        step = std::min(s * 2.0, 1e3);
        break;
      }
      s *= 0.5;
      if (s < 1e-18) return x;
    }
  }
  return x;
}

}  // namespace oracle
