#include "hbias/optimize.hpp"

#include <cmath>
#include <limits>
#include <utility>

#include "hbias/error.hpp"

namespace hbias::optimize {

MinimizeResult brent_minimize(const std::function<double(double)>& f, double lo, double hi,
                              double tol, int max_iter) {
  constexpr double kGolden = 0.3819660112501051;  // (3 - sqrt 5) / 2
  const double eps = std::numeric_limits<double>::epsilon();
  double a = std::min(lo, hi), b = std::max(lo, hi);
  double x = a + kGolden * (b - a);
  double w = x, v = x;
  double fx = f(x);
  double fw = fx, fv = fx;
  double d = 0.0, e = 0.0;

  MinimizeResult res;
  for (int it = 0; it < max_iter; ++it) {
    const double m = 0.5 * (a + b);
    const double tol1 = eps * std::abs(x) + tol;
    const double tol2 = 2.0 * tol1;
    if (std::abs(x - m) <= tol2 - 0.5 * (b - a)) {
      res = {x, fx, it, true};
      return res;
    }
    bool golden = true;
    if (std::abs(e) > tol1) {
      double r = (x - w) * (fx - fv);
      double q = (x - v) * (fx - fw);
      double p = (x - v) * q - (x - w) * r;
      q = 2.0 * (q - r);
      if (q > 0.0) p = -p;
      q = std::abs(q);
      const double etemp = e;
      e = d;
      if (std::abs(p) < std::abs(0.5 * q * etemp) && p > q * (a - x) && p < q * (b - x)) {
        d = p / q;
        const double u = x + d;
        if (u - a < tol2 || b - u < tol2) d = m >= x ? tol1 : -tol1;
        golden = false;
      }
    }
    if (golden) {
      e = (x >= m ? a : b) - x;
      d = kGolden * e;
    }
    const double u = std::abs(d) >= tol1 ? x + d : x + (d > 0 ? tol1 : -tol1);
    const double fu = f(u);
    if (fu <= fx) {
      if (u >= x) a = x; else b = x;
      v = w; fv = fw;
      w = x; fw = fx;
      x = u; fx = fu;
    } else {
      if (u < x) a = u; else b = u;
      if (fu <= fw || w == x) {
        v = w; fv = fw;
        w = u; fw = fu;
      } else if (fu <= fv || v == x || v == w) {
        v = u; fv = fu;
      }
    }
    res.iterations = it + 1;
  }
  res.x = x;
  res.fx = fx;
  res.converged = false;
  return res;
}

RootResult find_root(const std::function<double(double)>& f, double lo, double hi, double xtol,
                     int max_iter) {
  double a = lo, b = hi;
  double fa = f(a), fb = f(b);
  RootResult res;
  if (fa == 0.0) return {a, 0, true};
  if (fb == 0.0) return {b, 0, true};
  if ((fa > 0) == (fb > 0)) throw Error("find_root: endpoints do not bracket a sign change");
  int side = 0;
  for (int it = 0; it < max_iter; ++it) {
    res.iterations = it + 1;
    double c = (a * fb - b * fa) / (fb - fa);
    // Fall back to bisection when false position lands outside or stalls.
    if (!(c > std::min(a, b) && c < std::max(a, b))) c = 0.5 * (a + b);
    const double fc = f(c);
    if (fc == 0.0) return {c, it + 1, true};
    if ((fc > 0) == (fb > 0)) {
      b = c;
      fb = fc;
      if (side == -1) fa *= 0.5;
      side = -1;
    } else {
      a = c;
      fa = fc;
      if (side == 1) fb *= 0.5;
      side = 1;
    }
    const double mid = 0.5 * (a + b);
    if (std::abs(b - a) <= xtol || mid == a || mid == b) {
      res.x = std::abs(fa) < std::abs(fb) ? a : b;
      res.converged = true;
      return res;
    }
  }
  res.x = 0.5 * (a + b);
  res.converged = false;
  return res;
}

}  // namespace hbias::optimize
