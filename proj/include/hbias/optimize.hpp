#pragma once

#include <functional>

namespace hbias::optimize {

struct MinimizeResult {
  double x = 0.0;
  double fx = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Brent's parabolic-interpolation / golden-section minimizer on [lo, hi].
// Stops when the bracket half-width falls below 2·(tol + eps·|x|).
MinimizeResult brent_minimize(const std::function<double(double)>& f, double lo, double hi,
                              double tol, int max_iter = 200);

struct RootResult {
  double x = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Root of f on [lo, hi] where f(lo) and f(hi) differ in sign (Illinois
// false position with bisection fallback). Runs until the bracket stops
// shrinking or its width is below xtol.
RootResult find_root(const std::function<double(double)>& f, double lo, double hi, double xtol,
                     int max_iter = 200);

}  // namespace hbias::optimize
