#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace tsdc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Base class for everything this library throws on purpose.  The CLI maps
// DataError to exit code 1 and FitError (and subclasses) to exit code 2.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Bad input: malformed CSV, unknown column, invalid option combination.
struct DataError : Error {
  explicit DataError(const std::string& what) : Error(what) {}
};

// Numerical failure inside a fit or solver (separation, singular system,
// stalled line search, non-convergence).
struct FitError : Error {
  explicit FitError(const std::string& what) : Error(what) {}
};

// Empirical-likelihood stage failure (no feasible ascent step, singular
// Hessian).  Kept distinct so callers can tell weighting failures apart
// from plain regression trouble.
struct ElError : FitError {
  explicit ElError(const std::string& what) : FitError(what) {}
};

inline double linf(const Vec& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace tsdc
