#pragma once

#include <map>
#include <string>
#include <vector>

#include "tsdc/estimators.hpp"

namespace tsdc {

// Linear IV problem where the endogenous regressor x lives in the auxiliary
// sample and the outcome y in the primary sample.  U = (instrument, exog...)
// are the common covariates entering the moment U (Y - x beta - exog' beta_c);
// u_cols orders them, instrument first.
struct IvProblem {
  const MergedSample* s = nullptr;
  std::vector<int> u_cols;
  int x_col = 0;
  int y_col = 0;

  int k() const { return static_cast<int>(u_cols.size()); }
  Vec u_row(int i) const;
  double xval(int i) const { return s->x(i, x_col); }
  double yval(int i) const { return s->y(i, y_col); }
};

IvProblem make_iv_problem(const MergedSample& s, int instrument_col,
                          const std::vector<int>& exog_cols, int x_col = 0, int y_col = 0);

// Primary-sample cross moments: mu1 = E(UY | T=1), mu2 = E(U Zc' | T=1).
struct Mu12 {
  Vec mu1;  // k
  Mat mu2;  // k x (k-1)
};
Mu12 estimate_mu12(const IvProblem& iv);

enum class Mu3Method { Pooled, OR, IPW, AIPW, REG, LIK, AST };

struct TsivFits {
  const FittedPs* ps = nullptr;      // IPW / AIPW / REG / LIK / AST
  const FittedOr* orf = nullptr;     // OR / AIPW / REG / LIK / AST
  const DesignMatrix* f = nullptr;   // propensity design, for the augmented refit
};

struct Mu3Result {
  Vec mu3;
  std::map<std::string, double> diag;
};

// E(UX | T=1) under the different auxiliary-to-primary transfers.  Pooled is
// the plain auxiliary average (the classic two-sample IV ingredient).
Mu3Result estimate_mu3(const IvProblem& iv, Mu3Method method, const TsivFits& fits,
                       bool include_h2 = false, const WeightPolicy& policy = {});

// Solve (mu3, mu2) beta = mu1.  Near-singular systems (weak instrument)
// throw FitError.
Vec beta_from_mu(const Vec& mu1, const Mat& mu2, const Vec& mu3);

// Classic pooled estimator: auxiliary averages on the left, primary on the
// right.  Equals beta_from_mu with mu2 and mu3 both taken over t = 0.
Vec tsiv_classic(const IvProblem& iv);

// Two-stage least squares across samples: x on U over t = 0, then y on
// (x_hat, exog) over t = 1.  Both stages run through the origin, matching
// the U-linear outcome regression route exactly.
Vec ts2sls(const IvProblem& iv);

struct BetaResult {
  Vec beta;
  Mu3Result mu3;
};

BetaResult estimate_beta(const IvProblem& iv, Mu3Method method, const TsivFits& fits,
                         bool include_h2 = false, const WeightPolicy& policy = {});

}  // namespace tsdc
