#pragma once

#include <vector>

#include "tsdc/data_model.hpp"

namespace tsdc {

struct LogisticOptions {
  double tol = 1e-8;  // max-norm of the mean score at convergence
  int max_iter = 100;
  int max_halvings = 30;
  double separation_norm = 1e3;  // coefficient norm that flags separation
};

// Logistic fit of T on a design.  gamma has one entry per kept column; pi is
// the fitted probability for every row; cov is the inverse mean information
// divided by n (the usual ML coefficient covariance).
struct FittedPs {
  Vec gamma;
  Vec pi;
  Mat cov;
  DesignMatrix design;
  int iterations = 0;
  double score_norm = 0.0;
  double loglik = 0.0;

  Vec se() const { return cov.diagonal().cwiseMax(0.0).cwiseSqrt(); }
};

FittedPs fit_logistic(const DesignMatrix& design, const std::vector<int>& t,
                      const LogisticOptions& opts = {});

// Least-squares regression of x on a basis over the auxiliary rows, with
// fitted means m_hat evaluated for every row (primary rows included).  alpha
// is p x dx; sigma2 and xtx_inv give the usual coefficient standard errors.
struct FittedOr {
  Mat alpha;
  Mat m_hat;
  DesignMatrix design;
  Vec sigma2;
  Mat xtx_inv;
  int n_aux = 0;

  double se(int coef, int xcol) const;
};

FittedOr fit_or_linear(const DesignMatrix& design, const MergedSample& sample);

// Logistic fit of T on [f(U), psi columns].  The psi block is pruned against
// f (constants drop because f carries the intercept; columns already spanned
// drop too), then the combined design is refitted.  score_f / score_psi are
// the max-norms of the mean score over each block at the solution.
struct FittedAugPs {
  FittedPs fit;              // over the combined kept design
  int p_f = 0;               // leading kept columns coming from f
  std::vector<int> kept_psi; // indices into the supplied psi columns
  Mat psi_kept;              // n x kept_psi.size()
  double score_f = 0.0;
  double score_psi = 0.0;

  Vec gamma() const { return fit.gamma.head(p_f); }
  Vec delta() const { return fit.gamma.tail(fit.gamma.size() - p_f); }
  const Vec& pi() const { return fit.pi; }
  int k_psi() const { return static_cast<int>(kept_psi.size()); }
};

FittedAugPs fit_augmented_ps(const DesignMatrix& f, const Mat& psi_cols,
                             const std::vector<int>& t,
                             const LogisticOptions& opts = {},
                             double prune_tol = 1e-8,
                             const std::vector<std::string>& psi_labels = {});

}  // namespace tsdc
