#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tsdc/el_solver.hpp"

namespace tsdc {

// Just-identified moment function Phi(x, u, theta) with dim Phi == dim theta.
// jac (d Phi / d theta') is optional; solvers fall back to central finite
// differences on the assembled estimating equation when it is absent.
struct MomentModel {
  int k = 0;
  std::function<Vec(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& u,
                    const Vec& theta)>
      phi;
  std::function<Mat(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& u,
                    const Vec& theta)>
      jac;  // may be empty
};

// Outcome-side moment pair for the split restriction
//   E{ phi1(Y, U; theta) - phi0(X, U; theta) | T = 1 } = 0.
// phi1 consumes y in place of x.
struct MomentPair {
  MomentModel phi1;
  MomentModel phi0;
};

// Plug-in regression estimate of psi_theta(U) = E{ Phi(X, U; theta) | U }.
// Default route substitutes the fitted mean m_hat(U) for X, which is exact
// for moments affine in x; a custom hook overrides that when Phi is not.
struct PsiHat {
  const MomentModel* mm = nullptr;
  const Mat* u = nullptr;  // n x du covariates
  Mat m_hat;               // n x dx fitted conditional means
  std::function<Vec(const Eigen::Ref<const Vec>& u, const Vec& theta)> hook;

  int n() const { return static_cast<int>(m_hat.rows() ? m_hat.rows() : u->rows()); }
  Vec value(int i, const Vec& theta) const;
  Mat eval_all(const Vec& theta) const;  // n x k
};

PsiHat make_psi_hat(const MomentModel& mm, const Mat& u, const FittedOr& orf);

enum class Method { OR, IPW, AIPW_NP, AIPW_SP, REG, LIK, AST };

std::string method_name(Method m);
std::optional<Method> method_from_name(const std::string& name);

struct SolveOptions {
  Vec theta0;  // empty -> zeros
  double tol = 1e-8;
  int max_iter = 100;
  int max_halvings = 30;
  int max_outer = 50;  // alternating refits for REG / LIK / AST
  bool include_h2 = false;
  WeightPolicy weights;
  LogisticOptions logistic;
  ElOptions el;
  double prune_tol = 1e-8;
};

struct EstimateResult {
  Vec theta;
  std::string estimator;
  bool converged = false;
  int iterations = 0;        // inner Newton iterations (last solve)
  int outer_iterations = 0;  // alternating passes, when applicable
  double residual = 0.0;     // max-norm of the estimating equation at theta
  std::map<std::string, double> diagnostics;
  std::map<std::string, Vec> extras;  // lambda, kappa, chi, ... when applicable
};

// Optional primary-sample term P(theta) = mean over all rows of
// T * phi1(Y, U; theta); the solvers find the root of P(theta) - G(theta)
// where G is the setting-specific auxiliary-side equation.  P == nullptr
// recovers the one-sample restriction E{ Phi(X, U; theta) | T = 1 } = 0.
struct PrimaryTerm {
  std::function<Vec(const Vec&)> value;
  std::function<Mat(const Vec&)> jac;  // may be empty
};

EstimateResult solve_or(const MergedSample& s, const MomentModel& mm, const PsiHat& psi,
                        const SolveOptions& opts = {}, const PrimaryTerm* primary = nullptr);

EstimateResult solve_ipw(const MergedSample& s, const MomentModel& mm, const FittedPs& ps,
                         const SolveOptions& opts = {}, const PrimaryTerm* primary = nullptr);

enum class AipwVariant { NP, SP };

EstimateResult solve_aipw(const MergedSample& s, const MomentModel& mm, const FittedPs& ps,
                          const PsiHat& psi, AipwVariant variant,
                          const SolveOptions& opts = {}, const PrimaryTerm* primary = nullptr);

// Calibrated regression estimator.  Alternates between (a) refitting the
// augmented propensity model on [f, psi_theta] and (b) solving the weighted
// moment equation sum_{t=0} w_i pi_i Phi_i(theta) = 0, where the implied
// weights w_i = n^-1 (1-pi_i)^-1 {1 - kappa' h_i / (1-pi_i)} reproduce the
// regression-adjusted equation mean{tau(theta)} - beta(theta)' mean{xi} = 0.
EstimateResult solve_calibrated_reg(const MergedSample& s, const MomentModel& mm,
                                    const DesignMatrix& f, const PsiHat& psi,
                                    const SolveOptions& opts = {},
                                    const PrimaryTerm* primary = nullptr);

// Calibrated empirical-likelihood estimator: same outer loop, with the
// auxiliary weights n^-1 / (1 - omega_tilde) coming from the two EL stages.
EstimateResult solve_calibrated_lik(const MergedSample& s, const MomentModel& mm,
                                    const DesignMatrix& f, const PsiHat& psi,
                                    const SolveOptions& opts = {},
                                    const PrimaryTerm* primary = nullptr);

// Tilted-weight comparator: augments the fitted propensity index by chi'psi,
// chooses chi so the auxiliary inverse weights balance pi*psi, then solves
// mean{(1-T) w_ast^-1 pi Phi(theta)} = 0.
EstimateResult solve_ast(const MergedSample& s, const MomentModel& mm,
                         const DesignMatrix& f, const PsiHat& psi,
                         const SolveOptions& opts = {},
                         const PrimaryTerm* primary = nullptr);

// Split-restriction front end: builds the primary term from pair.phi1 and
// dispatches on method using pair.phi0 for the auxiliary side.
EstimateResult solve_setting2(const MergedSample& s, const MomentPair& pair, Method method,
                              const DesignMatrix& f, const PsiHat& psi,
                              const FittedPs* ps,  // required for IPW / AIPW
                              const SolveOptions& opts = {});

}  // namespace tsdc
